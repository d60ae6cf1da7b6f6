//! Sliding-window rate limiter for upstream vocabulary calls.
//!
//! Guarantees that any 1-second window contains at most `max_per_second`
//! grants: a grant is issued only once fewer than that many grants exist in
//! the trailing second, which forces any r+1 consecutive grants to span at
//! least one second.

use super::clock::Clock;
use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

const WINDOW_MILLIS: u64 = 1000;

pub struct RateLimiter {
    max_per_second: u32,
    state: Mutex<LimiterState>,
    clock: Arc<dyn Clock>,
}

struct LimiterState {
    window: VecDeque<u64>,
    granted: Vec<u64>,
}

impl RateLimiter {
    /// `max_per_second` of 0 disables limiting.
    pub fn new(max_per_second: u32, clock: Arc<dyn Clock>) -> Self {
        RateLimiter {
            max_per_second,
            state: Mutex::new(LimiterState { window: VecDeque::new(), granted: Vec::new() }),
            clock,
        }
    }

    /// Waits for a slot when `block` is true; otherwise errors once the
    /// budget for the current window is spent.
    pub fn acquire(&self, block: bool) -> Result<(), RateLimited> {
        if self.max_per_second == 0 {
            return Ok(());
        }
        loop {
            let wait_millis = {
                let mut state = self.state.lock().expect("rate limiter lock");
                let now = self.clock.now_millis();
                // A grant leaves the window once a full second has elapsed.
                // Written without subtraction so timestamps near the clock
                // origin are not mistaken for expired ones.
                while state.window.front().is_some_and(|&ts| ts + WINDOW_MILLIS <= now) {
                    state.window.pop_front();
                }
                if state.window.len() < self.max_per_second as usize {
                    state.window.push_back(now);
                    state.granted.push(now);
                    return Ok(());
                }
                let oldest = *state.window.front().expect("window non-empty");
                (oldest + WINDOW_MILLIS).saturating_sub(now).max(1)
            };
            if !block {
                return Err(RateLimited);
            }
            self.clock.sleep_millis(wait_millis);
        }
    }

    /// All grant timestamps since construction, in grant order.
    pub fn granted_timestamps(&self) -> Vec<u64> {
        self.state.lock().expect("rate limiter lock").granted.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("rate limit budget exhausted")]
pub struct RateLimited;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::athena::clock::ManualClock;

    #[test]
    fn burst_respects_window() {
        let clock = ManualClock::shared();
        let limiter = RateLimiter::new(5, clock.clone());
        for _ in 0..23 {
            limiter.acquire(true).unwrap();
        }
        let grants = limiter.granted_timestamps();
        assert_eq!(grants.len(), 23);
        for pair in grants.windows(6) {
            assert!(pair[5] - pair[0] >= 1000, "six grants within {:?}", pair);
        }
    }

    #[test]
    fn non_blocking_errors_when_spent() {
        let clock = ManualClock::shared();
        let limiter = RateLimiter::new(2, clock.clone());
        limiter.acquire(false).unwrap();
        limiter.acquire(false).unwrap();
        assert_eq!(limiter.acquire(false), Err(RateLimited));
        clock.advance(1001);
        assert_eq!(limiter.acquire(false), Ok(()));
    }

    #[test]
    fn zero_budget_means_unlimited() {
        let limiter = RateLimiter::new(0, ManualClock::shared());
        for _ in 0..100 {
            limiter.acquire(false).unwrap();
        }
        assert!(limiter.granted_timestamps().is_empty());
    }
}
