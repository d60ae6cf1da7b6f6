//! Bounded TTL + LRU cache for search results, keyed by normalized query and
//! canonicalized filters.

use crate::vocabulary::CandidateSet;
use std::collections::HashMap;
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub normalized_query: String,
    pub filters: String,
}

struct CacheEntry {
    value: CandidateSet,
    stored_at: u64,
    last_used: u64,
}

pub struct QueryCache {
    capacity: usize,
    ttl_millis: u64,
    state: Mutex<CacheState>,
}

struct CacheState {
    entries: HashMap<CacheKey, CacheEntry>,
    use_counter: u64,
}

impl QueryCache {
    /// TTL of 0 disables caching entirely.
    pub fn new(capacity: usize, ttl_millis: u64) -> Self {
        QueryCache {
            capacity,
            ttl_millis,
            state: Mutex::new(CacheState { entries: HashMap::new(), use_counter: 0 }),
        }
    }

    pub fn get(&self, key: &CacheKey, now_millis: u64) -> Option<CandidateSet> {
        if self.ttl_millis == 0 || self.capacity == 0 {
            return None;
        }
        let mut state = self.state.lock().expect("cache lock");
        state.use_counter += 1;
        let counter = state.use_counter;
        let entry = state.entries.get_mut(key)?;
        if now_millis.saturating_sub(entry.stored_at) >= self.ttl_millis {
            state.entries.remove(key);
            return None;
        }
        entry.last_used = counter;
        Some(entry.value.clone())
    }

    pub fn put(&self, key: CacheKey, value: CandidateSet, now_millis: u64) {
        if self.ttl_millis == 0 || self.capacity == 0 {
            return;
        }
        let mut state = self.state.lock().expect("cache lock");
        state.use_counter += 1;
        let counter = state.use_counter;
        if state.entries.len() >= self.capacity && !state.entries.contains_key(&key) {
            if let Some(lru_key) = state
                .entries
                .iter()
                .min_by_key(|(_, entry)| entry.last_used)
                .map(|(k, _)| k.clone())
            {
                state.entries.remove(&lru_key);
            }
        }
        state.entries.insert(key, CacheEntry { value, stored_at: now_millis, last_used: counter });
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(query: &str) -> CandidateSet {
        CandidateSet {
            query: query.to_string(),
            candidates: Vec::new(),
            total_available: 0,
            page: 1,
            page_size: 20,
        }
    }

    fn key(query: &str) -> CacheKey {
        CacheKey { normalized_query: query.to_string(), filters: String::new() }
    }

    #[test]
    fn expired_entries_are_never_served() {
        let cache = QueryCache::new(10, 1000);
        cache.put(key("a"), set("a"), 0);
        assert!(cache.get(&key("a"), 999).is_some());
        assert!(cache.get(&key("a"), 1000).is_none());
    }

    #[test]
    fn zero_ttl_disables_cache() {
        let cache = QueryCache::new(10, 0);
        cache.put(key("a"), set("a"), 0);
        assert!(cache.get(&key("a"), 0).is_none());
        assert_eq!(cache.len(), 0);
    }

    #[test]
    fn least_recently_used_is_evicted_first() {
        let cache = QueryCache::new(2, 10_000);
        cache.put(key("a"), set("a"), 0);
        cache.put(key("b"), set("b"), 0);
        // Touch "a" so "b" becomes the eviction candidate.
        assert!(cache.get(&key("a"), 1).is_some());
        cache.put(key("c"), set("c"), 2);
        assert!(cache.get(&key("a"), 3).is_some());
        assert!(cache.get(&key("b"), 3).is_none());
        assert!(cache.get(&key("c"), 3).is_some());
    }
}
