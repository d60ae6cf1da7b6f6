//! Vocabulary gateway: one façade over either a local NDJSON fixture or a
//! hosted concept-search service, with query caching and upstream rate
//! limiting. Everything above this layer (guard, agent, MCP server) talks to
//! [`VocabularyStore`] and cannot tell the backends apart.

mod cache;
mod clock;
mod fixture;
mod live;
mod rate_limit;

pub use cache::{CacheKey, QueryCache};
pub use clock::{Clock, ManualClock, SystemClock};
pub use fixture::{FixtureError, FixtureIndex};
pub use live::{
    HttpResponse, HttpTransport, LiveClient, ReqwestTransport, RetryPolicy, TransportError,
};
pub use rate_limit::{RateLimited, RateLimiter};

use crate::vocabulary::{normalize_name, CandidateSet, Concept, StandardKind};
use std::sync::Arc;

pub const DEFAULT_PAGE_SIZE: u32 = 20;
pub const MAX_PAGE_SIZE: u32 = 100;

pub const ENV_BASE_URL: &str = "ATHENA_BASE_URL";
pub const ENV_RATE_LIMIT_RPS: &str = "ATHENA_RATE_LIMIT_RPS";
pub const ENV_CACHE_TTL_SECS: &str = "ATHENA_CACHE_TTL_SECS";
pub const ENV_FIXTURE_PATH: &str = "OMOP_MCP_FIXTURE";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid concept id: {0} (must be a positive integer)")]
    InvalidId(i64),
    #[error("rate limit exceeded")]
    RateLimited,
    /// Upstream missing, unreachable, or misconfigured.
    #[error("upstream unavailable: {0}")]
    UpstreamUnavailable(String),
}

impl From<RateLimited> for GatewayError {
    fn from(_: RateLimited) -> Self {
        GatewayError::RateLimited
    }
}

/// Search constraints applied on top of the query term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchFilters {
    pub domain: Option<String>,
    pub vocabulary: Option<Vec<String>>,
    pub standard_only: bool,
    pub page: u32,
    pub page_size: u32,
}

impl Default for SearchFilters {
    fn default() -> Self {
        SearchFilters {
            domain: None,
            vocabulary: None,
            standard_only: false,
            page: 1,
            page_size: DEFAULT_PAGE_SIZE,
        }
    }
}

impl SearchFilters {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.page < 1 {
            return Err(GatewayError::InvalidQuery("page must be at least 1".into()));
        }
        if self.page_size < 1 || self.page_size > MAX_PAGE_SIZE {
            return Err(GatewayError::InvalidQuery(format!(
                "page_size must be between 1 and {MAX_PAGE_SIZE}, got {}",
                self.page_size
            )));
        }
        Ok(())
    }

    /// Whether a concept passes the domain / vocabulary / standard filters.
    /// Matching is case-insensitive so "condition" and "Condition" agree.
    pub fn admits(&self, concept: &Concept) -> bool {
        if let Some(domain) = &self.domain {
            if !concept.domain_id.eq_ignore_ascii_case(domain) {
                return false;
            }
        }
        if let Some(vocabularies) = &self.vocabulary {
            if !vocabularies.iter().any(|v| concept.vocabulary_id.eq_ignore_ascii_case(v)) {
                return false;
            }
        }
        if self.standard_only && concept.standard != StandardKind::Standard {
            return false;
        }
        true
    }

    /// Stable textual form for cache keys: lowercased, vocabulary list sorted,
    /// so equivalent filters collide regardless of spelling or order.
    pub fn canonical_string(&self) -> String {
        let domain = self.domain.as_deref().unwrap_or("").to_lowercase();
        let vocabulary = match &self.vocabulary {
            None => String::new(),
            Some(list) => {
                let mut lowered: Vec<String> = list.iter().map(|v| v.to_lowercase()).collect();
                lowered.sort();
                lowered.join(",")
            }
        };
        format!(
            "domain={domain}|vocabulary={vocabulary}|standard={}|page={}|page_size={}",
            self.standard_only, self.page, self.page_size
        )
    }
}

/// Tuning knobs shared by both backends.
#[derive(Debug, Clone, Copy)]
pub struct GatewayConfig {
    /// Upstream requests allowed per trailing second; 0 disables limiting.
    pub rate_limit_rps: u32,
    /// Query cache lifetime; 0 disables caching.
    pub cache_ttl_secs: u64,
    pub cache_capacity: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { rate_limit_rps: 5, cache_ttl_secs: 86_400, cache_capacity: 10_000 }
    }
}

impl GatewayConfig {
    /// Reads `ATHENA_RATE_LIMIT_RPS` and `ATHENA_CACHE_TTL_SECS`, keeping
    /// defaults for unset variables. Set-but-unparsable values are an error
    /// rather than a silent fallback.
    pub fn from_env() -> Result<Self, GatewayError> {
        let mut config = GatewayConfig::default();
        if let Ok(raw) = std::env::var(ENV_RATE_LIMIT_RPS) {
            config.rate_limit_rps = raw.trim().parse().map_err(|_| {
                GatewayError::UpstreamUnavailable(format!(
                    "{ENV_RATE_LIMIT_RPS} must be a non-negative integer, got {raw:?}"
                ))
            })?;
        }
        if let Ok(raw) = std::env::var(ENV_CACHE_TTL_SECS) {
            config.cache_ttl_secs = raw.trim().parse().map_err(|_| {
                GatewayError::UpstreamUnavailable(format!(
                    "{ENV_CACHE_TTL_SECS} must be a non-negative integer, got {raw:?}"
                ))
            })?;
        }
        Ok(config)
    }
}

enum Backend {
    Fixture(FixtureIndex),
    Live(LiveClient),
}

/// Concept search and lookup with caching; live backends are additionally
/// rate limited. Construction picks the backend, after which the API is
/// identical.
pub struct VocabularyStore {
    backend: Backend,
    cache: QueryCache,
    limiter: Option<RateLimiter>,
    clock: Arc<dyn Clock>,
}

impl VocabularyStore {
    pub fn fixture(index: FixtureIndex) -> Self {
        Self::fixture_with(index, GatewayConfig::default(), SystemClock::shared())
    }

    pub fn fixture_from_path(path: impl AsRef<std::path::Path>) -> Result<Self, GatewayError> {
        let index = FixtureIndex::from_ndjson_path(&path).map_err(|e| {
            GatewayError::UpstreamUnavailable(format!("fixture {}: {e}", path.as_ref().display()))
        })?;
        Ok(Self::fixture(index))
    }

    pub fn fixture_with(index: FixtureIndex, config: GatewayConfig, clock: Arc<dyn Clock>) -> Self {
        VocabularyStore {
            backend: Backend::Fixture(index),
            cache: QueryCache::new(config.cache_capacity, config.cache_ttl_secs * 1000),
            limiter: None,
            clock,
        }
    }

    pub fn live(base_url: impl Into<String>, config: GatewayConfig) -> Result<Self, GatewayError> {
        let transport = Box::new(ReqwestTransport::new()?);
        Ok(Self::live_with(base_url, transport, config, SystemClock::shared()))
    }

    pub fn live_with(
        base_url: impl Into<String>,
        transport: Box<dyn HttpTransport>,
        config: GatewayConfig,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let client = LiveClient::new(base_url, transport, RetryPolicy::default(), clock.clone());
        let limiter = match config.rate_limit_rps {
            0 => None,
            rps => Some(RateLimiter::new(rps, clock.clone())),
        };
        VocabularyStore {
            backend: Backend::Live(client),
            cache: QueryCache::new(config.cache_capacity, config.cache_ttl_secs * 1000),
            limiter,
            clock,
        }
    }

    /// Backend resolution for processes configured purely by environment:
    /// `OMOP_MCP_FIXTURE` wins, then `ATHENA_BASE_URL`; neither is an error
    /// so that a misconfigured server never falls through to a surprise
    /// network dependency.
    pub fn from_env() -> Result<Self, GatewayError> {
        let config = GatewayConfig::from_env()?;
        if let Ok(path) = std::env::var(ENV_FIXTURE_PATH) {
            let index = FixtureIndex::from_ndjson_path(&path)
                .map_err(|e| GatewayError::UpstreamUnavailable(format!("fixture {path}: {e}")))?;
            return Ok(Self::fixture_with(index, config, SystemClock::shared()));
        }
        if let Ok(base_url) = std::env::var(ENV_BASE_URL) {
            return Self::live(base_url, config);
        }
        Err(GatewayError::UpstreamUnavailable(format!(
            "no backend configured: set {ENV_FIXTURE_PATH} or {ENV_BASE_URL}"
        )))
    }

    pub fn is_fixture(&self) -> bool {
        matches!(self.backend, Backend::Fixture(_))
    }

    pub fn backend_description(&self) -> String {
        match &self.backend {
            Backend::Fixture(index) => format!("fixture ({} concepts)", index.len()),
            Backend::Live(client) => format!("live ({})", client.base_url()),
        }
    }

    pub fn search_concepts(
        &self,
        query: &str,
        filters: &SearchFilters,
    ) -> Result<CandidateSet, GatewayError> {
        filters.validate()?;
        let normalized = normalize_name(query);
        if normalized.is_empty() {
            return Err(GatewayError::InvalidQuery("query must not be blank".into()));
        }
        let key = CacheKey { normalized_query: normalized, filters: filters.canonical_string() };
        if let Some(hit) = self.cache.get(&key, self.clock.now_millis()) {
            return Ok(hit);
        }
        let result = match &self.backend {
            Backend::Fixture(index) => index.search(query, filters),
            Backend::Live(client) => {
                if let Some(limiter) = &self.limiter {
                    limiter.acquire(true)?;
                }
                client.search(query, filters)?
            }
        };
        self.cache.put(key, result.clone(), self.clock.now_millis());
        Ok(result)
    }

    /// `Ok(None)` means the id is well-formed but no such concept exists.
    pub fn get_concept(&self, concept_id: i64) -> Result<Option<Concept>, GatewayError> {
        if concept_id < 1 {
            return Err(GatewayError::InvalidId(concept_id));
        }
        match &self.backend {
            Backend::Fixture(index) => Ok(index.get(concept_id).cloned()),
            Backend::Live(client) => {
                if let Some(limiter) = &self.limiter {
                    limiter.acquire(true)?;
                }
                client.get_concept(concept_id)
            }
        }
    }

    /// Timestamps (clock milliseconds) at which upstream requests were
    /// admitted. Empty for fixture backends and unlimited live backends.
    pub fn upstream_grants(&self) -> Vec<u64> {
        self.limiter.as_ref().map(|l| l.granted_timestamps()).unwrap_or_default()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabulary::{ConceptId, Validity};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn concept(
        id: i64,
        name: &str,
        domain: &str,
        vocabulary: &str,
        standard: StandardKind,
    ) -> Concept {
        Concept {
            concept_id: ConceptId::new(id).unwrap(),
            concept_name: name.to_string(),
            domain_id: domain.to_string(),
            vocabulary_id: vocabulary.to_string(),
            concept_class: "Clinical Finding".to_string(),
            standard,
            validity: Validity::Valid,
        }
    }

    fn small_index() -> FixtureIndex {
        FixtureIndex::from_concepts(vec![
            concept(77670, "Chest pain", "Condition", "SNOMED", StandardKind::Standard),
            concept(3020891, "Body temperature", "Measurement", "LOINC", StandardKind::Standard),
            concept(45883458, "Chest pain", "Condition", "ICD10CM", StandardKind::NonStandard),
        ])
        .unwrap()
    }

    #[test]
    fn filter_validation_bounds() {
        let ok = SearchFilters::default();
        assert!(ok.validate().is_ok());

        let zero_page = SearchFilters { page: 0, ..SearchFilters::default() };
        assert!(matches!(zero_page.validate(), Err(GatewayError::InvalidQuery(_))));

        let zero_size = SearchFilters { page_size: 0, ..SearchFilters::default() };
        assert!(zero_size.validate().is_err());

        let max_size = SearchFilters { page_size: 100, ..SearchFilters::default() };
        assert!(max_size.validate().is_ok());

        let oversized = SearchFilters { page_size: 101, ..SearchFilters::default() };
        assert!(oversized.validate().is_err());
    }

    #[test]
    fn admits_is_case_insensitive() {
        let c = concept(77670, "Chest pain", "Condition", "SNOMED", StandardKind::Standard);
        let by_domain = SearchFilters { domain: Some("condition".into()), ..Default::default() };
        assert!(by_domain.admits(&c));
        let wrong_domain = SearchFilters { domain: Some("Drug".into()), ..Default::default() };
        assert!(!wrong_domain.admits(&c));

        let by_vocab = SearchFilters {
            vocabulary: Some(vec!["loinc".into(), "snomed".into()]),
            ..Default::default()
        };
        assert!(by_vocab.admits(&c));

        let standard_only = SearchFilters { standard_only: true, ..Default::default() };
        assert!(standard_only.admits(&c));
        let nonstandard =
            concept(1, "Chest pain", "Condition", "ICD10CM", StandardKind::NonStandard);
        assert!(!standard_only.admits(&nonstandard));
    }

    #[test]
    fn canonical_string_ignores_vocabulary_order_and_case() {
        let a = SearchFilters {
            vocabulary: Some(vec!["SNOMED".into(), "LOINC".into()]),
            domain: Some("Condition".into()),
            ..Default::default()
        };
        let b = SearchFilters {
            vocabulary: Some(vec!["loinc".into(), "snomed".into()]),
            domain: Some("CONDITION".into()),
            ..Default::default()
        };
        assert_eq!(a.canonical_string(), b.canonical_string());
        let c = SearchFilters { page: 2, ..a.clone() };
        assert_ne!(a.canonical_string(), c.canonical_string());
    }

    #[test]
    fn fixture_store_searches_and_caches() {
        let clock = ManualClock::shared();
        let store = VocabularyStore::fixture_with(small_index(), GatewayConfig::default(), clock);
        let filters = SearchFilters::default();

        let first = store.search_concepts("chest pain", &filters).unwrap();
        assert_eq!(first.candidates.len(), 2);
        assert_eq!(first.candidates[0].concept_id.get(), 77670);
        assert_eq!(store.cache_len(), 1);

        // Different spelling of the same query reuses the cached entry.
        let second = store.search_concepts("  CHEST   PAIN ", &filters).unwrap();
        assert_eq!(second.candidates, first.candidates);
        assert_eq!(store.cache_len(), 1);
    }

    #[test]
    fn blank_query_and_bad_id_are_rejected() {
        let store = VocabularyStore::fixture(small_index());
        assert!(matches!(
            store.search_concepts("   ", &SearchFilters::default()),
            Err(GatewayError::InvalidQuery(_))
        ));
        assert!(matches!(store.get_concept(0), Err(GatewayError::InvalidId(0))));
        assert!(matches!(store.get_concept(-5), Err(GatewayError::InvalidId(-5))));
        assert_eq!(store.get_concept(999_999).unwrap(), None);
        assert_eq!(store.get_concept(77670).unwrap().unwrap().concept_name, "Chest pain");
    }

    struct CountingTransport {
        calls: AtomicUsize,
        body: Mutex<String>,
    }

    impl HttpTransport for Arc<CountingTransport> {
        fn get(&self, _url: &str) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(HttpResponse { status: 200, body: self.body.lock().unwrap().clone() })
        }
    }

    fn counting_live_store(
        rps: u32,
        ttl_secs: u64,
        clock: Arc<ManualClock>,
    ) -> (VocabularyStore, Arc<CountingTransport>) {
        let body = r#"{"content":[{"id":77670,"name":"Chest pain","domain":"Condition","vocabulary":"SNOMED","className":"Clinical Finding","standardConcept":"Standard","invalidReason":null}],"totalElements":1}"#;
        let transport = Arc::new(CountingTransport {
            calls: AtomicUsize::new(0),
            body: Mutex::new(body.to_string()),
        });
        let config =
            GatewayConfig { rate_limit_rps: rps, cache_ttl_secs: ttl_secs, cache_capacity: 100 };
        let store = VocabularyStore::live_with(
            "https://athena.example.org",
            Box::new(transport.clone()),
            config,
            clock,
        );
        (store, transport)
    }

    #[test]
    fn live_store_caches_until_ttl_expires() {
        let clock = ManualClock::shared();
        let (store, transport) = counting_live_store(0, 10, clock.clone());
        let filters = SearchFilters::default();

        store.search_concepts("chest pain", &filters).unwrap();
        store.search_concepts("chest pain", &filters).unwrap();
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);

        clock.advance(10_000);
        store.search_concepts("chest pain", &filters).unwrap();
        assert_eq!(transport.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn live_store_rate_limits_uncached_calls() {
        let clock = ManualClock::shared();
        let (store, transport) = counting_live_store(2, 0, clock.clone());
        let filters = SearchFilters::default();

        for i in 0..5 {
            store.search_concepts(&format!("query {i}"), &filters).unwrap();
        }
        assert_eq!(transport.calls.load(Ordering::SeqCst), 5);
        let grants = store.upstream_grants();
        assert_eq!(grants.len(), 5);
        for pair in grants.windows(3) {
            assert!(pair[2] - pair[0] >= 1000, "3 grants within one second: {grants:?}");
        }
    }

    #[test]
    fn cache_hits_bypass_the_rate_limiter() {
        let clock = ManualClock::shared();
        let (store, _transport) = counting_live_store(1, 1000, clock.clone());
        let filters = SearchFilters::default();

        store.search_concepts("chest pain", &filters).unwrap();
        for _ in 0..10 {
            store.search_concepts("chest pain", &filters).unwrap();
        }
        assert_eq!(store.upstream_grants().len(), 1);
        // Virtual time never had to advance: every repeat was a cache hit.
        assert_eq!(clock.now_millis(), 0);
    }

    #[test]
    fn env_configuration_round_trip() {
        // Sequential scenarios in one test: these variables are process-wide.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("concepts.ndjson");
        std::fs::write(
            &path,
            r#"{"concept_id":77670,"concept_name":"Chest pain","domain_id":"Condition","vocabulary_id":"SNOMED","concept_class":"Clinical Finding","standard":"S","validity":"V"}"#,
        )
        .unwrap();

        std::env::remove_var(ENV_BASE_URL);
        std::env::remove_var(ENV_FIXTURE_PATH);
        std::env::set_var(ENV_RATE_LIMIT_RPS, "7");
        std::env::set_var(ENV_CACHE_TTL_SECS, "60");
        let config = GatewayConfig::from_env().unwrap();
        assert_eq!(config.rate_limit_rps, 7);
        assert_eq!(config.cache_ttl_secs, 60);

        assert!(VocabularyStore::from_env().is_err());

        std::env::set_var(ENV_FIXTURE_PATH, path.to_str().unwrap());
        let store = VocabularyStore::from_env().unwrap();
        assert!(store.is_fixture());
        assert_eq!(store.get_concept(77670).unwrap().unwrap().concept_name, "Chest pain");

        std::env::set_var(ENV_RATE_LIMIT_RPS, "not a number");
        assert!(GatewayConfig::from_env().is_err());

        std::env::remove_var(ENV_RATE_LIMIT_RPS);
        std::env::remove_var(ENV_CACHE_TTL_SECS);
        std::env::remove_var(ENV_FIXTURE_PATH);
    }
}
