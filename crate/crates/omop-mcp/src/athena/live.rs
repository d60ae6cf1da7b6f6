//! HTTP client for a hosted concept-search service.
//!
//! Endpoint shape: `GET {base}/api/v1/concepts` with parameters `query`,
//! `page`, `pageSize`, `domain`, `vocabulary`, `standardConcept`, and
//! `GET {base}/api/v1/concepts/{id}` for direct lookup. The transport is a
//! trait so contract tests can stub responses; retry with exponential
//! backoff applies to transport errors and 5xx responses only.

use super::clock::Clock;
use super::{GatewayError, SearchFilters};
use crate::vocabulary::{CandidateSet, Concept, ConceptId, StandardKind, Validity};
use serde::Deserialize;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError>;
}

/// Connection-level failure (DNS, refused, timeout), before any HTTP status.
#[derive(Debug, Clone, thiserror::Error)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| GatewayError::UpstreamUnavailable(e.to_string()))?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        let response = self.client.get(url).send().map_err(|e| TransportError(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_millis: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff_millis: 250 }
    }
}

pub struct LiveClient {
    base_url: String,
    transport: Box<dyn HttpTransport>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
}

impl LiveClient {
    pub fn new(
        base_url: impl Into<String>,
        transport: Box<dyn HttpTransport>,
        retry: RetryPolicy,
        clock: Arc<dyn Clock>,
    ) -> Self {
        LiveClient { base_url: base_url.into(), transport, retry, clock }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn search(
        &self,
        query: &str,
        filters: &SearchFilters,
    ) -> Result<CandidateSet, GatewayError> {
        let mut params: Vec<(&str, String)> = vec![
            ("query", query.trim().to_string()),
            ("page", filters.page.to_string()),
            ("pageSize", filters.page_size.to_string()),
        ];
        if let Some(domain) = &filters.domain {
            params.push(("domain", domain.clone()));
        }
        if let Some(vocabularies) = &filters.vocabulary {
            for vocabulary in vocabularies {
                params.push(("vocabulary", vocabulary.clone()));
            }
        }
        if filters.standard_only {
            params.push(("standardConcept", "Standard".to_string()));
        }
        let base = format!("{}/api/v1/concepts", self.base_url.trim_end_matches('/'));
        let url = reqwest::Url::parse_with_params(&base, &params)
            .map_err(|e| GatewayError::InvalidQuery(e.to_string()))?;

        let response = self.get_with_retry(url.as_str())?;
        if response.status != 200 {
            return Err(GatewayError::UpstreamUnavailable(format!(
                "search returned HTTP {}",
                response.status
            )));
        }
        let parsed: SearchResponseDto = serde_json::from_str(&response.body)
            .map_err(|e| GatewayError::UpstreamUnavailable(format!("bad response body: {e}")))?;

        let candidates: Vec<Concept> =
            parsed.content.into_iter().map(ConceptDto::into_concept).collect::<Result<_, _>>()?;
        let total_available = parsed.total_elements.unwrap_or(candidates.len() as u64);
        Ok(CandidateSet {
            query: query.trim().to_string(),
            candidates,
            total_available,
            page: filters.page,
            page_size: filters.page_size,
        })
    }

    pub fn get_concept(&self, concept_id: i64) -> Result<Option<Concept>, GatewayError> {
        let url = format!("{}/api/v1/concepts/{}", self.base_url.trim_end_matches('/'), concept_id);
        let response = self.get_with_retry(&url)?;
        match response.status {
            200 => {
                let dto: ConceptDto = serde_json::from_str(&response.body).map_err(|e| {
                    GatewayError::UpstreamUnavailable(format!("bad response body: {e}"))
                })?;
                Ok(Some(dto.into_concept()?))
            }
            404 => Ok(None),
            status => {
                Err(GatewayError::UpstreamUnavailable(format!("lookup returned HTTP {status}")))
            }
        }
    }

    fn get_with_retry(&self, url: &str) -> Result<HttpResponse, GatewayError> {
        let mut backoff = self.retry.initial_backoff_millis;
        let mut last_error = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            match self.transport.get(url) {
                Ok(response) if response.status < 500 => return Ok(response),
                Ok(response) => last_error = format!("HTTP {}", response.status),
                Err(TransportError(message)) => last_error = message,
            }
            if attempt < self.retry.attempts {
                self.clock.sleep_millis(backoff);
                backoff = backoff.saturating_mul(2);
            }
        }
        Err(GatewayError::UpstreamUnavailable(format!(
            "{} attempts failed, last error: {last_error}",
            self.retry.attempts
        )))
    }
}

#[derive(Deserialize)]
struct SearchResponseDto {
    #[serde(default)]
    content: Vec<ConceptDto>,
    #[serde(rename = "totalElements")]
    total_elements: Option<u64>,
}

/// Upstream concept record. Field spellings vary across deployments, so the
/// common aliases are accepted.
#[derive(Deserialize)]
struct ConceptDto {
    id: i64,
    name: String,
    #[serde(alias = "domainId")]
    domain: Option<String>,
    #[serde(alias = "vocabularyId")]
    vocabulary: Option<String>,
    #[serde(alias = "conceptClass", alias = "className")]
    concept_class: Option<String>,
    #[serde(rename = "standardConcept")]
    standard_concept: Option<String>,
    #[serde(rename = "invalidReason")]
    invalid_reason: Option<String>,
}

impl ConceptDto {
    fn into_concept(self) -> Result<Concept, GatewayError> {
        let concept_id = ConceptId::new(self.id)
            .map_err(|e| GatewayError::UpstreamUnavailable(e.to_string()))?;
        let standard = match self.standard_concept.as_deref() {
            Some("Standard") | Some("S") => StandardKind::Standard,
            Some("Classification") | Some("C") => StandardKind::Classification,
            _ => StandardKind::NonStandard,
        };
        // Athena reports either nothing or a literal reason for invalidity.
        let validity = match self.invalid_reason.as_deref() {
            None | Some("") | Some("Valid") | Some("V") => Validity::Valid,
            Some(_) => Validity::Invalid,
        };
        Ok(Concept {
            concept_id,
            concept_name: self.name,
            domain_id: self.domain.unwrap_or_default(),
            vocabulary_id: self.vocabulary.unwrap_or_default(),
            concept_class: self.concept_class.unwrap_or_default(),
            standard,
            validity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::athena::clock::ManualClock;
    use std::sync::Mutex;

    struct ScriptedTransport {
        responses: Mutex<Vec<Result<HttpResponse, TransportError>>>,
        urls: Mutex<Vec<String>>,
    }

    impl ScriptedTransport {
        fn new(responses: Vec<Result<HttpResponse, TransportError>>) -> Self {
            ScriptedTransport { responses: Mutex::new(responses), urls: Mutex::new(Vec::new()) }
        }
    }

    impl HttpTransport for ScriptedTransport {
        fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
            self.urls.lock().unwrap().push(url.to_string());
            let mut responses = self.responses.lock().unwrap();
            if responses.is_empty() {
                return Err(TransportError("script exhausted".into()));
            }
            responses.remove(0)
        }
    }

    impl HttpTransport for Arc<ScriptedTransport> {
        fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
            self.as_ref().get(url)
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse { status: 200, body: body.to_string() })
    }

    fn search_body() -> String {
        r#"{"content":[{"id":77670,"name":"Chest pain","domain":"Condition","vocabulary":"SNOMED","className":"Clinical Finding","standardConcept":"Standard","invalidReason":null}],"totalElements":1}"#
            .to_string()
    }

    #[test]
    fn search_builds_url_and_maps_concepts() {
        let transport = Arc::new(ScriptedTransport::new(vec![ok(&search_body())]));
        let client = LiveClient::new(
            "https://athena.example.org",
            Box::new(transport.clone()),
            RetryPolicy::default(),
            ManualClock::shared(),
        );
        let filters = SearchFilters {
            domain: Some("Condition".into()),
            standard_only: true,
            ..SearchFilters::default()
        };
        let result = client.search("chest pain", &filters).unwrap();
        assert_eq!(result.candidates[0].concept_id.get(), 77670);
        assert_eq!(result.candidates[0].standard, StandardKind::Standard);
        assert_eq!(result.total_available, 1);

        let urls = transport.urls.lock().unwrap();
        assert_eq!(urls.len(), 1);
        assert!(urls[0].starts_with("https://athena.example.org/api/v1/concepts?"));
        assert!(urls[0].contains("query=chest+pain"));
        assert!(urls[0].contains("page=1"));
        assert!(urls[0].contains("pageSize=20"));
        assert!(urls[0].contains("domain=Condition"));
        assert!(urls[0].contains("standardConcept=Standard"));
    }

    #[test]
    fn retries_on_5xx_then_succeeds() {
        let clock = ManualClock::shared();
        let transport = Box::new(ScriptedTransport::new(vec![
            Ok(HttpResponse { status: 503, body: String::new() }),
            Err(TransportError("connection reset".into())),
            ok(&search_body()),
        ]));
        let client = LiveClient::new(
            "https://athena.example.org",
            transport,
            RetryPolicy::default(),
            clock.clone(),
        );
        let result = client.search("chest pain", &SearchFilters::default()).unwrap();
        assert_eq!(result.candidates.len(), 1);
        // Two backoffs: 250 then 500 virtual milliseconds.
        assert_eq!(clock.now_millis(), 750);
    }

    #[test]
    fn gives_up_after_attempts_exhausted() {
        let transport = Box::new(ScriptedTransport::new(vec![
            Ok(HttpResponse { status: 500, body: String::new() }),
            Ok(HttpResponse { status: 502, body: String::new() }),
            Ok(HttpResponse { status: 503, body: String::new() }),
        ]));
        let client = LiveClient::new(
            "https://athena.example.org",
            transport,
            RetryPolicy::default(),
            ManualClock::shared(),
        );
        let err = client.search("chest pain", &SearchFilters::default()).unwrap_err();
        assert!(matches!(err, GatewayError::UpstreamUnavailable(_)));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let transport = Box::new(ScriptedTransport::new(vec![Ok(HttpResponse {
            status: 404,
            body: String::new(),
        })]));
        let client = LiveClient::new(
            "https://athena.example.org",
            transport,
            RetryPolicy::default(),
            ManualClock::shared(),
        );
        assert_eq!(client.get_concept(99).unwrap(), None);
    }
}
