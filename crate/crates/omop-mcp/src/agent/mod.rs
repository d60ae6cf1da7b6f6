//! Two-step mapping workflow over a pluggable chat model: infer a search
//! keyword from the raw source string, retrieve and rank candidates, let the
//! model select, then authenticate the selection before emitting it.
//!
//! The orchestrator never trusts model output. Selections must come from the
//! retrieved candidate set, and every proposal passes the guard; a failure
//! re-prompts with the failure explanation injected, up to a bounded number
//! of attempts. Keyword inference is redone only when a search came back
//! empty (a selection problem is not evidence the keyword was wrong).

mod port;

pub use port::{
    ChatMessage, LiveChatEndpoint, LlmError, LlmPort, LlmReply, Role, ScriptStep, ScriptedMock,
    ENV_LLM_API_BASE, ENV_LLM_API_KEY, ENV_LLM_MODEL,
};

use crate::athena::{GatewayError, SearchFilters, VocabularyStore};
use crate::guard::{verify_mapping, Verdict, VerifiedMapping};
use crate::mcp::resources::domain_for_table;
use crate::preferences::{rank_candidates, PreferenceProfile, DOMAIN_VOCABULARY_DEFAULTS};
use crate::vocabulary::{parse_mapping_output, Concept, FailureKind, OutcomeClass};
use std::time::Instant;

pub const ENV_MAX_ATTEMPTS: &str = "OMOP_MCP_MAX_ATTEMPTS";

/// Token a model replies with to decline mapping.
pub const REFUSAL_TOKEN: &str = "NO_MATCH";

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("model inference returned an empty keyword")]
    EmptyInference,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Upstream(#[from] GatewayError),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRequest {
    pub source_term: String,
    pub target_table: Option<String>,
    pub target_field: Option<String>,
    pub context: Option<String>,
    pub profile: PreferenceProfile,
}

impl MappingRequest {
    pub fn new(source_term: impl Into<String>) -> Self {
        MappingRequest {
            source_term: source_term.into(),
            target_table: None,
            target_field: None,
            context: None,
            profile: PreferenceProfile::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.source_term.trim().is_empty() {
            return Err(AgentError::InvalidRequest("source term must not be blank".into()));
        }
        Ok(())
    }

    /// Profile with the target domain defaulted from the table hint.
    fn effective_profile(&self) -> PreferenceProfile {
        let mut profile = self.profile.clone();
        if profile.target_domain.is_none() {
            if let Some(table) = &self.target_table {
                profile.target_domain = domain_for_table(table).map(str::to_string);
            }
        }
        profile
    }
}

/// A mapping that survived grounding and guard checks, with its audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditedMapping {
    pub request: MappingRequest,
    pub verified: VerifiedMapping,
    pub candidates_considered: Vec<Concept>,
    pub attempts: u32,
    pub elapsed_seconds: f64,
}

/// Terminal mapping failure (the mapping itself failed; infrastructure
/// errors surface as [`AgentError`] instead).
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalFailure {
    pub term: String,
    pub kind: FailureKind,
    pub detail: String,
    pub attempts: u32,
    pub elapsed_seconds: f64,
}

// One value per mapped term; the size gap to the failure variant is not
// worth an indirection in the public API.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum MapOutcome {
    Mapped(AuditedMapping),
    Failed(RetrievalFailure),
}

impl MapOutcome {
    pub fn outcome_class(&self) -> OutcomeClass {
        match self {
            MapOutcome::Mapped(_) => OutcomeClass::Success,
            MapOutcome::Failed(failure) => OutcomeClass::Failure(failure.kind),
        }
    }

    pub fn attempts(&self) -> u32 {
        match self {
            MapOutcome::Mapped(mapping) => mapping.attempts,
            MapOutcome::Failed(failure) => failure.attempts,
        }
    }

    pub fn elapsed_seconds(&self) -> f64 {
        match self {
            MapOutcome::Mapped(mapping) => mapping.elapsed_seconds,
            MapOutcome::Failed(failure) => failure.elapsed_seconds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentOptions {
    /// Full mapping attempts before giving up (each covers inference where
    /// needed, search, selection, and verification).
    pub max_attempts: u32,
    /// Ranked candidates presented to the model.
    pub candidate_limit: usize,
    /// When false, the model answers from memory and the result is only
    /// classified by the guard (the ungrounded baseline).
    pub tool_access: bool,
    /// Model-initiated tool calls allowed within one selection attempt.
    pub tool_hop_limit: u32,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions { max_attempts: 3, candidate_limit: 20, tool_access: true, tool_hop_limit: 3 }
    }
}

impl AgentOptions {
    /// Defaults with `OMOP_MCP_MAX_ATTEMPTS` applied when set.
    pub fn from_env() -> Result<Self, AgentError> {
        let mut options = AgentOptions::default();
        if let Ok(raw) = std::env::var(ENV_MAX_ATTEMPTS) {
            let parsed: u32 = raw.trim().parse().map_err(|_| {
                AgentError::Config(format!(
                    "{ENV_MAX_ATTEMPTS} must be a positive integer, got {raw:?}"
                ))
            })?;
            if parsed == 0 {
                return Err(AgentError::Config(format!("{ENV_MAX_ATTEMPTS} must be at least 1")));
            }
            options.max_attempts = parsed;
        }
        Ok(options)
    }
}

/// Renders the mapping system prompt: procedure, grounding rules, output
/// schema, preference rules (with any user override verbatim), reasoning
/// requirements, then reference material.
pub fn build_system_prompt(profile: &PreferenceProfile, resources: &[String]) -> String {
    let mut prompt = String::from(
        "You map raw clinical source strings to OMOP standard concepts.\n\n\
         Procedure:\n\
         1. Interpret the source term and infer a precise medical keyword,\n\
            expanding abbreviations using any clinical context provided.\n\
         2. Search the vocabulary with the available tool to retrieve\n\
            candidate concepts for the keyword.\n\
         3. Choose the best match from the retrieved candidates.\n\n\
         Grounding rules:\n\
         You are not allowed to invent concept IDs. Every concept_id you\n\
         output must be copied from a retrieved candidate, with its name\n\
         copied verbatim. If no candidate is appropriate, reply with exactly\n\
         NO_MATCH.\n\n\
         Output format:\n\
         Reply with a single JSON object and nothing else:\n\
         {\"concept_id\": <integer>, \"concept_name\": \"<name verbatim>\",\n\
         \"domain_id\": \"<domain>\", \"class\": \"<concept class>\",\n\
         \"validity\": \"<V or I>\", \"domain\": \"<domain>\",\n\
         \"vocabulary\": \"<vocabulary>\", \"concept_url\": \"<url>\",\n\
         \"reasoning\": \"<your reasoning>\",\n\
         \"inferred_keyword\": \"<keyword you searched>\"}\n\n\
         Vocabulary preferences:\n\
         - Prefer standard concepts over classification and non-standard ones.\n\
         - Prefer valid concepts over deprecated ones.\n",
    );
    for (domain, vocabularies) in DOMAIN_VOCABULARY_DEFAULTS {
        prompt.push_str(&format!("- {domain}: prefer {}.\n", vocabularies.join(", then ")));
    }
    if let Some(override_text) = &profile.user_override {
        prompt.push_str(&format!(
            "- User override, which outranks the defaults above: {override_text}\n"
        ));
    }
    prompt.push_str(
        "\nReasoning requirements:\n\
         In the reasoning field, state why you inferred the keyword from the\n\
         source term and why the selected concept is the best match among\n\
         the candidates.\n",
    );
    if !resources.is_empty() {
        prompt.push_str("\nReference material:\n");
        for resource in resources {
            prompt.push('\n');
            prompt.push_str(resource);
            if !resource.ends_with('\n') {
                prompt.push('\n');
            }
        }
    }
    prompt
}

fn default_resource_texts() -> Vec<String> {
    crate::mcp::resources::register_default_resources()
        .into_iter()
        .map(|resource| resource.content)
        .collect()
}

/// Normalizes a model keyword reply: strips code fences and wrapping quotes,
/// collapses it to one line.
fn clean_keyword(raw: &str) -> String {
    let mut text = raw.trim();
    if let Some(stripped) = text.strip_prefix("```") {
        let stripped = stripped.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        text = stripped.strip_suffix("```").unwrap_or(stripped).trim();
    }
    let text = text.trim_matches(|c| c == '"' || c == '\'' || c == '`');
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Infers the search keyword for a request with a single model round trip.
pub fn infer_keyword(request: &MappingRequest, llm: &dyn LlmPort) -> Result<String, AgentError> {
    request.validate()?;
    infer_keyword_inner(request, llm, None)
}

fn infer_keyword_inner(
    request: &MappingRequest,
    llm: &dyn LlmPort,
    retry_note: Option<&str>,
) -> Result<String, AgentError> {
    let system = "You translate raw clinical source strings into a single search \
                  keyword for OMOP vocabulary lookup. Expand abbreviations using the \
                  clinical context. Reply with the keyword only: no quotes, no \
                  explanation.";
    let mut user = format!("Source term: {}\n", request.source_term);
    if let Some(table) = &request.target_table {
        user.push_str(&format!("Target table: {table}\n"));
    }
    if let Some(field) = &request.target_field {
        user.push_str(&format!("Target field: {field}\n"));
    }
    if let Some(context) = &request.context {
        user.push_str(&format!("Clinical context: {context}\n"));
    }
    if let Some(note) = retry_note {
        user.push_str(&format!("Previous attempt failed: {note}\nInfer a better keyword.\n"));
    }
    match llm.send(&[ChatMessage::system(system), ChatMessage::user(user)], &[])? {
        LlmReply::Text(text) => {
            let keyword = clean_keyword(&text);
            if keyword.is_empty() {
                return Err(AgentError::EmptyInference);
            }
            Ok(keyword)
        }
        // The inference round offers no tools; a tool call here carries no
        // keyword and is retried like a blank reply.
        LlmReply::ToolCall { .. } => Err(AgentError::EmptyInference),
    }
}

fn render_candidates(concepts: &[Concept]) -> String {
    let mut table =
        String::from("index. concept_id | name | vocabulary | class | standard | validity\n");
    for (position, concept) in concepts.iter().enumerate() {
        table.push_str(&format!(
            "{}. {} | {} | {} | {} | {} | {}\n",
            position + 1,
            concept.concept_id.get(),
            concept.concept_name,
            concept.vocabulary_id,
            concept.concept_class,
            concept.standard.code(),
            concept.validity.code(),
        ));
    }
    table
}

/// JSON-schema descriptors for the vocabulary tools, offered to models that
/// want to search beyond the presented candidates. The parameter schemas are
/// the same objects the MCP server lists, wrapped in the chat-completions
/// function envelope.
pub fn tool_schemas() -> Vec<serde_json::Value> {
    vec![
        serde_json::json!({
            "type": "function",
            "function": {
                "name": "search_athena",
                "description": "Search OMOP vocabulary concepts by keyword.",
                "parameters": crate::mcp::search_athena_input_schema(),
            }
        }),
        serde_json::json!({
            "type": "function",
            "function": {
                "name": "get_concept_details",
                "description": "Fetch one OMOP concept by its concept id.",
                "parameters": crate::mcp::get_concept_details_input_schema(),
            }
        }),
    ]
}

struct SelectionOutcome {
    reply_text: String,
    extra_candidates: Vec<Concept>,
}

/// Runs one selection round, executing any model-initiated tool calls
/// against the store (bounded by `tool_hop_limit`) until a text reply lands.
fn selection_round(
    llm: &dyn LlmPort,
    store: &VocabularyStore,
    options: &AgentOptions,
    system_prompt: &str,
    user_prompt: &str,
) -> Result<SelectionOutcome, AgentError> {
    let mut messages =
        vec![ChatMessage::system(system_prompt), ChatMessage::user(user_prompt.to_string())];
    let schemas = tool_schemas();
    let mut extra_candidates: Vec<Concept> = Vec::new();
    for _hop in 0..=options.tool_hop_limit {
        match llm.send(&messages, &schemas)? {
            LlmReply::Text(text) => {
                return Ok(SelectionOutcome { reply_text: text, extra_candidates });
            }
            LlmReply::ToolCall { name, arguments } => {
                let result_text = match name.as_str() {
                    "search_athena" => {
                        let keyword = arguments["keyword"].as_str().unwrap_or_default();
                        let mut filters = SearchFilters::default();
                        if let Some(domain) = arguments["domain"].as_str() {
                            filters.domain = Some(domain.to_string());
                        }
                        let candidates = store.search_concepts(keyword, &filters)?;
                        for concept in &candidates.candidates {
                            if !extra_candidates.iter().any(|c| c.concept_id == concept.concept_id)
                            {
                                extra_candidates.push(concept.clone());
                            }
                        }
                        serde_json::to_string(&candidates.candidates)
                            .expect("concepts serialize infallibly")
                    }
                    "get_concept_details" => {
                        let id = arguments["concept_id"].as_i64().unwrap_or(0);
                        match store.get_concept(id) {
                            Ok(Some(concept)) => {
                                if !extra_candidates
                                    .iter()
                                    .any(|c| c.concept_id == concept.concept_id)
                                {
                                    extra_candidates.push(concept.clone());
                                }
                                serde_json::to_string(&concept).expect("concept serializes")
                            }
                            Ok(None) | Err(GatewayError::InvalidId(_)) => "null".to_string(),
                            Err(other) => return Err(other.into()),
                        }
                    }
                    unknown => format!("{{\"error\": \"unknown tool {unknown}\"}}"),
                };
                messages
                    .push(ChatMessage::assistant(format!("(called tool {name} with {arguments})")));
                messages.push(ChatMessage::user(format!(
                    "Tool {name} returned: {result_text}\nNow reply with the JSON mapping \
                     object, or exactly NO_MATCH."
                )));
            }
        }
    }
    Err(AgentError::Llm(LlmError::Unavailable(format!(
        "model exceeded {} tool calls without answering",
        options.tool_hop_limit
    ))))
}

/// Maps one source term end to end. `Ok(Failed)` is a mapping verdict;
/// `Err` is an infrastructure problem (model or upstream unreachable).
pub fn map_term(
    request: &MappingRequest,
    llm: &dyn LlmPort,
    store: &VocabularyStore,
    options: &AgentOptions,
) -> Result<MapOutcome, AgentError> {
    request.validate()?;
    let started = Instant::now();
    let profile = request.effective_profile();
    let resources = default_resource_texts();
    let system_prompt = build_system_prompt(&profile, &resources);

    if !options.tool_access {
        return ablation_map(request, llm, store, &system_prompt, started);
    }

    let mut failure_note: Option<String> = None;
    let mut keyword: Option<String> = None;
    let mut attempts = 0u32;
    while attempts < options.max_attempts {
        attempts += 1;

        let current_keyword = match &keyword {
            Some(existing) => existing.clone(),
            None => match infer_keyword_inner(request, llm, failure_note.as_deref()) {
                Ok(inferred) => {
                    keyword = Some(inferred.clone());
                    inferred
                }
                Err(AgentError::EmptyInference) => {
                    failure_note = Some("the model returned an empty keyword".into());
                    continue;
                }
                Err(other) => return Err(other),
            },
        };

        let filters = SearchFilters {
            domain: profile.target_domain.clone(),
            page_size: options.candidate_limit.clamp(1, 100) as u32,
            ..SearchFilters::default()
        };
        let mut found = store.search_concepts(&current_keyword, &filters)?;
        if found.candidates.is_empty() && request.source_term.trim() != current_keyword {
            found = store.search_concepts(request.source_term.trim(), &filters)?;
        }
        if found.candidates.is_empty() {
            failure_note = Some(format!(
                "no candidates found for keyword {current_keyword:?} or the raw term"
            ));
            keyword = None;
            continue;
        }

        let ranked = rank_candidates(&found.candidates, &profile, &current_keyword);
        let presented: Vec<Concept> =
            ranked.into_iter().take(options.candidate_limit.max(1)).collect();

        let mut user_prompt =
            format!("Source term: {}\nInferred keyword: {current_keyword}\n", request.source_term);
        if let Some(context) = &request.context {
            user_prompt.push_str(&format!("Clinical context: {context}\n"));
        }
        user_prompt.push_str("Candidates:\n");
        user_prompt.push_str(&render_candidates(&presented));
        user_prompt.push_str(
            "\nSelect the best candidate and reply with the JSON mapping object only. \
             If none is appropriate, reply with exactly NO_MATCH.\n",
        );
        if let Some(note) = &failure_note {
            user_prompt.push_str(&format!(
                "\nPrevious attempt failed: {note}\nCorrect the problem and answer again.\n"
            ));
        }

        let selection = selection_round(llm, store, options, &system_prompt, &user_prompt)?;
        let mut considered = presented.clone();
        for concept in selection.extra_candidates {
            if !considered.iter().any(|c| c.concept_id == concept.concept_id) {
                considered.push(concept);
            }
        }

        let proposal = match parse_mapping_output(&selection.reply_text) {
            Ok(proposal) => proposal,
            Err(parse_error) => {
                if selection.reply_text.contains(REFUSAL_TOKEN) {
                    return Ok(MapOutcome::Failed(RetrievalFailure {
                        term: request.source_term.clone(),
                        kind: FailureKind::NoMappingFound,
                        detail: "the model declined to map this term".into(),
                        attempts,
                        elapsed_seconds: started.elapsed().as_secs_f64(),
                    }));
                }
                failure_note = Some(format!("the reply could not be parsed: {parse_error}"));
                continue;
            }
        };

        if !considered.iter().any(|c| c.concept_id == proposal.concept_id) {
            failure_note = Some(format!(
                "concept {} was not among the retrieved candidates; choose from the \
                 candidate list only",
                proposal.concept_id.get()
            ));
            continue;
        }

        match verify_mapping(&proposal, store)? {
            Verdict::Verified(verified) => {
                debug_assert!(considered
                    .iter()
                    .any(|c| c.concept_id == verified.concept.concept_id));
                return Ok(MapOutcome::Mapped(AuditedMapping {
                    request: request.clone(),
                    verified,
                    candidates_considered: considered,
                    attempts,
                    elapsed_seconds: started.elapsed().as_secs_f64(),
                }));
            }
            Verdict::Rejected(rejection) => {
                failure_note = Some(rejection.detail);
                continue;
            }
        }
    }

    Ok(MapOutcome::Failed(RetrievalFailure {
        term: request.source_term.clone(),
        kind: FailureKind::NoMappingFound,
        detail: failure_note.unwrap_or_else(|| "all mapping attempts were exhausted".into()),
        attempts,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    }))
}

/// Ungrounded baseline: one memory-only answer, classified by the guard.
fn ablation_map(
    request: &MappingRequest,
    llm: &dyn LlmPort,
    store: &VocabularyStore,
    system_prompt: &str,
    started: Instant,
) -> Result<MapOutcome, AgentError> {
    let mut user_prompt = format!(
        "Source term: {}\nYou have no search tool for this request. Map the term from \
         memory: reply with the JSON mapping object only, or exactly NO_MATCH.\n",
        request.source_term
    );
    if let Some(context) = &request.context {
        user_prompt.push_str(&format!("Clinical context: {context}\n"));
    }
    let reply =
        llm.send(&[ChatMessage::system(system_prompt), ChatMessage::user(user_prompt)], &[])?;
    let text = match reply {
        LlmReply::Text(text) => text,
        LlmReply::ToolCall { name, .. } => {
            return Ok(MapOutcome::Failed(RetrievalFailure {
                term: request.source_term.clone(),
                kind: FailureKind::NoMappingFound,
                detail: format!("tool access is disabled but the model called {name}"),
                attempts: 1,
                elapsed_seconds: started.elapsed().as_secs_f64(),
            }));
        }
    };
    let failed = |kind: FailureKind, detail: String| {
        Ok(MapOutcome::Failed(RetrievalFailure {
            term: request.source_term.clone(),
            kind,
            detail,
            attempts: 1,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        }))
    };
    let proposal = match parse_mapping_output(&text) {
        Ok(proposal) => proposal,
        Err(parse_error) => {
            let detail = if text.contains(REFUSAL_TOKEN) {
                "the model declined to map this term".to_string()
            } else {
                format!("the reply could not be parsed: {parse_error}")
            };
            return failed(FailureKind::NoMappingFound, detail);
        }
    };
    match verify_mapping(&proposal, store)? {
        Verdict::Verified(verified) => Ok(MapOutcome::Mapped(AuditedMapping {
            request: request.clone(),
            verified,
            candidates_considered: Vec::new(),
            attempts: 1,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        })),
        Verdict::Rejected(rejection) => failed(rejection.kind, rejection.detail),
    }
}

/// Maps a batch with up to `parallelism` concurrent workers. Output order
/// equals input order; per-item failures never abort the batch.
pub fn map_batch(
    requests: &[MappingRequest],
    llm: &dyn LlmPort,
    store: &VocabularyStore,
    options: &AgentOptions,
    parallelism: usize,
) -> Vec<(MappingRequest, Result<MapOutcome, AgentError>)> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = parallelism.max(1).min(requests.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<MapOutcome, AgentError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= requests.len() {
                    break;
                }
                let outcome = map_term(&requests[index], llm, store, options);
                *slots[index].lock().expect("result slot") = Some(outcome);
            });
        }
    });

    requests
        .iter()
        .cloned()
        .zip(
            slots.into_iter().map(|slot| {
                slot.into_inner().expect("result slot").expect("every request processed")
            }),
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::athena::FixtureIndex;
    use crate::vocabulary::{ConceptId, StandardKind, Validity};
    use proptest::prelude::*;

    fn concept(id: i64, name: &str) -> Concept {
        Concept {
            concept_id: ConceptId::new(id).unwrap(),
            concept_name: name.to_string(),
            domain_id: "Condition".to_string(),
            vocabulary_id: "SNOMED".to_string(),
            concept_class: "Clinical Finding".to_string(),
            standard: StandardKind::Standard,
            validity: Validity::Valid,
        }
    }

    fn figure_store() -> VocabularyStore {
        VocabularyStore::fixture(
            FixtureIndex::from_concepts(vec![
                concept(77670, "Chest pain"),
                concept(4153877, "Chest pain on breathing"),
                concept(320136, "Pain"),
            ])
            .unwrap(),
        )
    }

    fn selection_json(id: i64, name: &str) -> String {
        format!(
            "{{\"concept_id\": {id}, \"concept_name\": \"{name}\", \
             \"domain_id\": \"Condition\", \"class\": \"Clinical Finding\", \
             \"validity\": \"V\", \"domain\": \"Condition\", \
             \"vocabulary\": \"SNOMED\", \
             \"concept_url\": \"https://athena.ohdsi.org/search-terms/terms/{id}\", \
             \"reasoning\": \"best candidate for the keyword\", \
             \"inferred_keyword\": \"chest pain\"}}"
        )
    }

    fn text(s: &str) -> LlmReply {
        LlmReply::Text(s.to_string())
    }

    #[test]
    fn system_prompt_sections_appear_in_order() {
        let profile = PreferenceProfile::for_domain("Measurement")
            .with_override("prioritize LOINC for laboratory values");
        let resources = vec!["RESOURCE ALPHA TEXT".to_string(), "RESOURCE BETA TEXT".to_string()];
        let prompt = build_system_prompt(&profile, &resources);

        let markers = [
            "Procedure:",
            "not allowed to invent concept IDs",
            "\"concept_id\"",
            "Vocabulary preferences:",
            "prioritize LOINC for laboratory values",
            "Reasoning requirements:",
            "RESOURCE ALPHA TEXT",
            "RESOURCE BETA TEXT",
        ];
        let mut last = 0usize;
        for marker in markers {
            let at = prompt[last..]
                .find(marker)
                .unwrap_or_else(|| panic!("{marker:?} missing or out of order\n{prompt}"));
            last += at + marker.len();
        }
    }

    #[test]
    fn system_prompt_complete_without_resources() {
        let prompt = build_system_prompt(&PreferenceProfile::default(), &[]);
        assert!(prompt.contains("\"concept_id\""));
        assert!(prompt.contains("not allowed to invent concept IDs"));
        assert!(prompt.contains(REFUSAL_TOKEN));
        assert!(!prompt.contains("Reference material"));
        // Every canonical output field is named in the schema section.
        for field in [
            "concept_name",
            "domain_id",
            "class",
            "validity",
            "domain",
            "vocabulary",
            "concept_url",
            "reasoning",
            "inferred_keyword",
        ] {
            assert!(prompt.contains(&format!("\"{field}\"")), "missing {field}");
        }
    }

    #[test]
    fn keyword_inference_expands_abbreviations() {
        let mock = ScriptedMock::new(vec![("Source term: CP", text("chest pain"))]);
        let mut request = MappingRequest::new("CP");
        request.target_table = Some("condition_occurrence".into());
        assert_eq!(infer_keyword(&request, &mock).unwrap(), "chest pain");
        assert_eq!(mock.remaining(), 0);
    }

    #[test]
    fn keyword_inference_passes_identity_through() {
        let mock = ScriptedMock::new(vec![("chest pain", text("\"chest pain\"\n"))]);
        let request = MappingRequest::new("chest pain");
        assert_eq!(infer_keyword(&request, &mock).unwrap(), "chest pain");
    }

    #[test]
    fn blank_terms_are_rejected_before_any_model_call() {
        let mock = ScriptedMock::new(Vec::<(&str, LlmReply)>::new());
        let err = infer_keyword(&MappingRequest::new("   "), &mock).unwrap_err();
        assert!(matches!(err, AgentError::InvalidRequest(_)));
        assert_eq!(mock.remaining(), 0);

        let store = figure_store();
        let err = map_term(&MappingRequest::new(""), &mock, &store, &AgentOptions::default())
            .unwrap_err();
        assert!(matches!(err, AgentError::InvalidRequest(_)));
    }

    #[test]
    fn cp_maps_to_chest_pain_in_one_attempt() {
        let store = figure_store();
        let mock = ScriptedMock::new(vec![
            ("Source term: CP", text("chest pain")),
            ("Candidates:", text(&selection_json(77670, "Chest pain"))),
        ]);
        let mut request = MappingRequest::new("CP");
        request.target_table = Some("condition_occurrence".into());
        request.context = Some("emergency department triage note".into());

        let outcome = map_term(&request, &mock, &store, &AgentOptions::default()).unwrap();
        let MapOutcome::Mapped(mapping) = outcome else {
            panic!("expected a mapping, got {outcome:?}");
        };
        assert_eq!(mapping.verified.concept.concept_id.get(), 77670);
        assert_eq!(mapping.attempts, 1);
        assert!(mapping
            .candidates_considered
            .iter()
            .any(|c| c.concept_id == mapping.verified.concept.concept_id));
        assert_eq!(mapping.verified.result.inferred_keyword, "chest pain");
        assert!(mapping.elapsed_seconds >= 0.0);
        assert_eq!(mock.remaining(), 0);
    }

    #[test]
    fn fabricated_id_triggers_a_guarded_retry() {
        let store = figure_store();
        let mock = ScriptedMock::new(vec![
            ("Source term: CP", text("chest pain")),
            ("Candidates:", text(&selection_json(424242424, "Chest pain"))),
            ("Previous attempt failed", text(&selection_json(77670, "Chest pain"))),
        ]);
        let request = MappingRequest::new("CP");
        let outcome = map_term(&request, &mock, &store, &AgentOptions::default()).unwrap();
        let MapOutcome::Mapped(mapping) = outcome else {
            panic!("expected recovery, got {outcome:?}");
        };
        assert_eq!(mapping.verified.concept.concept_id.get(), 77670);
        assert_eq!(mapping.attempts, 2);
        assert_eq!(mock.remaining(), 0);
    }

    #[test]
    fn refusal_token_maps_to_no_mapping_found() {
        let store = figure_store();
        let mock = ScriptedMock::new(vec![
            ("Source term: pain", text("pain")),
            ("Candidates:", text("NO_MATCH")),
        ]);
        let outcome =
            map_term(&MappingRequest::new("pain"), &mock, &store, &AgentOptions::default())
                .unwrap();
        let MapOutcome::Failed(failure) = outcome else {
            panic!("expected refusal, got {outcome:?}");
        };
        assert_eq!(failure.kind, FailureKind::NoMappingFound);
        assert_eq!(failure.attempts, 1);
    }

    #[test]
    fn unsearchable_term_exhausts_attempts_into_no_mapping_found() {
        let store = figure_store();
        // Inference re-runs every attempt because the search keeps coming
        // back empty.
        let mock = ScriptedMock::new(vec![
            ("Source term: qqqqzzzz", text("qqqqzzzz")),
            ("Source term: qqqqzzzz", text("qqqqzzzz")),
            ("Source term: qqqqzzzz", text("qqqqzzzz")),
        ]);
        let outcome =
            map_term(&MappingRequest::new("qqqqzzzz"), &mock, &store, &AgentOptions::default())
                .unwrap();
        let MapOutcome::Failed(failure) = outcome else {
            panic!("expected exhaustion, got {outcome:?}");
        };
        assert_eq!(failure.kind, FailureKind::NoMappingFound);
        assert_eq!(failure.attempts, 3);
        assert!(failure.detail.contains("no candidates"));
        assert_eq!(mock.remaining(), 0);
    }

    #[test]
    fn empty_search_falls_back_to_the_raw_term() {
        let store = figure_store();
        // The inferred keyword misses, the raw source term hits.
        let mock = ScriptedMock::new(vec![
            ("Source term: Chest pain", text("thoracic discomfort syndrome zzz")),
            ("Candidates:", text(&selection_json(77670, "Chest pain"))),
        ]);
        let outcome =
            map_term(&MappingRequest::new("Chest pain"), &mock, &store, &AgentOptions::default())
                .unwrap();
        let MapOutcome::Mapped(mapping) = outcome else {
            panic!("expected fallback success, got {outcome:?}");
        };
        assert_eq!(mapping.attempts, 1);
        assert_eq!(mapping.verified.concept.concept_id.get(), 77670);
    }

    #[test]
    fn real_but_unretrieved_concepts_are_rejected() {
        // 312437 ("Dyspnea") exists in the store but shares no token with
        // "chest pain", so it is never retrieved for that keyword; selecting
        // it must fail grounding even though the guard alone would verify it.
        let store = VocabularyStore::fixture(
            FixtureIndex::from_concepts(vec![
                concept(77670, "Chest pain"),
                concept(312437, "Dyspnea"),
            ])
            .unwrap(),
        );
        let options = AgentOptions { max_attempts: 2, ..AgentOptions::default() };
        let mock = ScriptedMock::new(vec![
            ("Source term: CP", text("chest pain")),
            ("Candidates:", text(&selection_json(312437, "Dyspnea"))),
            ("not among the retrieved candidates", text(&selection_json(77670, "Chest pain"))),
        ]);
        let outcome = map_term(&MappingRequest::new("CP"), &mock, &store, &options).unwrap();
        let MapOutcome::Mapped(mapping) = outcome else {
            panic!("expected recovery, got {outcome:?}");
        };
        assert_eq!(mapping.verified.concept.concept_id.get(), 77670);
        assert_eq!(mapping.attempts, 2);
    }

    #[test]
    fn model_tool_calls_widen_the_candidate_set() {
        let store = figure_store();
        let mock = ScriptedMock::new(vec![
            ("Source term: generalized pain", text("generalized pain")),
            (
                "Candidates:",
                LlmReply::ToolCall {
                    name: "search_athena".into(),
                    arguments: serde_json::json!({"keyword": "pain"}),
                },
            ),
            ("Tool search_athena returned:", text(&selection_json(320136, "Pain"))),
        ]);
        // "generalized pain" token-overlaps "Pain" and the two chest-pain
        // concepts, so the first search is non-empty; the model then asks for
        // a broader search and selects from its results.
        let outcome = map_term(
            &MappingRequest::new("generalized pain"),
            &mock,
            &store,
            &AgentOptions::default(),
        )
        .unwrap();
        let MapOutcome::Mapped(mapping) = outcome else {
            panic!("expected tool-call mapping, got {outcome:?}");
        };
        assert_eq!(mapping.verified.concept.concept_id.get(), 320136);
        assert_eq!(mock.remaining(), 0);
    }

    #[test]
    fn ablation_classifies_memory_answers_with_the_guard() {
        let store = figure_store();
        let options = AgentOptions { tool_access: false, ..AgentOptions::default() };

        let fabricated = ScriptedMock::new(vec![(
            "no search tool",
            text(&selection_json(424242424, "Chest pain")),
        )]);
        let outcome = map_term(&MappingRequest::new("CP"), &fabricated, &store, &options).unwrap();
        let MapOutcome::Failed(failure) = outcome else {
            panic!("fabricated id must fail, got {outcome:?}");
        };
        assert_eq!(failure.kind, FailureKind::NonExistentConceptId);
        assert_eq!(failure.attempts, 1);

        let misnamed = ScriptedMock::new(vec![(
            "no search tool",
            text(&selection_json(77670, "Angina pectoris")),
        )]);
        let outcome = map_term(&MappingRequest::new("CP"), &misnamed, &store, &options).unwrap();
        let MapOutcome::Failed(failure) = outcome else {
            panic!("wrong name must fail, got {outcome:?}");
        };
        assert_eq!(failure.kind, FailureKind::ConceptIdNameMismatch);

        let lucky =
            ScriptedMock::new(vec![("no search tool", text(&selection_json(77670, "Chest pain")))]);
        let outcome = map_term(&MappingRequest::new("CP"), &lucky, &store, &options).unwrap();
        let MapOutcome::Mapped(mapping) = outcome else {
            panic!("a memorized answer that authenticates is a success");
        };
        assert!(mapping.candidates_considered.is_empty());
    }

    #[test]
    fn attempt_count_never_exceeds_the_bound() {
        let store = figure_store();
        for max_attempts in 1..=4u32 {
            let options = AgentOptions { max_attempts, ..AgentOptions::default() };
            let steps: Vec<(String, LlmReply)> =
                std::iter::once(("Source term: CP".to_string(), text("chest pain")))
                    .chain((0..max_attempts).map(|_| {
                        // Every selection fabricates the same unverifiable id.
                        ("chest pain".to_string(), text(&selection_json(424242424, "Chest pain")))
                    }))
                    .collect();
            let mock = ScriptedMock::new(steps);
            let outcome = map_term(&MappingRequest::new("CP"), &mock, &store, &options).unwrap();
            let MapOutcome::Failed(failure) = outcome else {
                panic!("expected exhaustion at bound {max_attempts}");
            };
            assert_eq!(failure.attempts, max_attempts);
            assert_eq!(failure.kind, FailureKind::NoMappingFound);
        }
    }

    #[test]
    fn options_from_env_round_trip() {
        std::env::remove_var(ENV_MAX_ATTEMPTS);
        assert_eq!(AgentOptions::from_env().unwrap().max_attempts, 3);
        std::env::set_var(ENV_MAX_ATTEMPTS, "5");
        assert_eq!(AgentOptions::from_env().unwrap().max_attempts, 5);
        std::env::set_var(ENV_MAX_ATTEMPTS, "zero");
        assert!(matches!(AgentOptions::from_env(), Err(AgentError::Config(_))));
        std::env::set_var(ENV_MAX_ATTEMPTS, "0");
        assert!(matches!(AgentOptions::from_env(), Err(AgentError::Config(_))));
        std::env::remove_var(ENV_MAX_ATTEMPTS);
    }

    fn batch_fixture(count: usize) -> (Vec<MappingRequest>, Vec<Concept>) {
        let concepts: Vec<Concept> =
            (0..count).map(|i| concept(1000 + i as i64, &format!("Finding number {i}"))).collect();
        let requests: Vec<MappingRequest> =
            (0..count).map(|i| MappingRequest::new(format!("finding number {i}"))).collect();
        (requests, concepts)
    }

    fn batch_mock(count: usize) -> ScriptedMock {
        let mut steps: Vec<(String, LlmReply)> = Vec::new();
        for i in 0..count {
            steps.push((
                format!("Source term: finding number {i}\n"),
                text(&format!("finding number {i}")),
            ));
            steps.push((
                format!("Inferred keyword: finding number {i}\n"),
                text(&selection_json(1000 + i as i64, &format!("Finding number {i}"))),
            ));
        }
        ScriptedMock::new(steps)
    }

    #[test]
    fn batches_preserve_order_at_any_parallelism() {
        let (requests, concepts) = batch_fixture(12);
        let store = VocabularyStore::fixture(FixtureIndex::from_concepts(concepts).unwrap());
        let options = AgentOptions::default();

        let summarize =
            |results: &[(MappingRequest, Result<MapOutcome, AgentError>)]| -> Vec<(String, i64)> {
                results
                    .iter()
                    .map(|(request, outcome)| {
                        let id = match outcome {
                            Ok(MapOutcome::Mapped(m)) => m.verified.concept.concept_id.get(),
                            other => {
                                panic!("unexpected outcome for {}: {other:?}", request.source_term)
                            }
                        };
                        (request.source_term.clone(), id)
                    })
                    .collect()
            };

        let serial_mock = batch_mock(12);
        let serial = map_batch(&requests, &serial_mock, &store, &options, 1);
        assert_eq!(serial_mock.remaining(), 0);

        let parallel_mock = batch_mock(12);
        let parallel = map_batch(&requests, &parallel_mock, &store, &options, 4);
        assert_eq!(parallel_mock.remaining(), 0);

        let expected: Vec<(String, i64)> =
            (0..12).map(|i| (format!("finding number {i}"), 1000 + i as i64)).collect();
        assert_eq!(summarize(&serial), expected);
        assert_eq!(summarize(&parallel), expected);
    }

    #[test]
    fn batch_records_failures_without_aborting() {
        let (mut requests, concepts) = batch_fixture(3);
        requests[1] = MappingRequest::new("   ");
        let store = VocabularyStore::fixture(FixtureIndex::from_concepts(concepts).unwrap());
        let mut steps: Vec<(String, LlmReply)> = Vec::new();
        for i in [0usize, 2] {
            steps.push((
                format!("Source term: finding number {i}\n"),
                text(&format!("finding number {i}")),
            ));
            steps.push((
                format!("Inferred keyword: finding number {i}\n"),
                text(&selection_json(1000 + i as i64, &format!("Finding number {i}"))),
            ));
        }
        let mock = ScriptedMock::new(steps);
        let results = map_batch(&requests, &mock, &store, &AgentOptions::default(), 2);
        assert_eq!(results.len(), 3);
        assert!(matches!(results[0].1, Ok(MapOutcome::Mapped(_))));
        assert!(matches!(results[1].1, Err(AgentError::InvalidRequest(_))));
        assert!(matches!(results[2].1, Ok(MapOutcome::Mapped(_))));
    }

    #[test]
    fn empty_batch_is_empty() {
        let store = figure_store();
        let mock = ScriptedMock::new(Vec::<(&str, LlmReply)>::new());
        assert!(map_batch(&[], &mock, &store, &AgentOptions::default(), 4).is_empty());
    }

    proptest! {
        /// Grounding invariant: selections outside the candidate list are
        /// never emitted, whether or not the id denotes a real concept.
        #[test]
        fn out_of_candidate_selections_never_map(bogus_id in 1i64..1_000_000) {
            let store = figure_store();
            // "chest pain" retrieves 77670, 4153877, and (by token overlap)
            // 320136; everything else is out-of-candidate.
            prop_assume!(bogus_id != 77670 && bogus_id != 4153877 && bogus_id != 320136);
            let options = AgentOptions { max_attempts: 2, ..AgentOptions::default() };
            let mock = ScriptedMock::new(vec![
                ("Source term: CP".to_string(), text("chest pain")),
                ("Candidates:".to_string(), text(&selection_json(bogus_id, "Chest pain"))),
                ("Previous attempt failed".to_string(), text(&selection_json(bogus_id, "Chest pain"))),
            ]);
            let outcome = map_term(&MappingRequest::new("CP"), &mock, &store, &options).unwrap();
            match outcome {
                MapOutcome::Failed(failure) => {
                    prop_assert_eq!(failure.kind, FailureKind::NoMappingFound);
                    prop_assert_eq!(failure.attempts, 2);
                }
                MapOutcome::Mapped(mapping) => {
                    prop_assert!(
                        false,
                        "emitted {} despite it not being a candidate",
                        mapping.verified.concept.concept_id.get()
                    );
                }
            }
        }
    }
}
