//! Core vocabulary types: OMOP concepts, structured mapping output, and the
//! failure taxonomy shared by every other module.
//!
//! The JSON field names of [`MappingResult`] are a wire contract consumed by
//! downstream tooling; do not rename them.

use serde::{Deserialize, Serialize};
use std::fmt;

/// OMOP concept identifier. Always ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct ConceptId(i64);

impl ConceptId {
    pub fn new(id: i64) -> Result<Self, VocabularyError> {
        if id < 1 {
            return Err(VocabularyError::InvalidId(id));
        }
        Ok(ConceptId(id))
    }

    pub fn get(self) -> i64 {
        self.0
    }
}

impl TryFrom<i64> for ConceptId {
    type Error = VocabularyError;

    fn try_from(id: i64) -> Result<Self, Self::Error> {
        ConceptId::new(id)
    }
}

impl From<ConceptId> for i64 {
    fn from(id: ConceptId) -> i64 {
        id.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// OMOP standard-concept designation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StandardKind {
    Standard,
    NonStandard,
    Classification,
}

impl StandardKind {
    /// One-letter code used by the fixture file format ("S" | "N" | "C").
    pub fn code(self) -> &'static str {
        match self {
            StandardKind::Standard => "S",
            StandardKind::NonStandard => "N",
            StandardKind::Classification => "C",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "S" => Some(StandardKind::Standard),
            "N" => Some(StandardKind::NonStandard),
            "C" => Some(StandardKind::Classification),
            _ => None,
        }
    }
}

impl fmt::Display for StandardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self {
            StandardKind::Standard => "Standard",
            StandardKind::NonStandard => "Non-standard",
            StandardKind::Classification => "Classification",
        };
        f.write_str(label)
    }
}

impl Serialize for StandardKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for StandardKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        StandardKind::from_code(&code).ok_or_else(|| {
            serde::de::Error::custom(format!("unknown standard code {code:?}, expected S|N|C"))
        })
    }
}

/// Whether a concept is currently valid in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Validity {
    Valid,
    Invalid,
}

impl Validity {
    /// One-letter code used by the fixture file format ("V" | "I").
    pub fn code(self) -> &'static str {
        match self {
            Validity::Valid => "V",
            Validity::Invalid => "I",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "V" => Some(Validity::Valid),
            "I" => Some(Validity::Invalid),
            _ => None,
        }
    }
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Validity::Valid => "Valid",
            Validity::Invalid => "Invalid",
        })
    }
}

impl Serialize for Validity {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Validity {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = String::deserialize(deserializer)?;
        Validity::from_code(&code).ok_or_else(|| {
            serde::de::Error::custom(format!("unknown validity code {code:?}, expected V|I"))
        })
    }
}

/// One OMOP vocabulary entry: the unit of ground truth for verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub concept_id: ConceptId,
    pub concept_name: String,
    pub domain_id: String,
    pub vocabulary_id: String,
    pub concept_class: String,
    pub standard: StandardKind,
    pub validity: Validity,
}

impl Concept {
    /// Validates the non-id invariants: a concept name must survive trimming.
    pub fn validate(&self) -> Result<(), VocabularyError> {
        if self.concept_name.trim().is_empty() {
            return Err(VocabularyError::EmptyConceptName(self.concept_id));
        }
        Ok(())
    }
}

/// The model's structured answer, prior to verification.
///
/// Field names follow the mandated output schema exactly: `concept_id`,
/// `concept_name`, `domain_id`, `class`, `validity`, `domain`, `vocabulary`,
/// `concept_url`, `reasoning`, `inferred_keyword`. Both `domain_id` and
/// `domain` are carried (and populated identically from the vocabulary's
/// domain) to preserve the published schema verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingResult {
    pub concept_id: ConceptId,
    pub concept_name: String,
    pub domain_id: String,
    #[serde(rename = "class")]
    pub concept_class: String,
    pub validity: String,
    pub domain: String,
    pub vocabulary: String,
    pub concept_url: String,
    pub reasoning: String,
    #[serde(default)]
    pub inferred_keyword: String,
}

impl MappingResult {
    /// Builds the result an honest agent would emit for `concept`.
    pub fn from_concept(concept: &Concept, reasoning: &str, inferred_keyword: &str) -> Self {
        MappingResult {
            concept_id: concept.concept_id,
            concept_name: concept.concept_name.clone(),
            domain_id: concept.domain_id.clone(),
            concept_class: concept.concept_class.clone(),
            validity: concept.validity.to_string(),
            domain: concept.domain_id.clone(),
            vocabulary: concept.vocabulary_id.clone(),
            concept_url: concept.concept_id.url(DEFAULT_ATHENA_WEB_BASE),
            reasoning: reasoning.to_string(),
            inferred_keyword: inferred_keyword.to_string(),
        }
    }

    /// Canonical JSON serialization (field order fixed by the schema).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("MappingResult serializes infallibly")
    }
}

/// A page of search results from the vocabulary source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: String,
    pub candidates: Vec<Concept>,
    pub total_available: u64,
    pub page: u32,
    pub page_size: u32,
}

/// The three ways a mapping attempt can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureKind {
    /// No appropriate mapping could be identified for the term.
    NoMappingFound,
    /// The produced concept ID does not exist in the vocabulary.
    NonExistentConceptId,
    /// The concept ID exists but its name does not match the produced name.
    ConceptIdNameMismatch,
}

impl FailureKind {
    pub const ALL: [FailureKind; 3] = [
        FailureKind::NoMappingFound,
        FailureKind::NonExistentConceptId,
        FailureKind::ConceptIdNameMismatch,
    ];

    /// Stable token used in CSV and JSONL outputs.
    pub fn token(self) -> &'static str {
        match self {
            FailureKind::NoMappingFound => "no_mapping_found",
            FailureKind::NonExistentConceptId => "non_existent_id",
            FailureKind::ConceptIdNameMismatch => "name_mismatch",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "no_mapping_found" => Some(FailureKind::NoMappingFound),
            "non_existent_id" => Some(FailureKind::NonExistentConceptId),
            "name_mismatch" => Some(FailureKind::ConceptIdNameMismatch),
            _ => None,
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Binary per-term verdict: a verified mapping, or one of the three
/// failure kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutcomeClass {
    Success,
    Failure(FailureKind),
}

impl OutcomeClass {
    pub fn is_success(self) -> bool {
        matches!(self, OutcomeClass::Success)
    }

    pub fn token(self) -> &'static str {
        match self {
            OutcomeClass::Success => "success",
            OutcomeClass::Failure(kind) => kind.token(),
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        if token == "success" {
            return Some(OutcomeClass::Success);
        }
        FailureKind::from_token(token).map(OutcomeClass::Failure)
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Errors from parsing the model's structured output.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("output is not a JSON object")]
    MalformedJson,
    #[error("required field {0:?} is missing or empty")]
    MissingField(String),
    #[error("concept_id is not a positive integer")]
    NonIntegerConceptId,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabularyError {
    #[error("concept id must be >= 1, got {0}")]
    InvalidId(i64),
    #[error("concept {0} has an empty name")]
    EmptyConceptName(ConceptId),
}

pub const DEFAULT_ATHENA_WEB_BASE: &str = "https://athena.ohdsi.org";

impl ConceptId {
    /// Concept browsing URL under the given web base.
    pub fn url(self, web_base: &str) -> String {
        format!("{}/search-terms/terms/{}", web_base.trim_end_matches('/'), self.0)
    }
}

/// Builds the concept browsing URL for a raw id, rejecting ids < 1.
pub fn concept_url(concept_id: i64) -> Result<String, VocabularyError> {
    concept_url_with_base(concept_id, DEFAULT_ATHENA_WEB_BASE)
}

pub fn concept_url_with_base(concept_id: i64, web_base: &str) -> Result<String, VocabularyError> {
    Ok(ConceptId::new(concept_id)?.url(web_base))
}

/// Canonical name form used for concept-name comparison: Unicode-lowercased,
/// trimmed, internal whitespace runs collapsed to single spaces.
pub fn normalize_name(name: &str) -> String {
    name.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses the model's final message into a [`MappingResult`].
///
/// Tolerates a fenced code block and surrounding prose; the first JSON object
/// found is parsed. Unknown extra fields are ignored. The nine schema fields
/// are required (`inferred_keyword` defaults to empty when absent).
pub fn parse_mapping_output(raw: &str) -> Result<MappingResult, ParseError> {
    let body = extract_json_object(raw).ok_or(ParseError::MalformedJson)?;
    let value: serde_json::Value =
        serde_json::from_str(&body).map_err(|_| ParseError::MalformedJson)?;
    let object = value.as_object().ok_or(ParseError::MalformedJson)?;

    let concept_id = match object.get("concept_id") {
        None | Some(serde_json::Value::Null) => {
            return Err(ParseError::MissingField("concept_id".into()))
        }
        Some(serde_json::Value::Number(n)) => {
            let id = n.as_i64().ok_or(ParseError::NonIntegerConceptId)?;
            ConceptId::new(id).map_err(|_| ParseError::NonIntegerConceptId)?
        }
        // Models occasionally quote the integer; accept the digit string.
        Some(serde_json::Value::String(s)) => {
            let id: i64 = s.trim().parse().map_err(|_| ParseError::NonIntegerConceptId)?;
            ConceptId::new(id).map_err(|_| ParseError::NonIntegerConceptId)?
        }
        Some(_) => return Err(ParseError::NonIntegerConceptId),
    };

    let text_field = |name: &str| -> Result<String, ParseError> {
        match object.get(name) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(serde_json::Value::Null) | None => Err(ParseError::MissingField(name.into())),
            Some(other) => Ok(other.to_string()),
        }
    };

    let result = MappingResult {
        concept_id,
        concept_name: text_field("concept_name")?,
        domain_id: text_field("domain_id")?,
        concept_class: text_field("class")?,
        validity: text_field("validity")?,
        domain: text_field("domain")?,
        vocabulary: text_field("vocabulary")?,
        concept_url: text_field("concept_url")?,
        reasoning: text_field("reasoning")?,
        inferred_keyword: text_field("inferred_keyword").unwrap_or_default(),
    };
    // Requirement (d): an answer without a rationale is not acceptable output.
    if result.reasoning.trim().is_empty() {
        return Err(ParseError::MissingField("reasoning".into()));
    }
    Ok(result)
}

/// Pulls the JSON object out of a chat reply: prefers a fenced block when one
/// is present, otherwise takes the outermost `{ … }` span.
fn extract_json_object(raw: &str) -> Option<String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return None;
    }
    if let Some(fenced) = extract_fenced_block(trimmed) {
        if let Some(obj) = brace_span(&fenced) {
            return Some(obj);
        }
    }
    brace_span(trimmed)
}

fn extract_fenced_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip an optional language tag on the opening fence line.
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].to_string())
}

fn brace_span(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end <= start {
        return None;
    }
    Some(text[start..=end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chest_pain_json() -> String {
        serde_json::json!({
            "concept_id": 77670,
            "concept_name": "Chest pain",
            "domain_id": "Condition",
            "class": "Clinical Finding",
            "validity": "Valid",
            "domain": "Condition",
            "vocabulary": "SNOMED",
            "concept_url": "https://athena.ohdsi.org/search-terms/terms/77670",
            "reasoning": "CP expands to chest pain in a cardiology context.",
            "inferred_keyword": "chest pain"
        })
        .to_string()
    }

    #[test]
    fn parses_complete_output() {
        let result = parse_mapping_output(&chest_pain_json()).unwrap();
        assert_eq!(result.concept_id.get(), 77670);
        assert_eq!(result.concept_name, "Chest pain");
        assert_eq!(result.inferred_keyword, "chest pain");
    }

    #[test]
    fn parses_fenced_output_with_prose() {
        let raw = format!(
            "Here is the selected concept:\n```json\n{}\n```\nLet me know if you need another.",
            chest_pain_json()
        );
        let result = parse_mapping_output(&raw).unwrap();
        assert_eq!(result.concept_id.get(), 77670);
    }

    #[test]
    fn empty_input_is_malformed() {
        assert_eq!(parse_mapping_output(""), Err(ParseError::MalformedJson));
    }

    #[test]
    fn missing_reasoning_is_reported_by_name() {
        let mut value: serde_json::Value = serde_json::from_str(&chest_pain_json()).unwrap();
        value.as_object_mut().unwrap().remove("reasoning");
        assert_eq!(
            parse_mapping_output(&value.to_string()),
            Err(ParseError::MissingField("reasoning".into()))
        );
    }

    #[test]
    fn blank_reasoning_is_as_bad_as_missing() {
        let mut value: serde_json::Value = serde_json::from_str(&chest_pain_json()).unwrap();
        value["reasoning"] = serde_json::Value::String("   ".into());
        assert_eq!(
            parse_mapping_output(&value.to_string()),
            Err(ParseError::MissingField("reasoning".into()))
        );
    }

    #[test]
    fn non_integer_concept_id_is_rejected() {
        let mut value: serde_json::Value = serde_json::from_str(&chest_pain_json()).unwrap();
        value["concept_id"] = serde_json::Value::String("abc".into());
        assert_eq!(parse_mapping_output(&value.to_string()), Err(ParseError::NonIntegerConceptId));
        value["concept_id"] = serde_json::json!(0);
        assert_eq!(parse_mapping_output(&value.to_string()), Err(ParseError::NonIntegerConceptId));
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let mut value: serde_json::Value = serde_json::from_str(&chest_pain_json()).unwrap();
        value["confidence"] = serde_json::json!(0.97);
        assert!(parse_mapping_output(&value.to_string()).is_ok());
    }

    #[test]
    fn parse_serialize_round_trip() {
        let original = parse_mapping_output(&chest_pain_json()).unwrap();
        let reparsed = parse_mapping_output(&original.to_json()).unwrap();
        assert_eq!(original, reparsed);
    }

    #[test]
    fn canonical_field_names_are_exact() {
        let json = parse_mapping_output(&chest_pain_json()).unwrap().to_json();
        let expected = [
            "concept_id",
            "concept_name",
            "domain_id",
            "class",
            "validity",
            "domain",
            "vocabulary",
            "concept_url",
            "reasoning",
            "inferred_keyword",
        ];

        // The exact key set, via a parse that ignores ordering.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut sorted = expected;
        sorted.sort_unstable();
        assert_eq!(keys, sorted);

        // The exact key order, via positions in the serialized text. Safe
        // because no value in the fixture embeds a `"key":` pattern.
        let positions: Vec<usize> = expected
            .iter()
            .map(|key| json.find(&format!("\"{key}\":")).unwrap_or_else(|| panic!("{key} missing")))
            .collect();
        assert!(positions.windows(2).all(|pair| pair[0] < pair[1]), "keys out of order in {json}");
    }

    #[test]
    fn concept_url_examples() {
        assert_eq!(
            concept_url(77670).unwrap(),
            "https://athena.ohdsi.org/search-terms/terms/77670"
        );
        assert_eq!(concept_url(1).unwrap(), "https://athena.ohdsi.org/search-terms/terms/1");
        assert_eq!(concept_url(0), Err(VocabularyError::InvalidId(0)));
    }

    #[test]
    fn normalize_name_examples() {
        assert_eq!(normalize_name("  Chest   Pain "), "chest pain");
        assert_eq!(normalize_name("chest pain"), "chest pain");
        assert_eq!(normalize_name(""), "");
    }

    #[test]
    fn failure_kind_tokens_round_trip() {
        for kind in FailureKind::ALL {
            assert_eq!(FailureKind::from_token(kind.token()), Some(kind));
        }
        assert_eq!(FailureKind::from_token("bogus"), None);
    }

    #[test]
    fn concept_fixture_codes_round_trip() {
        let concept = Concept {
            concept_id: ConceptId::new(77670).unwrap(),
            concept_name: "Chest pain".into(),
            domain_id: "Condition".into(),
            vocabulary_id: "SNOMED".into(),
            concept_class: "Clinical Finding".into(),
            standard: StandardKind::Standard,
            validity: Validity::Valid,
        };
        let line = serde_json::to_string(&concept).unwrap();
        assert!(line.contains("\"standard\":\"S\""));
        assert!(line.contains("\"validity\":\"V\""));
        let back: Concept = serde_json::from_str(&line).unwrap();
        assert_eq!(back, concept);
    }
}
