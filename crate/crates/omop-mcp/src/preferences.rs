//! Vocabulary preferences and candidate ranking.
//!
//! Mapping targets standard OMOP concepts, and each clinical domain has a
//! conventional source vocabulary: SNOMED for conditions, RxNorm (then
//! RxNorm Extension) for drugs, LOINC for measurements, SNOMED then CPT4 for
//! procedures. A user override ("prioritize LOINC for laboratory values")
//! outranks the domain default; the override text itself is kept verbatim so
//! prompts can quote it unchanged.
//!
//! Ranking is a total order: standardness, then validity, then vocabulary
//! preference, then exact name match, then ascending concept id. The final id
//! tiebreak makes ranking deterministic and independent of input order.

use crate::vocabulary::{normalize_name, Concept, StandardKind, Validity};
use serde::{Deserialize, Serialize};

/// Preferred vocabularies per domain, in priority order.
pub const DOMAIN_VOCABULARY_DEFAULTS: &[(&str, &[&str])] = &[
    ("Condition", &["SNOMED"]),
    ("Drug", &["RxNorm", "RxNorm Extension"]),
    ("Measurement", &["LOINC"]),
    ("Procedure", &["SNOMED", "CPT4"]),
];

/// Vocabulary names recognized inside free-text overrides. Longer aliases are
/// matched first so "RxNorm Extension" is not mistaken for "RxNorm", nor
/// "ICD10CM" for "ICD10".
const KNOWN_VOCABULARIES: &[&str] = &[
    "RxNorm Extension",
    "ICD10CM",
    "ICD9CM",
    "SNOMED",
    "RxNorm",
    "LOINC",
    "ICD10",
    "CPT4",
    "HCPCS",
    "UCUM",
    "ATC",
    "NDC",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    /// Rank standard concepts above classification, above non-standard.
    pub prefer_standard: bool,
    /// Rank valid concepts above invalidated ones.
    pub prefer_valid: bool,
    /// Domain whose default vocabularies apply, when known.
    pub target_domain: Option<String>,
    /// Free-text override, preserved verbatim for prompt construction.
    pub user_override: Option<String>,
    /// Vocabularies parsed out of the override, in order of appearance.
    pub override_vocabularies: Vec<String>,
}

impl Default for PreferenceProfile {
    fn default() -> Self {
        PreferenceProfile {
            prefer_standard: true,
            prefer_valid: true,
            target_domain: None,
            user_override: None,
            override_vocabularies: Vec::new(),
        }
    }
}

impl PreferenceProfile {
    pub fn for_domain(domain: impl Into<String>) -> Self {
        PreferenceProfile { target_domain: Some(domain.into()), ..Default::default() }
    }

    pub fn with_override(mut self, override_text: impl Into<String>) -> Self {
        let text = override_text.into();
        self.override_vocabularies = parse_override_vocabularies(&text);
        self.user_override = Some(text);
        self
    }

    /// Effective vocabulary priority: override mentions first, then domain
    /// defaults, first occurrence winning on duplicates.
    pub fn effective_vocabularies(&self) -> Vec<String> {
        let mut ordered: Vec<String> = Vec::new();
        let push_unique = |name: &str, ordered: &mut Vec<String>| {
            if !ordered.iter().any(|v| v.eq_ignore_ascii_case(name)) {
                ordered.push(name.to_string());
            }
        };
        for name in &self.override_vocabularies {
            push_unique(name, &mut ordered);
        }
        if let Some(domain) = &self.target_domain {
            for (candidate, defaults) in DOMAIN_VOCABULARY_DEFAULTS {
                if candidate.eq_ignore_ascii_case(domain) {
                    for name in *defaults {
                        push_unique(name, &mut ordered);
                    }
                }
            }
        }
        ordered
    }

    fn vocabulary_rank(&self, concept: &Concept, effective: &[String]) -> usize {
        effective
            .iter()
            .position(|v| v.eq_ignore_ascii_case(&concept.vocabulary_id))
            .unwrap_or(effective.len())
    }

    fn sort_key(&self, concept: &Concept, effective: &[String], query_norm: &str) -> RankKey {
        let standard = if self.prefer_standard {
            match concept.standard {
                StandardKind::Standard => 0,
                StandardKind::Classification => 1,
                StandardKind::NonStandard => 2,
            }
        } else {
            0
        };
        let valid = match (self.prefer_valid, concept.validity) {
            (true, Validity::Invalid) => 1,
            _ => 0,
        };
        RankKey {
            standard,
            valid,
            vocabulary: self.vocabulary_rank(concept, effective),
            name_mismatch: u8::from(normalize_name(&concept.concept_name) != query_norm),
            concept_id: concept.concept_id.get(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RankKey {
    standard: u8,
    valid: u8,
    vocabulary: usize,
    name_mismatch: u8,
    concept_id: i64,
}

/// Extracts known vocabulary names from free text, in order of appearance.
/// Overlapping matches resolve to the longest alias.
pub fn parse_override_vocabularies(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut matches: Vec<(usize, usize, &str)> = Vec::new();
    for alias in KNOWN_VOCABULARIES {
        let needle = alias.to_lowercase();
        let mut from = 0;
        while let Some(at) = lowered[from..].find(&needle) {
            let start = from + at;
            matches.push((start, needle.len(), alias));
            from = start + 1;
        }
    }
    matches.sort_by_key(|&(start, len, _)| (start, usize::MAX - len));

    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut ordered: Vec<String> = Vec::new();
    for (start, len, alias) in matches {
        let end = start + len;
        if taken.iter().any(|&(s, e)| start < e && s < end) {
            continue;
        }
        taken.push((start, end));
        if !ordered.iter().any(|v| v.eq_ignore_ascii_case(alias)) {
            ordered.push(alias.to_string());
        }
    }
    ordered
}

/// Orders candidates best-first under the profile. Stable in the strong
/// sense: the result depends only on the candidate set, never on input order.
pub fn rank_candidates(
    candidates: &[Concept],
    profile: &PreferenceProfile,
    query: &str,
) -> Vec<Concept> {
    let effective = profile.effective_vocabularies();
    let query_norm = normalize_name(query);
    let mut ranked: Vec<Concept> = candidates.to_vec();
    ranked.sort_by_key(|concept| profile.sort_key(concept, &effective, &query_norm));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabulary::ConceptId;
    use proptest::prelude::*;

    fn concept(
        id: i64,
        name: &str,
        domain: &str,
        vocabulary: &str,
        standard: StandardKind,
        validity: Validity,
    ) -> Concept {
        Concept {
            concept_id: ConceptId::new(id).unwrap(),
            concept_name: name.to_string(),
            domain_id: domain.to_string(),
            vocabulary_id: vocabulary.to_string(),
            concept_class: "Clinical Finding".to_string(),
            standard,
            validity,
        }
    }

    #[test]
    fn domain_defaults_match_conventions() {
        let conditions = PreferenceProfile::for_domain("Condition").effective_vocabularies();
        assert_eq!(conditions, ["SNOMED"]);
        let drugs = PreferenceProfile::for_domain("Drug").effective_vocabularies();
        assert_eq!(drugs, ["RxNorm", "RxNorm Extension"]);
        let measurements = PreferenceProfile::for_domain("Measurement").effective_vocabularies();
        assert_eq!(measurements, ["LOINC"]);
        let procedures = PreferenceProfile::for_domain("Procedure").effective_vocabularies();
        assert_eq!(procedures, ["SNOMED", "CPT4"]);
        let unknown = PreferenceProfile::for_domain("Device").effective_vocabularies();
        assert!(unknown.is_empty());
    }

    #[test]
    fn override_parsing_finds_names_in_order() {
        assert_eq!(
            parse_override_vocabularies("prioritize LOINC for laboratory values"),
            ["LOINC"]
        );
        assert_eq!(
            parse_override_vocabularies("use RxNorm Extension before RxNorm"),
            ["RxNorm Extension", "RxNorm"]
        );
        assert_eq!(
            parse_override_vocabularies("try icd10cm, then plain ICD10"),
            ["ICD10CM", "ICD10"]
        );
        assert!(parse_override_vocabularies("no vocabulary named here").is_empty());
    }

    #[test]
    fn override_outranks_domain_default() {
        let profile = PreferenceProfile::for_domain("Condition")
            .with_override("prioritize LOINC for laboratory values");
        assert_eq!(profile.effective_vocabularies(), ["LOINC", "SNOMED"]);
        assert_eq!(
            profile.user_override.as_deref(),
            Some("prioritize LOINC for laboratory values")
        );

        let snomed = concept(
            10,
            "Body temperature",
            "Measurement",
            "SNOMED",
            StandardKind::Standard,
            Validity::Valid,
        );
        let loinc = concept(
            20,
            "Body temperature",
            "Measurement",
            "LOINC",
            StandardKind::Standard,
            Validity::Valid,
        );
        let ranked = rank_candidates(&[snomed, loinc], &profile, "body temperature");
        assert_eq!(ranked[0].concept_id.get(), 20, "override vocabulary must come first");
    }

    #[test]
    fn standard_and_valid_outrank_vocabulary() {
        let profile = PreferenceProfile::for_domain("Condition");
        let standard_icd = concept(
            1,
            "Chest pain",
            "Condition",
            "ICD10CM",
            StandardKind::Standard,
            Validity::Valid,
        );
        let nonstandard_snomed = concept(
            2,
            "Chest pain",
            "Condition",
            "SNOMED",
            StandardKind::NonStandard,
            Validity::Valid,
        );
        let invalid_snomed = concept(
            3,
            "Chest pain",
            "Condition",
            "SNOMED",
            StandardKind::Standard,
            Validity::Invalid,
        );
        let ranked = rank_candidates(
            &[nonstandard_snomed, invalid_snomed, standard_icd],
            &profile,
            "chest pain",
        );
        let ids: Vec<i64> = ranked.iter().map(|c| c.concept_id.get()).collect();
        // Standard+valid first even from a non-preferred vocabulary; the
        // invalidated standard concept still beats the non-standard one.
        assert_eq!(ids, [1, 3, 2]);
    }

    #[test]
    fn exact_name_match_breaks_vocabulary_ties() {
        let profile = PreferenceProfile::for_domain("Condition");
        let broader = concept(
            5,
            "Chest pain on breathing",
            "Condition",
            "SNOMED",
            StandardKind::Standard,
            Validity::Valid,
        );
        let exact = concept(
            9,
            "Chest pain",
            "Condition",
            "SNOMED",
            StandardKind::Standard,
            Validity::Valid,
        );
        let ranked = rank_candidates(&[broader, exact], &profile, "Chest  PAIN");
        assert_eq!(ranked[0].concept_id.get(), 9);
    }

    #[test]
    fn id_is_the_final_tiebreak() {
        let profile = PreferenceProfile::default();
        let a = concept(
            100,
            "Chest pain",
            "Condition",
            "SNOMED",
            StandardKind::Standard,
            Validity::Valid,
        );
        let b = concept(
            7,
            "Chest pain",
            "Condition",
            "SNOMED",
            StandardKind::Standard,
            Validity::Valid,
        );
        let ranked = rank_candidates(&[a, b], &profile, "chest pain");
        let ids: Vec<i64> = ranked.iter().map(|c| c.concept_id.get()).collect();
        assert_eq!(ids, [7, 100]);
    }

    fn arbitrary_concepts() -> impl Strategy<Value = Vec<Concept>> {
        let one = (
            1i64..10_000,
            prop_oneof![Just("Chest pain"), Just("Body temperature"), Just("Pain")],
            prop_oneof![Just("SNOMED"), Just("LOINC"), Just("ICD10CM"), Just("RxNorm")],
            prop_oneof![
                Just(StandardKind::Standard),
                Just(StandardKind::Classification),
                Just(StandardKind::NonStandard)
            ],
            prop_oneof![Just(Validity::Valid), Just(Validity::Invalid)],
        )
            .prop_map(|(id, name, vocabulary, standard, validity)| {
                concept(id, name, "Condition", vocabulary, standard, validity)
            });
        proptest::collection::vec(one, 1..12)
    }

    proptest! {
        #[test]
        fn ranking_is_permutation_invariant(
            concepts in arbitrary_concepts(),
            seed in proptest::num::u64::ANY,
        ) {
            let profile = PreferenceProfile::for_domain("Condition")
                .with_override("prioritize LOINC");
            let baseline = rank_candidates(&concepts, &profile, "chest pain");

            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = concepts.clone();
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);

            prop_assert_eq!(rank_candidates(&shuffled, &profile, "chest pain"), baseline);
        }

        #[test]
        fn ranked_output_is_monotone_in_the_preference_key(concepts in arbitrary_concepts()) {
            let profile = PreferenceProfile::for_domain("Condition");
            let effective = profile.effective_vocabularies();
            let ranked = rank_candidates(&concepts, &profile, "chest pain");
            for pair in ranked.windows(2) {
                let left = profile.sort_key(&pair[0], &effective, "chest pain");
                let right = profile.sort_key(&pair[1], &effective, "chest pain");
                prop_assert!(left <= right, "{left:?} > {right:?}");
            }
        }
    }
}
