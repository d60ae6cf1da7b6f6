//! Post-hoc verification of proposed mappings.
//!
//! Every mapping a model proposes is re-authenticated against the vocabulary
//! store before it can be emitted: the concept id must exist, and the claimed
//! name must match the stored name (after whitespace/case normalization). The
//! emitted record is then rebuilt from the stored concept, so domain,
//! vocabulary, class, validity, and URL can never be fabricated; only the
//! reasoning and inferred keyword are carried over from the model.

use crate::athena::{GatewayError, VocabularyStore};
use crate::vocabulary::{normalize_name, Concept, FailureKind, MappingResult};

/// A mapping that passed authentication. `result` is rebuilt from `concept`,
/// not copied from model output.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedMapping {
    pub concept: Concept,
    pub result: MappingResult,
}

/// Why a proposed mapping was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardRejection {
    pub kind: FailureKind,
    pub detail: String,
}

/// Outcome of authenticating one proposed mapping. Upstream failures are not
/// verdicts and surface as `Err` from [`verify_mapping`] instead.
// One value per verification; not worth boxing the verified payload.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Verified(VerifiedMapping),
    Rejected(GuardRejection),
}

/// Authenticates a proposed mapping against the store.
///
/// Rejections:
/// - [`FailureKind::NonExistentConceptId`] when no concept has the id;
/// - [`FailureKind::ConceptIdNameMismatch`] when the id exists but the
///   claimed name is not the stored name.
pub fn verify_mapping(
    proposed: &MappingResult,
    store: &VocabularyStore,
) -> Result<Verdict, GatewayError> {
    let id = proposed.concept_id.get();
    let concept = match store.get_concept(id) {
        Ok(Some(concept)) => concept,
        Ok(None) => {
            return Ok(Verdict::Rejected(GuardRejection {
                kind: FailureKind::NonExistentConceptId,
                detail: format!("concept {id} does not exist in the vocabulary"),
            }));
        }
        // A malformed id in a parsed result can only be <= 0; treat it the
        // same as absent rather than surfacing a query error.
        Err(GatewayError::InvalidId(_)) => {
            return Ok(Verdict::Rejected(GuardRejection {
                kind: FailureKind::NonExistentConceptId,
                detail: format!("concept id {id} is not a valid identifier"),
            }));
        }
        Err(other) => return Err(other),
    };

    if normalize_name(&proposed.concept_name) != normalize_name(&concept.concept_name) {
        return Ok(Verdict::Rejected(GuardRejection {
            kind: FailureKind::ConceptIdNameMismatch,
            detail: format!(
                "concept {id} is named {:?}, not {:?}",
                concept.concept_name, proposed.concept_name
            ),
        }));
    }

    let result =
        MappingResult::from_concept(&concept, &proposed.reasoning, &proposed.inferred_keyword);
    Ok(Verdict::Verified(VerifiedMapping { concept, result }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::athena::{FixtureIndex, VocabularyStore};
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

    fn store() -> VocabularyStore {
        VocabularyStore::fixture(
            FixtureIndex::from_concepts(vec![
                concept(77670, "Chest pain"),
                concept(4329847, "Myocardial infarction"),
            ])
            .unwrap(),
        )
    }

    fn proposal(id: i64, name: &str) -> MappingResult {
        MappingResult::from_concept(&concept(id, name), "because", "")
    }

    #[test]
    fn authentic_mapping_is_verified() {
        let verdict = verify_mapping(&proposal(77670, "Chest pain"), &store()).unwrap();
        match verdict {
            Verdict::Verified(mapping) => {
                assert_eq!(mapping.concept.concept_id.get(), 77670);
                assert_eq!(mapping.result.concept_name, "Chest pain");
                assert_eq!(mapping.result.reasoning, "because");
            }
            other => panic!("expected verification, got {other:?}"),
        }
    }

    #[test]
    fn name_differences_in_case_and_spacing_still_verify() {
        let verdict = verify_mapping(&proposal(77670, "  CHEST   PAIN "), &store()).unwrap();
        let Verdict::Verified(mapping) = verdict else {
            panic!("normalized name should match");
        };
        // The emitted record uses the stored spelling, not the claimed one.
        assert_eq!(mapping.result.concept_name, "Chest pain");
    }

    #[test]
    fn unknown_id_is_rejected_as_non_existent() {
        let verdict = verify_mapping(&proposal(999_999_999, "Chest pain"), &store()).unwrap();
        let Verdict::Rejected(rejection) = verdict else {
            panic!("fabricated id must be rejected");
        };
        assert_eq!(rejection.kind, FailureKind::NonExistentConceptId);
        assert!(rejection.detail.contains("999999999"));
    }

    #[test]
    fn wrong_name_for_real_id_is_rejected_as_mismatch() {
        let verdict = verify_mapping(&proposal(77670, "Angina pectoris"), &store()).unwrap();
        let Verdict::Rejected(rejection) = verdict else {
            panic!("name mismatch must be rejected");
        };
        assert_eq!(rejection.kind, FailureKind::ConceptIdNameMismatch);
        assert!(rejection.detail.contains("Chest pain"));
        assert!(rejection.detail.contains("Angina pectoris"));
    }

    #[test]
    fn fabricated_metadata_is_replaced_by_stored_values() {
        let mut tampered = proposal(77670, "Chest pain");
        tampered.domain_id = "Drug".to_string();
        tampered.vocabulary = "RxNorm".to_string();
        tampered.concept_url = "https://example.invalid/404".to_string();
        let Verdict::Verified(mapping) = verify_mapping(&tampered, &store()).unwrap() else {
            panic!("id and name are authentic");
        };
        assert_eq!(mapping.result.domain_id, "Condition");
        assert_eq!(mapping.result.vocabulary, "SNOMED");
        assert_eq!(mapping.result.concept_url, "https://athena.ohdsi.org/search-terms/terms/77670");
    }

    fn arbitrary_name() -> impl Strategy<Value = String> {
        // Mixed-case words with irregular spacing.
        proptest::collection::vec("[A-Za-z]{1,8}", 1..4).prop_map(|words| words.join("  "))
    }

    proptest! {
        /// Soundness: whatever the claimed name, a verdict of Verified only
        /// ever carries a concept that really is in the store under the
        /// claimed id, and the claimed name matched it.
        #[test]
        fn verified_mappings_always_name_real_concepts(
            id in 1i64..200,
            claimed in arbitrary_name(),
        ) {
            let concepts: Vec<Concept> =
                (1..100).map(|i| concept(i, &format!("Concept number {i}"))).collect();
            let store = VocabularyStore::fixture(FixtureIndex::from_concepts(concepts).unwrap());
            let verdict = verify_mapping(&proposal(id, &claimed), &store).unwrap();
            match verdict {
                Verdict::Verified(mapping) => {
                    prop_assert!(id < 100, "id {id} is not in the store");
                    prop_assert_eq!(mapping.concept.concept_id.get(), id);
                    prop_assert_eq!(
                        normalize_name(&claimed),
                        normalize_name(&mapping.concept.concept_name)
                    );
                }
                Verdict::Rejected(rejection) => {
                    if id < 100 {
                        prop_assert_eq!(rejection.kind, FailureKind::ConceptIdNameMismatch);
                    } else {
                        prop_assert_eq!(rejection.kind, FailureKind::NonExistentConceptId);
                    }
                }
            }
        }

        /// Completeness: an honest proposal (id and name copied from a stored
        /// concept, with arbitrary re-casing) is never rejected.
        #[test]
        fn honest_proposals_are_never_rejected(
            id in 1i64..100,
            uppercase in proptest::bool::ANY,
            padding in 0usize..3,
        ) {
            let concepts: Vec<Concept> =
                (1..100).map(|i| concept(i, &format!("Concept number {i}"))).collect();
            let store = VocabularyStore::fixture(FixtureIndex::from_concepts(concepts).unwrap());
            let stored_name = format!("Concept number {id}");
            let mut claimed =
                if uppercase { stored_name.to_uppercase() } else { stored_name.clone() };
            claimed = format!("{}{claimed}", " ".repeat(padding));
            let verdict = verify_mapping(&proposal(id, &claimed), &store).unwrap();
            prop_assert!(matches!(verdict, Verdict::Verified(_)), "rejected: {verdict:?}");
        }
    }
}
