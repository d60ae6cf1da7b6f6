//! Offline vocabulary backend: a concept snapshot loaded from newline-
//! delimited JSON, with a deterministic ranking function.
//!
//! Ranking tiers, best first: exact normalized-name match, substring match,
//! token-overlap count (descending). Ties break by ascending concept id, so
//! identical queries always produce byte-identical candidate lists.

use super::SearchFilters;
use crate::vocabulary::{normalize_name, CandidateSet, Concept};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("failed to read fixture: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate concept_id {0}")]
    DuplicateConceptId(i64),
}

/// In-memory concept snapshot, indexed by id.
#[derive(Debug)]
pub struct FixtureIndex {
    by_id: BTreeMap<i64, Concept>,
}

impl FixtureIndex {
    pub fn from_concepts(
        concepts: impl IntoIterator<Item = Concept>,
    ) -> Result<Self, FixtureError> {
        let mut by_id = BTreeMap::new();
        for concept in concepts {
            let id = concept.concept_id.get();
            if by_id.insert(id, concept).is_some() {
                return Err(FixtureError::DuplicateConceptId(id));
            }
        }
        Ok(FixtureIndex { by_id })
    }

    pub fn from_ndjson_path(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let file = std::fs::File::open(path)?;
        Self::from_ndjson_reader(std::io::BufReader::new(file))
    }

    pub fn from_ndjson_reader<R: BufRead>(reader: R) -> Result<Self, FixtureError> {
        let mut by_id = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let concept: Concept = serde_json::from_str(&line)
                .map_err(|e| FixtureError::Parse { line: line_no, message: e.to_string() })?;
            concept
                .validate()
                .map_err(|e| FixtureError::Parse { line: line_no, message: e.to_string() })?;
            let id = concept.concept_id.get();
            if by_id.insert(id, concept).is_some() {
                return Err(FixtureError::DuplicateConceptId(id));
            }
        }
        Ok(FixtureIndex { by_id })
    }

    pub fn get(&self, concept_id: i64) -> Option<&Concept> {
        self.by_id.get(&concept_id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Concepts in ascending id order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.by_id.values()
    }

    pub fn search(&self, query: &str, filters: &SearchFilters) -> CandidateSet {
        let normalized_query = normalize_name(query);
        let query_tokens: HashSet<&str> = normalized_query.split(' ').collect();

        // (tier, negated overlap) sort key; BTreeMap iteration already yields
        // ascending ids, and the sort is stable.
        let mut ranked: Vec<(u8, i64, &Concept)> = Vec::new();
        for concept in self.by_id.values() {
            if !filters.admits(concept) {
                continue;
            }
            let name = normalize_name(&concept.concept_name);
            let (tier, overlap) = if name == normalized_query {
                (0u8, 0i64)
            } else if name.contains(&normalized_query) {
                (1, 0)
            } else {
                let overlap =
                    name.split(' ').collect::<HashSet<_>>().intersection(&query_tokens).count();
                if overlap == 0 {
                    continue;
                }
                (2, -(overlap as i64))
            };
            ranked.push((tier, overlap, concept));
        }
        ranked.sort_by_key(|(tier, overlap, _)| (*tier, *overlap));

        let total_available = ranked.len() as u64;
        let start = ((filters.page - 1) as usize).saturating_mul(filters.page_size as usize);
        let candidates: Vec<Concept> = ranked
            .into_iter()
            .skip(start)
            .take(filters.page_size as usize)
            .map(|(_, _, concept)| concept.clone())
            .collect();

        CandidateSet {
            query: query.trim().to_string(),
            candidates,
            total_available,
            page: filters.page,
            page_size: filters.page_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabulary::{ConceptId, StandardKind, Validity};

    fn concept(id: i64, name: &str) -> Concept {
        Concept {
            concept_id: ConceptId::new(id).unwrap(),
            concept_name: name.to_string(),
            domain_id: "Condition".into(),
            vocabulary_id: "SNOMED".into(),
            concept_class: "Clinical Finding".into(),
            standard: StandardKind::Standard,
            validity: Validity::Valid,
        }
    }

    fn index() -> FixtureIndex {
        FixtureIndex::from_concepts([
            concept(77670, "Chest pain"),
            concept(4153877, "Chest pain on breathing"),
            concept(320136, "Pain"),
            concept(312437, "Dyspnea"),
        ])
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let result = index().search("chest pain", &SearchFilters::default());
        assert_eq!(result.candidates[0].concept_id.get(), 77670);
        assert_eq!(result.total_available, 3);
    }

    #[test]
    fn substring_beats_token_overlap() {
        let result = index().search("chest pain", &SearchFilters::default());
        let ids: Vec<i64> = result.candidates.iter().map(|c| c.concept_id.get()).collect();
        assert_eq!(ids, [77670, 4153877, 320136]);
    }

    #[test]
    fn no_match_is_an_empty_result() {
        let result = index().search("qqqqzzzz", &SearchFilters::default());
        assert!(result.candidates.is_empty());
        assert_eq!(result.total_available, 0);
    }

    #[test]
    fn equal_rank_breaks_ties_by_id() {
        let fixture = FixtureIndex::from_concepts([
            concept(30, "Knee pain"),
            concept(10, "Back pain"),
            concept(20, "Arm pain"),
        ])
        .unwrap();
        let result = fixture.search("pain", &SearchFilters::default());
        let ids: Vec<i64> = result.candidates.iter().map(|c| c.concept_id.get()).collect();
        assert_eq!(ids, [10, 20, 30]);
    }

    #[test]
    fn ndjson_load_counts_and_errors() {
        let good = "\
{\"concept_id\":1,\"concept_name\":\"A\",\"domain_id\":\"Condition\",\"vocabulary_id\":\"SNOMED\",\"concept_class\":\"X\",\"standard\":\"S\",\"validity\":\"V\"}
{\"concept_id\":2,\"concept_name\":\"B\",\"domain_id\":\"Condition\",\"vocabulary_id\":\"SNOMED\",\"concept_class\":\"X\",\"standard\":\"N\",\"validity\":\"I\"}
{\"concept_id\":3,\"concept_name\":\"C\",\"domain_id\":\"Drug\",\"vocabulary_id\":\"RxNorm\",\"concept_class\":\"X\",\"standard\":\"C\",\"validity\":\"V\"}
";
        let index = FixtureIndex::from_ndjson_reader(good.as_bytes()).unwrap();
        assert_eq!(index.len(), 3);

        let duplicated = good.replace("\"concept_id\":2", "\"concept_id\":1");
        match FixtureIndex::from_ndjson_reader(duplicated.as_bytes()) {
            Err(FixtureError::DuplicateConceptId(1)) => {}
            other => panic!("expected duplicate error, got {other:?}"),
        }

        let bad_type = good.replace("\"concept_id\":3", "\"concept_id\":\"abc\"");
        match FixtureIndex::from_ndjson_reader(bad_type.as_bytes()) {
            Err(FixtureError::Parse { line: 3, .. }) => {}
            other => panic!("expected parse error on line 3, got {other:?}"),
        }
    }

    #[test]
    fn pagination_slices_without_duplicates() {
        let fixture =
            FixtureIndex::from_concepts((1..=7).map(|i| concept(i, &format!("pain type {i}"))))
                .unwrap();
        let mut seen = Vec::new();
        for page in 1..=3 {
            let filters = SearchFilters { page, page_size: 3, ..SearchFilters::default() };
            let result = fixture.search("pain", &filters);
            assert_eq!(result.total_available, 7);
            seen.extend(result.candidates.iter().map(|c| c.concept_id.get()));
        }
        let unique: HashSet<i64> = seen.iter().copied().collect();
        assert_eq!(seen.len(), 7);
        assert_eq!(unique.len(), 7);
    }
}
