//! Evaluation metrics for mapping runs: retrieval success, failure
//! distribution, relevance statistics, paired comparison, and timing.
//!
//! CSV input schemas:
//!
//! - per-term records: `term,outcome,relevance,elapsed_seconds` where
//!   `outcome` is one of `success|no_mapping_found|non_existent_id|
//!   name_mismatch` and `relevance` is blank unless the outcome is a success;
//! - paired comparison: `term,system_score,human_score` with scores in
//!   {0, 1, 2}.

mod report;
pub mod wilcoxon;

pub use report::{EvalReport, PairedReport, RecordsReport};
pub use wilcoxon::{
    wilcoxon_signed_rank, wilcoxon_signed_rank_with, Method, WilcoxonError, WilcoxonResult,
    EXACT_N_LIMIT,
};

use crate::vocabulary::{FailureKind, OutcomeClass};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;

/// A 0 to 2 clinical relevance judgment (0 wrong, 1 usable, 2 optimal).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Relevance(u8);

impl Relevance {
    pub fn new(score: i64) -> Result<Self, EvalError> {
        if !(0..=2).contains(&score) {
            return Err(EvalError::RelevanceOutOfRange(score));
        }
        Ok(Relevance(score as u8))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

/// One evaluated term.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub term: String,
    pub outcome: OutcomeClass,
    pub relevance: Option<Relevance>,
    pub elapsed_seconds: f64,
}

impl EvalRecord {
    pub fn new(
        term: impl Into<String>,
        outcome: OutcomeClass,
        relevance: Option<Relevance>,
        elapsed_seconds: f64,
    ) -> Result<Self, EvalError> {
        if relevance.is_some() && !outcome.is_success() {
            return Err(EvalError::RelevanceOnFailure);
        }
        Ok(EvalRecord { term: term.into(), outcome, relevance, elapsed_seconds })
    }
}

/// One term scored by both the system and a human expert.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    pub term: String,
    pub system: Relevance,
    pub human: Relevance,
}

/// Count and fraction-of-all-records for one failure kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FailureShare {
    pub count: usize,
    pub fraction: f64,
}

/// Mean elapsed seconds with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingSummary {
    pub mean_seconds: f64,
    pub sem_seconds: f64,
}

/// 3×3 grid of counts indexed by (system score, human score).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AgreementMatrix {
    pub counts: [[u64; 3]; 3],
}

impl AgreementMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Histogram of system scores (row sums).
    pub fn system_marginals(&self) -> [u64; 3] {
        let mut sums = [0u64; 3];
        for (i, row) in self.counts.iter().enumerate() {
            sums[i] = row.iter().sum();
        }
        sums
    }

    /// Histogram of human scores (column sums).
    pub fn human_marginals(&self) -> [u64; 3] {
        let mut sums = [0u64; 3];
        for row in &self.counts {
            for (j, count) in row.iter().enumerate() {
                sums[j] += count;
            }
        }
        sums
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("input contains no records")]
    Empty,
    #[error("no record carries a relevance score")]
    NoRelevanceScores,
    #[error("relevance is only meaningful for successful outcomes")]
    RelevanceOnFailure,
    #[error("relevance must be 0, 1, or 2 (got {0})")]
    RelevanceOutOfRange(i64),
    #[error("score lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("unrecognized CSV header {0:?}; expected term,outcome,relevance,elapsed_seconds or term,system_score,human_score")]
    UnknownHeader(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("failed to read CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Wilcoxon(#[from] WilcoxonError),
}

/// Fraction of records whose outcome is a success.
pub fn retrieval_success_rate(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let successes = records.iter().filter(|r| r.outcome.is_success()).count();
    Ok(successes as f64 / records.len() as f64)
}

/// Per-kind failure counts as fractions of all records. Kinds that never
/// occurred are present with zero.
pub fn failure_distribution(records: &[EvalRecord]) -> BTreeMap<FailureKind, FailureShare> {
    let total = records.len();
    let mut distribution: BTreeMap<FailureKind, FailureShare> = FailureKind::ALL
        .into_iter()
        .map(|kind| (kind, FailureShare { count: 0, fraction: 0.0 }))
        .collect();
    for record in records {
        if let OutcomeClass::Failure(kind) = record.outcome {
            distribution.get_mut(&kind).expect("all kinds present").count += 1;
        }
    }
    if total > 0 {
        for share in distribution.values_mut() {
            share.fraction = share.count as f64 / total as f64;
        }
    }
    distribution
}

/// Arithmetic mean of the relevance scores that are present.
pub fn mean_relevance(records: &[EvalRecord]) -> Result<f64, EvalError> {
    let scores: Vec<f64> =
        records.iter().filter_map(|r| r.relevance).map(|s| s.get() as f64).collect();
    if scores.is_empty() {
        return Err(EvalError::NoRelevanceScores);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean and standard error (sample stddev / sqrt(n)) of elapsed seconds.
/// A single observation has SEM 0 by convention.
pub fn timing_summary(records: &[EvalRecord]) -> Result<TimingSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let times: Vec<f64> = records.iter().map(|r| r.elapsed_seconds).collect();
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let sem = if times.len() < 2 {
        0.0
    } else {
        let variance = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (variance / n).sqrt()
    };
    Ok(TimingSummary { mean_seconds: mean, sem_seconds: sem })
}

/// Best score among a term's multiple human mappings.
pub fn highest_of_multiple(scores: &[Relevance]) -> Result<Relevance, EvalError> {
    scores.iter().copied().max().ok_or(EvalError::Empty)
}

/// Tallies (system score, human score) pairs into a 3×3 matrix.
pub fn agreement_matrix(
    system: &[Relevance],
    human: &[Relevance],
) -> Result<AgreementMatrix, EvalError> {
    if system.len() != human.len() {
        return Err(EvalError::LengthMismatch(system.len(), human.len()));
    }
    let mut counts = [[0u64; 3]; 3];
    for (s, h) in system.iter().zip(human) {
        counts[s.get() as usize][h.get() as usize] += 1;
    }
    Ok(AgreementMatrix { counts })
}

/// Renders a fraction as a percentage with one decimal place.
pub fn percent(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

/// Parsed evaluation input, discriminated by CSV header.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalInput {
    Records(Vec<EvalRecord>),
    Paired(Vec<PairedScores>),
}

const RECORDS_HEADER: [&str; 4] = ["term", "outcome", "relevance", "elapsed_seconds"];
const PAIRED_HEADER: [&str; 3] = ["term", "system_score", "human_score"];

/// Loads either CSV schema, selecting by header row.
pub fn load_eval_csv<R: Read>(reader: R) -> Result<EvalInput, EvalError> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = csv_reader
        .headers()
        .map_err(|e| EvalError::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    if headers == RECORDS_HEADER {
        let mut records = Vec::new();
        // Row numbers are 1-based over the whole file; the header is row 1.
        for (idx, row) in csv_reader.records().enumerate() {
            let row = row.map_err(|e| EvalError::Csv(e.to_string()))?;
            records.push(parse_record_row(&row, idx + 2)?);
        }
        Ok(EvalInput::Records(records))
    } else if headers == PAIRED_HEADER {
        let mut pairs = Vec::new();
        for (idx, row) in csv_reader.records().enumerate() {
            let row = row.map_err(|e| EvalError::Csv(e.to_string()))?;
            pairs.push(parse_paired_row(&row, idx + 2)?);
        }
        Ok(EvalInput::Paired(pairs))
    } else {
        Err(EvalError::UnknownHeader(headers.join(",")))
    }
}

fn row_error(row: usize, message: impl Into<String>) -> EvalError {
    EvalError::Row { row, message: message.into() }
}

fn parse_record_row(row: &csv::StringRecord, line: usize) -> Result<EvalRecord, EvalError> {
    if row.len() != RECORDS_HEADER.len() {
        return Err(row_error(line, format!("expected 4 fields, found {}", row.len())));
    }
    let term = row[0].to_string();
    let outcome = OutcomeClass::from_token(&row[1])
        .ok_or_else(|| row_error(line, format!("unknown outcome {:?}", &row[1])))?;
    let relevance = if row[2].is_empty() {
        None
    } else {
        let score: i64 = row[2]
            .parse()
            .map_err(|_| row_error(line, format!("relevance {:?} is not an integer", &row[2])))?;
        Some(Relevance::new(score).map_err(|e| row_error(line, e.to_string()))?)
    };
    let elapsed_seconds: f64 = row[3]
        .parse()
        .map_err(|_| row_error(line, format!("elapsed_seconds {:?} is not a number", &row[3])))?;
    if elapsed_seconds < 0.0 || !elapsed_seconds.is_finite() {
        return Err(row_error(line, "elapsed_seconds must be a nonnegative number"));
    }
    EvalRecord::new(term, outcome, relevance, elapsed_seconds)
        .map_err(|e| row_error(line, e.to_string()))
}

fn parse_paired_row(row: &csv::StringRecord, line: usize) -> Result<PairedScores, EvalError> {
    if row.len() != PAIRED_HEADER.len() {
        return Err(row_error(line, format!("expected 3 fields, found {}", row.len())));
    }
    let parse_score = |field: &str, name: &str| -> Result<Relevance, EvalError> {
        let score: i64 = field
            .parse()
            .map_err(|_| row_error(line, format!("{name} {field:?} is not an integer")))?;
        Relevance::new(score).map_err(|e| row_error(line, e.to_string()))
    };
    Ok(PairedScores {
        term: row[0].to_string(),
        system: parse_score(&row[1], "system_score")?,
        human: parse_score(&row[2], "human_score")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn success(relevance: u8, elapsed: f64) -> EvalRecord {
        EvalRecord::new(
            "t",
            OutcomeClass::Success,
            Some(Relevance::new(relevance as i64).unwrap()),
            elapsed,
        )
        .unwrap()
    }

    fn failure(kind: FailureKind) -> EvalRecord {
        EvalRecord::new("t", OutcomeClass::Failure(kind), None, 1.0).unwrap()
    }

    #[test]
    fn success_rate_spec_points() {
        let all: Vec<EvalRecord> = (0..48).map(|_| success(2, 5.49)).collect();
        assert_eq!(retrieval_success_rate(&all).unwrap(), 1.0);
        assert_eq!(percent(retrieval_success_rate(&all).unwrap()), "100.0%");

        let none: Vec<EvalRecord> =
            (0..48).map(|_| failure(FailureKind::NonExistentConceptId)).collect();
        assert_eq!(retrieval_success_rate(&none).unwrap(), 0.0);

        let mut mixed: Vec<EvalRecord> = (0..142).map(|_| success(2, 6.2)).collect();
        mixed.extend((0..8).map(|_| failure(FailureKind::NoMappingFound)));
        let rate = retrieval_success_rate(&mixed).unwrap();
        assert!((rate - 142.0 / 150.0).abs() < 1e-12);
        assert_eq!(percent(rate), "94.7%");
    }

    #[test]
    fn failure_distribution_reconstructs_ablation_split() {
        let mut records: Vec<EvalRecord> =
            (0..5).map(|_| failure(FailureKind::NonExistentConceptId)).collect();
        records.extend((0..43).map(|_| failure(FailureKind::ConceptIdNameMismatch)));
        let distribution = failure_distribution(&records);
        let non_existent = distribution[&FailureKind::NonExistentConceptId];
        let mismatch = distribution[&FailureKind::ConceptIdNameMismatch];
        assert_eq!((non_existent.count, mismatch.count), (5, 43));
        assert_eq!(percent(non_existent.fraction), "10.4%");
        assert_eq!(percent(mismatch.fraction), "89.6%");
        assert_eq!(distribution[&FailureKind::NoMappingFound].count, 0);
    }

    #[test]
    fn failure_distribution_all_success_is_zero() {
        let records: Vec<EvalRecord> = (0..4).map(|_| success(1, 1.0)).collect();
        let distribution = failure_distribution(&records);
        assert!(distribution.values().all(|s| s.count == 0 && s.fraction == 0.0));
    }

    #[test]
    fn failure_distribution_single_no_mapping() {
        let records = vec![failure(FailureKind::NoMappingFound)];
        let distribution = failure_distribution(&records);
        assert_eq!(distribution[&FailureKind::NoMappingFound].fraction, 1.0);
    }

    #[test]
    fn distribution_fractions_and_success_sum_to_one() {
        let mut records: Vec<EvalRecord> = (0..7).map(|_| success(2, 1.0)).collect();
        records.extend((0..3).map(|_| failure(FailureKind::ConceptIdNameMismatch)));
        records.push(failure(FailureKind::NoMappingFound));
        let success_fraction = retrieval_success_rate(&records).unwrap();
        let failure_sum: f64 = failure_distribution(&records).values().map(|s| s.fraction).sum();
        assert!((success_fraction + failure_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_relevance_histogram_reconstructions() {
        // 12 zeros / 31 ones / 99 twos -> 229/142.
        let mut system: Vec<EvalRecord> = Vec::new();
        for (score, count) in [(0u8, 12), (1, 31), (2, 99)] {
            system.extend((0..count).map(|_| success(score, 1.0)));
        }
        let mean = mean_relevance(&system).unwrap();
        assert!((mean - 229.0 / 142.0).abs() < 1e-12);
        assert_eq!(format!("{mean:.2}"), "1.61");

        // 35 zeros / 16 ones / 91 twos -> 198/142.
        let mut human: Vec<EvalRecord> = Vec::new();
        for (score, count) in [(0u8, 35), (1, 16), (2, 91)] {
            human.extend((0..count).map(|_| success(score, 1.0)));
        }
        let mean = mean_relevance(&human).unwrap();
        assert!((mean - 198.0 / 142.0).abs() < 1e-12);
        assert_eq!(format!("{mean:.2}"), "1.39");

        assert_eq!(mean_relevance(&[success(2, 1.0)]).unwrap(), 2.0);
    }

    #[test]
    fn timing_summary_hand_computed() {
        let records: Vec<EvalRecord> = [5.0, 6.0, 7.0].map(|t| success(2, t)).to_vec();
        let timing = timing_summary(&records).unwrap();
        assert_eq!(timing.mean_seconds, 6.0);
        // sd = 1, sqrt(3) ≈ 1.7320508 -> SEM ≈ 0.5774.
        assert!((timing.sem_seconds - 0.57735026919).abs() < 1e-9);

        let flat: Vec<EvalRecord> = (0..48).map(|_| success(2, 5.49)).collect();
        let timing = timing_summary(&flat).unwrap();
        assert!((timing.mean_seconds - 5.49).abs() < 1e-12);
        assert!(timing.sem_seconds.abs() < 1e-12);

        let single = timing_summary(&[success(2, 3.3)]).unwrap();
        assert_eq!(single.mean_seconds, 3.3);
        assert_eq!(single.sem_seconds, 0.0);
    }

    #[test]
    fn highest_of_multiple_is_max() {
        let score = |s| Relevance::new(s).unwrap();
        assert_eq!(highest_of_multiple(&[score(0), score(1), score(2)]).unwrap(), score(2));
        assert_eq!(highest_of_multiple(&[score(1)]).unwrap(), score(1));
        assert_eq!(highest_of_multiple(&[score(1), score(1)]).unwrap(), score(1));
    }

    #[test]
    fn agreement_matrix_tallies_and_transposes() {
        let score = |s| Relevance::new(s).unwrap();
        let system = [score(2), score(2), score(0)];
        let human = [score(2), score(1), score(0)];
        let matrix = agreement_matrix(&system, &human).unwrap();
        assert_eq!(matrix.counts[2][2], 1);
        assert_eq!(matrix.counts[2][1], 1);
        assert_eq!(matrix.counts[0][0], 1);
        assert_eq!(matrix.total(), 3);

        let transposed = agreement_matrix(&human, &system).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(matrix.counts[i][j], transposed.counts[j][i]);
            }
        }

        let empty = agreement_matrix(&[], &[]).unwrap();
        assert_eq!(empty.total(), 0);
    }

    #[test]
    fn records_csv_round_trip() {
        let csv_text = "term,outcome,relevance,elapsed_seconds\n\
                        chest pain,success,2,5.1\n\
                        CP,name_mismatch,,4.0\n";
        let input = load_eval_csv(csv_text.as_bytes()).unwrap();
        let EvalInput::Records(records) = input else { panic!("expected records") };
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].relevance, Some(Relevance::new(2).unwrap()));
        assert_eq!(records[1].outcome, OutcomeClass::Failure(FailureKind::ConceptIdNameMismatch));
    }

    #[test]
    fn paired_csv_parses() {
        let csv_text = "term,system_score,human_score\nchest pain,2,1\n";
        let EvalInput::Paired(pairs) = load_eval_csv(csv_text.as_bytes()).unwrap() else {
            panic!("expected paired")
        };
        assert_eq!(pairs[0].system.get(), 2);
        assert_eq!(pairs[0].human.get(), 1);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let bad_outcome =
            "term,outcome,relevance,elapsed_seconds\nx,success,2,1.0\ny,hallucinated,,1.0\n";
        let err = load_eval_csv(bad_outcome.as_bytes()).unwrap_err();
        assert!(matches!(err, EvalError::Row { row: 3, .. }), "{err}");

        let bad_header = "word,result\nx,y\n";
        assert!(matches!(
            load_eval_csv(bad_header.as_bytes()).unwrap_err(),
            EvalError::UnknownHeader(_)
        ));

        let relevance_on_failure =
            "term,outcome,relevance,elapsed_seconds\nx,no_mapping_found,2,1.0\n";
        let err = load_eval_csv(relevance_on_failure.as_bytes()).unwrap_err();
        assert!(matches!(err, EvalError::Row { row: 2, .. }), "{err}");
    }
}
