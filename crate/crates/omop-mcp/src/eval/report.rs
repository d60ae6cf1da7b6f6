//! Aggregated evaluation reports: a JSON-serializable structure plus a
//! plain-text summary table.

use super::{
    agreement_matrix, failure_distribution, mean_relevance, percent, retrieval_success_rate,
    timing_summary, wilcoxon_signed_rank, AgreementMatrix, EvalError, EvalInput, EvalRecord,
    PairedScores, TimingSummary, WilcoxonError, WilcoxonResult,
};
use serde::Serialize;
use std::fmt::Write as _;

/// Report over per-term outcome records.
#[derive(Debug, Clone, Serialize)]
pub struct RecordsReport {
    pub records: usize,
    pub successes: usize,
    pub retrieval_success_rate: f64,
    pub retrieval_success_percent: String,
    pub failures: Vec<FailureEntry>,
    /// Absent when no record carries a relevance score.
    pub mean_relevance: Option<f64>,
    pub timing: TimingSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureEntry {
    pub kind: String,
    pub count: usize,
    pub fraction: f64,
    pub percent: String,
}

/// Report over paired system/human scores.
#[derive(Debug, Clone, Serialize)]
pub struct PairedReport {
    pub pairs: usize,
    pub mean_system: f64,
    pub mean_human: f64,
    pub agreement: AgreementReport,
    /// Absent when every pair is tied (the signed-rank test is undefined).
    pub wilcoxon: Option<WilcoxonResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wilcoxon_note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgreementReport {
    /// counts[system][human].
    pub counts: [[u64; 3]; 3],
    pub system_marginals: [u64; 3],
    pub human_marginals: [u64; 3],
    pub system_marginal_percents: [String; 3],
    pub human_marginal_percents: [String; 3],
}

/// Either report shape, matching the two input schemas.
// One value per evaluation run; not worth boxing the paired payload.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum EvalReport {
    Records(RecordsReport),
    Paired(PairedReport),
}

impl EvalReport {
    pub fn from_input(input: &EvalInput) -> Result<Self, EvalError> {
        match input {
            EvalInput::Records(records) => {
                Ok(EvalReport::Records(RecordsReport::from_records(records)?))
            }
            EvalInput::Paired(pairs) => Ok(EvalReport::Paired(PairedReport::from_pairs(pairs)?)),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes infallibly")
    }

    pub fn render_text(&self) -> String {
        match self {
            EvalReport::Records(report) => report.render_text(),
            EvalReport::Paired(report) => report.render_text(),
        }
    }
}

impl RecordsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self, EvalError> {
        let rate = retrieval_success_rate(records)?;
        let successes = records.iter().filter(|r| r.outcome.is_success()).count();
        let failures = failure_distribution(records)
            .into_iter()
            .map(|(kind, share)| FailureEntry {
                kind: kind.token().to_string(),
                count: share.count,
                fraction: share.fraction,
                percent: percent(share.fraction),
            })
            .collect();
        Ok(RecordsReport {
            records: records.len(),
            successes,
            retrieval_success_rate: rate,
            retrieval_success_percent: percent(rate),
            failures,
            mean_relevance: mean_relevance(records).ok(),
            timing: timing_summary(records)?,
        })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "records            {}", self.records);
        let _ = writeln!(
            out,
            "retrieval success  {} ({}/{})",
            self.retrieval_success_percent, self.successes, self.records
        );
        for entry in &self.failures {
            let _ = writeln!(out, "  {:<18} {} ({})", entry.kind, entry.count, entry.percent);
        }
        if let Some(mean) = self.mean_relevance {
            let _ = writeln!(out, "mean relevance     {mean:.2}");
        }
        let _ = writeln!(
            out,
            "timing             {:.2} ± {:.2} s/term",
            self.timing.mean_seconds, self.timing.sem_seconds
        );
        out
    }
}

impl PairedReport {
    pub fn from_pairs(pairs: &[PairedScores]) -> Result<Self, EvalError> {
        if pairs.is_empty() {
            return Err(EvalError::Empty);
        }
        let system: Vec<_> = pairs.iter().map(|p| p.system).collect();
        let human: Vec<_> = pairs.iter().map(|p| p.human).collect();
        let matrix = agreement_matrix(&system, &human)?;

        let system_f: Vec<f64> = system.iter().map(|s| s.get() as f64).collect();
        let human_f: Vec<f64> = human.iter().map(|s| s.get() as f64).collect();
        let (wilcoxon, note) = match wilcoxon_signed_rank(&system_f, &human_f) {
            Ok(result) => (Some(result), None),
            Err(WilcoxonError::DegenerateInput) => {
                (None, Some("all score pairs are tied; signed-rank test undefined".to_string()))
            }
            Err(other) => return Err(other.into()),
        };

        let n = pairs.len() as f64;
        Ok(PairedReport {
            pairs: pairs.len(),
            mean_system: system_f.iter().sum::<f64>() / n,
            mean_human: human_f.iter().sum::<f64>() / n,
            agreement: AgreementReport::from_matrix(&matrix),
            wilcoxon,
            wilcoxon_note: note,
        })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pairs              {}", self.pairs);
        let _ = writeln!(
            out,
            "mean relevance     system {:.2} vs human {:.2}",
            self.mean_system, self.mean_human
        );
        let _ = writeln!(out, "agreement matrix   (rows: system score, cols: human score)");
        let _ = writeln!(out, "         h=0    h=1    h=2");
        for (i, row) in self.agreement.counts.iter().enumerate() {
            let _ = writeln!(out, "  s={}  {:>5}  {:>5}  {:>5}", i, row[0], row[1], row[2]);
        }
        let _ = writeln!(
            out,
            "system scores      0: {} 1: {} 2: {}",
            self.agreement.system_marginal_percents[0],
            self.agreement.system_marginal_percents[1],
            self.agreement.system_marginal_percents[2]
        );
        let _ = writeln!(
            out,
            "human scores       0: {} 1: {} 2: {}",
            self.agreement.human_marginal_percents[0],
            self.agreement.human_marginal_percents[1],
            self.agreement.human_marginal_percents[2]
        );
        match (&self.wilcoxon, &self.wilcoxon_note) {
            (Some(w), _) => {
                let _ = writeln!(
                    out,
                    "wilcoxon           W={:.1} z={:.3} p={:.4} ({:?})",
                    w.w_statistic, w.z_value, w.p_value, w.p_method
                );
                let _ = writeln!(
                    out,
                    "effect size        r=|z|/sqrt(n) {:.3} | rank-biserial {:.3}",
                    w.effect_r_z, w.effect_r_rb
                );
            }
            (None, Some(note)) => {
                let _ = writeln!(out, "wilcoxon           skipped: {note}");
            }
            (None, None) => {}
        }
        out
    }
}

impl AgreementReport {
    fn from_matrix(matrix: &AgreementMatrix) -> Self {
        let total = matrix.total().max(1) as f64;
        let as_percents =
            |marginals: [u64; 3]| marginals.map(|count| percent(count as f64 / total));
        AgreementReport {
            counts: matrix.counts,
            system_marginals: matrix.system_marginals(),
            human_marginals: matrix.human_marginals(),
            system_marginal_percents: as_percents(matrix.system_marginals()),
            human_marginal_percents: as_percents(matrix.human_marginals()),
        }
    }
}
