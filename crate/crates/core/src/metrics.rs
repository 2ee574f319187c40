//! Structural and behavioral metrics over sweeps.
//!
//! Per-token survival is strict cache membership (the forward pass's
//! self-fallback never counts). A token is globally evicted when absent from
//! every (layer, head) survivor set; the global eviction ratio restricts
//! that to answer spans. Consensus summarizes cross-head agreement on top
//! tokens; susceptibility is the finite-difference slope of the
//! hallucination-rate curve over alpha.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{PressKind, Regime, SurvivalMask};
use crate::tol;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask covers an empty sequence")]
    EmptySequence,
    #[error("answer set is empty")]
    EmptyAnswerSet,
    #[error("answer position {pos} out of range for seq_len {seq}")]
    AnswerOutOfRange { pos: usize, seq: usize },
    #[error("need at least one head")]
    EmptyHeads,
    #[error("attention rows are empty or ragged")]
    BadRows,
    #[error("susceptibility needs at least two grid points")]
    TooFewPoints,
    #[error("alpha grid must be strictly increasing (offending value {0})")]
    NonIncreasingAlpha(f64),
    #[error("no records to aggregate")]
    EmptyRecords,
}

/// Fraction of positions evicted from every (layer, head) survivor set.
pub fn eviction_rate(mask: &SurvivalMask) -> Result<f64, MetricsError> {
    let s = mask.seq_len;
    if s == 0 {
        return Err(MetricsError::EmptySequence);
    }
    let evicted = (0..s).filter(|&p| mask.globally_evicted(p)).count();
    Ok(evicted as f64 / s as f64)
}

/// Global eviction ratio: `eviction_rate` restricted to answer positions.
pub fn ger(mask: &SurvivalMask, t_ans: &[usize]) -> Result<f64, MetricsError> {
    if t_ans.is_empty() {
        return Err(MetricsError::EmptyAnswerSet);
    }
    let s = mask.seq_len;
    for &t in t_ans {
        if t >= s {
            return Err(MetricsError::AnswerOutOfRange { pos: t, seq: s });
        }
    }
    let evicted = t_ans.iter().filter(|&&p| mask.globally_evicted(p)).count();
    Ok(evicted as f64 / t_ans.len() as f64)
}

/// Distinct top tokens over heads, normalized by head count: 1/H means
/// unanimity, 1 means every head tops a different token.
pub fn consensus(top_tokens: &[usize]) -> Result<f64, MetricsError> {
    if top_tokens.is_empty() {
        return Err(MetricsError::EmptyHeads);
    }
    let mut sorted = top_tokens.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted.len() as f64 / top_tokens.len() as f64)
}

/// Per-head argmaxes of attention rows; ties resolve to the lowest token.
pub fn row_argmaxes(rows: &[Vec<f64>]) -> Result<Vec<usize>, MetricsError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(MetricsError::BadRows);
    }
    let width = rows[0].len();
    rows.iter()
        .map(|r| {
            if r.len() != width {
                return Err(MetricsError::BadRows);
            }
            let mut best = 0usize;
            for (j, &w) in r.iter().enumerate() {
                if w > r[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Largest fraction of heads sharing one top token, with that token.
/// Token-count ties resolve to the lower token index.
pub fn agreement_fraction(rows: &[Vec<f64>]) -> Result<(f64, usize), MetricsError> {
    let tops = row_argmaxes(rows)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &tops {
        *counts.entry(*t).or_insert(0) += 1;
    }
    let (&token, &count) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .expect("non-empty rows");
    Ok((count as f64 / tops.len() as f64, token))
}

/// Finite-difference slope of `curve` (strictly increasing alphas): central
/// differences inside, one-sided at the ends.
pub fn susceptibility(curve: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if curve.len() < 2 {
        return Err(MetricsError::TooFewPoints);
    }
    for w in curve.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(MetricsError::NonIncreasingAlpha(w[1].0));
        }
    }
    let n = curve.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        let slope = (curve[hi].1 - curve[lo].1) / (curve[hi].0 - curve[lo].0);
        out.push((curve[i].0, slope));
    }
    Ok(out)
}

/// Alpha with the largest susceptibility; ties resolve to the lower alpha.
pub fn susceptibility_peak(chi: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(a, x) in chi {
        match best {
            Some((_, bx)) if x <= bx => {}
            _ => best = Some((a, x)),
        }
    }
    best.map(|(a, _)| a)
}

/// Pearson correlation; None when either side has zero variance or fewer
/// than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Outcome of grading one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Correct,
    Hallucination,
    Unknown,
}

impl Grade {
    pub fn as_str(&self) -> &'static str {
        match self {
            Grade::Correct => "correct",
            Grade::Hallucination => "hallucination",
            Grade::Unknown => "unknown",
        }
    }
}

/// Abstention markers graded as "the model declined to answer".
pub const DEFAULT_UNKNOWN_MARKERS: [&str; 3] = ["i don't know", "unknown", "cannot be determined"];

/// Lowercased whitespace tokens with punctuation trimmed from both ends;
/// purely punctuation tokens vanish.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let t = w
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            (!t.is_empty()).then_some(t)
        })
        .collect()
}

/// Token-level F1 between normalized token multisets.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_tokens(prediction);
    let g = normalize_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut gold_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *gold_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = gold_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn matches_marker(text: &str, markers: &[&str]) -> bool {
    let toks = normalize_tokens(text);
    markers.iter().any(|m| normalize_tokens(m) == toks)
}

/// Grade a prediction against gold.
///
/// Gold marked unknown: only an abstention grades correct, anything
/// substantive is a hallucination. Otherwise: empty or abstaining
/// predictions grade unknown, and token-F1 against the threshold separates
/// correct from hallucination.
pub fn grade_answer(prediction: &str, gold: &str, markers: &[&str]) -> (Grade, f64) {
    let f1 = token_f1(prediction, gold);
    if matches_marker(gold, markers) {
        if matches_marker(prediction, markers) {
            return (Grade::Correct, 1.0);
        }
        if normalize_tokens(prediction).is_empty() {
            return (Grade::Unknown, 0.0);
        }
        return (Grade::Hallucination, f1);
    }
    if normalize_tokens(prediction).is_empty() || matches_marker(prediction, markers) {
        return (Grade::Unknown, f1);
    }
    if f1 >= tol::GRADE_TAU {
        (Grade::Correct, f1)
    } else {
        (Grade::Hallucination, f1)
    }
}

/// One (example, QA pair, press, regime, alpha) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub example_id: String,
    pub task: String,
    pub qa_index: usize,
    pub press: PressKind,
    pub regime: Regime,
    pub alpha: f64,
    pub seq_len: usize,
    pub eviction_rate: f64,
    pub ger: f64,
    pub answer_reachable: bool,
    pub grade: Grade,
    pub f1: f64,
    /// Per-layer consensus of the query row under the compressed attention.
    pub consensus_by_layer: Vec<f64>,
}

impl SweepRecord {
    pub fn csv_header() -> &'static str {
        "example_id,task,qa_index,press,regime,alpha,seq_len,eviction_rate,ger,answer_reachable,grade,f1,consensus_by_layer"
    }

    pub fn to_csv_row(&self) -> String {
        let consensus = self
            .consensus_by_layer
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("|");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.example_id,
            self.task,
            self.qa_index,
            self.press.as_str(),
            self.regime.as_str(),
            self.alpha,
            self.seq_len,
            self.eviction_rate,
            self.ger,
            self.answer_reachable,
            self.grade.as_str(),
            self.f1,
            consensus
        )
    }
}

/// P(F), P(E) and the conditional failure rates for E := every answer token
/// evicted everywhere (ger == 1). Failure means any grade other than
/// correct. Conditionals over empty slices are None.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureDecomposition {
    pub n: usize,
    pub p_erased: f64,
    pub p_failure: f64,
    pub p_failure_given_erased: Option<f64>,
    pub p_failure_given_intact: Option<f64>,
}

impl FailureDecomposition {
    /// Mixture identity P(F) = P(F|E)P(E) + P(F|!E)P(!E), with None terms
    /// contributing zero mass.
    pub fn mixture(&self) -> f64 {
        let e = self.p_erased;
        self.p_failure_given_erased.unwrap_or(0.0) * e
            + self.p_failure_given_intact.unwrap_or(0.0) * (1.0 - e)
    }
}

pub fn failure_decomposition(records: &[SweepRecord]) -> Result<FailureDecomposition, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let n = records.len();
    let erased: Vec<&SweepRecord> = records.iter().filter(|r| r.ger == 1.0).collect();
    let intact: Vec<&SweepRecord> = records.iter().filter(|r| r.ger != 1.0).collect();
    let fail = |rs: &[&SweepRecord]| rs.iter().filter(|r| r.grade != Grade::Correct).count();
    let cond = |rs: &[&SweepRecord]| {
        if rs.is_empty() {
            None
        } else {
            Some(fail(rs) as f64 / rs.len() as f64)
        }
    };
    Ok(FailureDecomposition {
        n,
        p_erased: erased.len() as f64 / n as f64,
        p_failure: records.iter().filter(|r| r.grade != Grade::Correct).count() as f64 / n as f64,
        p_failure_given_erased: cond(&erased),
        p_failure_given_intact: cond(&intact),
    })
}

/// Per-alpha (mean GER, hallucination rate) scatter plus their Pearson
/// correlation; None when degenerate (fewer than two alphas or no variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// (alpha, mean ger, hallucination rate)
    pub points: Vec<(f64, f64, f64)>,
    pub pearson: Option<f64>,
}

pub fn correlate_ger_hallucination(
    records: &[SweepRecord],
) -> Result<CorrelationReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut groups: BTreeMap<u64, (f64, Vec<&SweepRecord>)> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.alpha.to_bits())
            .or_insert((r.alpha, Vec::new()))
            .1
            .push(r);
    }
    let mut points: Vec<(f64, f64, f64)> = groups
        .values()
        .map(|(alpha, rs)| {
            let n = rs.len() as f64;
            let mean_ger = rs.iter().map(|r| r.ger).sum::<f64>() / n;
            let halluc =
                rs.iter().filter(|r| r.grade == Grade::Hallucination).count() as f64 / n;
            (*alpha, mean_ger, halluc)
        })
        .collect();
    points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite alpha"));
    let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    Ok(CorrelationReport {
        pearson: pearson(&xs, &ys),
        points,
    })
}

/// Aggregates of one (press, regime, alpha) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaAggregate {
    pub alpha: f64,
    pub records: usize,
    pub mean_eviction: f64,
    pub mean_ger: f64,
    pub correct_rate: f64,
    pub hallucination_rate: f64,
    pub unknown_rate: f64,
    pub reachable_rate: f64,
    pub mean_consensus_by_layer: Vec<f64>,
}

/// Per (task, press, regime) report emitted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub press: PressKind,
    pub regime: Regime,
    pub seed: u64,
    pub aggregates: Vec<AlphaAggregate>,
    /// (alpha, d hallucination_rate / d alpha)
    pub susceptibility: Vec<(f64, f64)>,
    pub ger_hallucination: CorrelationReport,
    pub failure: FailureDecomposition,
}

pub fn build_report(
    task: &str,
    press: PressKind,
    regime: Regime,
    seed: u64,
    records: &[SweepRecord],
) -> Result<MetricReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut groups: BTreeMap<u64, (f64, Vec<&SweepRecord>)> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.alpha.to_bits())
            .or_insert((r.alpha, Vec::new()))
            .1
            .push(r);
    }
    let mut aggregates: Vec<AlphaAggregate> = groups
        .values()
        .map(|(alpha, rs)| {
            let n = rs.len() as f64;
            let layers = rs.iter().map(|r| r.consensus_by_layer.len()).max().unwrap_or(0);
            let mut consensus = vec![0.0; layers];
            for r in rs.iter() {
                for (i, c) in r.consensus_by_layer.iter().enumerate() {
                    consensus[i] += c;
                }
            }
            consensus.iter_mut().for_each(|c| *c /= n);
            AlphaAggregate {
                alpha: *alpha,
                records: rs.len(),
                mean_eviction: rs.iter().map(|r| r.eviction_rate).sum::<f64>() / n,
                mean_ger: rs.iter().map(|r| r.ger).sum::<f64>() / n,
                correct_rate: rs.iter().filter(|r| r.grade == Grade::Correct).count() as f64 / n,
                hallucination_rate: rs
                    .iter()
                    .filter(|r| r.grade == Grade::Hallucination)
                    .count() as f64
                    / n,
                unknown_rate: rs.iter().filter(|r| r.grade == Grade::Unknown).count() as f64 / n,
                reachable_rate: rs.iter().filter(|r| r.answer_reachable).count() as f64 / n,
                mean_consensus_by_layer: consensus,
            }
        })
        .collect();
    aggregates.sort_by(|a, b| a.alpha.partial_cmp(&b.alpha).expect("finite alpha"));
    let curve: Vec<(f64, f64)> = aggregates
        .iter()
        .map(|a| (a.alpha, a.hallucination_rate))
        .collect();
    let susceptibility = if curve.len() >= 2 {
        susceptibility(&curve)?
    } else {
        Vec::new()
    };
    Ok(MetricReport {
        task: task.to_string(),
        press,
        regime,
        seed,
        aggregates,
        susceptibility,
        ger_hallucination: correlate_ger_hallucination(records)?,
        failure: failure_decomposition(records)?,
    })
}

/// Plot-ready CSV for one report: alpha-indexed series only, no rendering.
pub fn report_series_csv(report: &MetricReport) -> String {
    let mut out = String::from(
        "task,press,regime,alpha,mean_eviction,mean_ger,correct_rate,hallucination_rate,unknown_rate,reachable_rate,susceptibility\n",
    );
    for (agg, chi) in report.aggregates.iter().zip(
        report
            .susceptibility
            .iter()
            .map(|c| c.1.to_string())
            .chain(std::iter::repeat(String::new())),
    ) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            report.task,
            report.press.as_str(),
            report.regime.as_str(),
            agg.alpha,
            agg.mean_eviction,
            agg.mean_ger,
            agg.correct_rate,
            agg.hallucination_rate,
            agg.unknown_rate,
            agg.reachable_rate,
            chi
        );
    }
    out
}
