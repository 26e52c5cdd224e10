//! Ranking metrics and experiment reporting: tie-corrected Kendall's Tau,
//! percentile rank of a chosen architecture, and the small report/CSV
//! plumbing the evaluation harness emits.
//!
//! `kendall_tau` runs in O(n log n) (sort + merge counting); the quadratic
//! pair-counting [`kendall_tau_bruteforce`] stays public as the reference
//! the fast path is checked against, pair for pair.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least two scores, got {0}")]
    TooFewScores(usize),
    #[error("score vectors differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("all {side} scores are tied; tau denominator is undefined")]
    AllTied { side: &'static str },
    #[error("scores contain a non-comparable value (NaN)")]
    NonComparable,
    #[error("empty population")]
    EmptyPopulation,
}

/// Ranking outcome of one evaluation: tie-corrected correlation, sample
/// count, optional percentile of a chosen architecture, and how many
/// ground-truth queries the run spent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub tau: f64,
    pub n: usize,
    pub percentile: Option<f64>,
    pub query_budget: usize,
}

impl RankReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.tau.is_finite() && self.tau.abs() <= 1.0 + 1e-12) {
            return Err(EvalError::NonComparable);
        }
        Ok(())
    }
}

/// Full record of one experiment, serialized as the run's JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config_digest: String,
    #[serde(flatten)]
    pub rank: RankReport,
    pub wall_time_s: f64,
}

fn ensure_comparable<T: PartialOrd>(values: &[T]) -> Result<(), EvalError> {
    // Only NaN fails self-comparison; any other PartialOrd value is fine.
    if values.iter().any(|v| v.partial_cmp(v).is_none()) {
        return Err(EvalError::NonComparable);
    }
    Ok(())
}

fn cmp<T: PartialOrd>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).expect("inputs pre-checked comparable")
}

/// Tie-corrected (tau-b) Kendall rank correlation,
/// `(C − D) / √((C + D + T_pred)(C + D + T_true))`, where `T_pred`/`T_true`
/// count pairs tied only on that side. O(n log n): concordance is counted
/// by sorting on the predicted scores and merge-counting inversions of the
/// true scores.
pub fn kendall_tau<A, B>(pred: &[A], truth: &[B]) -> Result<f64, EvalError>
where
    A: PartialOrd + Copy,
    B: PartialOrd + Copy,
{
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.len() < 2 {
        return Err(EvalError::TooFewScores(pred.len()));
    }
    ensure_comparable(pred)?;
    ensure_comparable(truth)?;
    let n = pred.len();

    // Order by predicted score, ties by true score: pred-tied runs are then
    // sorted on truth and contribute no inversions below.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| cmp(&pred[a], &pred[b]).then_with(|| cmp(&truth[a], &truth[b])));

    let tied_pair_count = |group: u64| group * (group - 1) / 2;

    // Pairs tied on pred (n1) and tied on both (n3), from the sorted order.
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    let mut pred_run = 1u64;
    let mut both_run = 1u64;
    for w in idx.windows(2) {
        let pred_tie = cmp(&pred[w[0]], &pred[w[1]]) == Ordering::Equal;
        let both_tie = pred_tie && cmp(&truth[w[0]], &truth[w[1]]) == Ordering::Equal;
        if pred_tie {
            pred_run += 1;
        } else {
            n1 += tied_pair_count(pred_run);
            pred_run = 1;
        }
        if both_tie {
            both_run += 1;
        } else {
            n3 += tied_pair_count(both_run);
            both_run = 1;
        }
    }
    n1 += tied_pair_count(pred_run);
    n3 += tied_pair_count(both_run);

    // Pairs tied on truth (n2), from the truth multiset alone.
    let mut sorted_truth: Vec<B> = truth.to_vec();
    sorted_truth.sort_by(cmp);
    let mut n2 = 0u64;
    let mut truth_run = 1u64;
    for w in sorted_truth.windows(2) {
        if cmp(&w[0], &w[1]) == Ordering::Equal {
            truth_run += 1;
        } else {
            n2 += tied_pair_count(truth_run);
            truth_run = 1;
        }
    }
    n2 += tied_pair_count(truth_run);

    // Discordant pairs = inversions of the true scores in pred order
    // (stable merge keeps ties inversion-free on both sides).
    let mut ordered_truth: Vec<B> = idx.iter().map(|&i| truth[i]).collect();
    let swaps = merge_count(&mut ordered_truth);

    let n0 = tied_pair_count(n as u64);
    let strict_both = n0 - n1 - n2 + n3;
    let numerator = strict_both as i64 - 2 * swaps as i64; // C − D
    let denom_pred = n0 - n1; // C + D + T_true
    let denom_truth = n0 - n2; // C + D + T_pred
    if denom_pred == 0 {
        return Err(EvalError::AllTied { side: "predicted" });
    }
    if denom_truth == 0 {
        return Err(EvalError::AllTied { side: "true" });
    }
    Ok(numerator as f64 / (denom_truth as f64 * denom_pred as f64).sqrt())
}

/// Counts pairs i < j with `values[i] > values[j]` while merge-sorting in
/// place; equal elements never count.
fn merge_count<T: PartialOrd + Copy>(values: &mut [T]) -> u64 {
    let n = values.len();
    let mut buffer = values.to_vec();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        for start in (0..n).step_by(2 * width) {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if cmp(&values[j], &values[i]) == Ordering::Less {
                    swaps += (mid - i) as u64;
                    buffer[k] = values[j];
                    j += 1;
                } else {
                    buffer[k] = values[i];
                    i += 1;
                }
                k += 1;
            }
            buffer[k..k + (mid - i)].copy_from_slice(&values[i..mid]);
            buffer[k + (mid - i)..end].copy_from_slice(&values[j..end]);
        }
        values.copy_from_slice(&buffer);
        width *= 2;
    }
    swaps
}

/// Quadratic pair-counting reference for `kendall_tau`; the fast path must
/// agree with this exactly, including on tied inputs.
pub fn kendall_tau_bruteforce<A, B>(pred: &[A], truth: &[B]) -> Result<f64, EvalError>
where
    A: PartialOrd + Copy,
    B: PartialOrd + Copy,
{
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.len() < 2 {
        return Err(EvalError::TooFewScores(pred.len()));
    }
    ensure_comparable(pred)?;
    ensure_comparable(truth)?;

    let (mut c, mut d, mut t_pred, mut t_true) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let dp = cmp(&pred[i], &pred[j]);
            let dt = cmp(&truth[i], &truth[j]);
            match (dp, dt) {
                (Ordering::Equal, Ordering::Equal) => {}
                (Ordering::Equal, _) => t_pred += 1,
                (_, Ordering::Equal) => t_true += 1,
                (a, b) if a == b => c += 1,
                _ => d += 1,
            }
        }
    }
    // c + d + t_true counts pairs not tied on pred; zero means pred is
    // entirely tied (and symmetrically for the other side).
    if c + d + t_true == 0 {
        return Err(EvalError::AllTied { side: "predicted" });
    }
    if c + d + t_pred == 0 {
        return Err(EvalError::AllTied { side: "true" });
    }
    let numerator = c as i64 - d as i64;
    Ok(numerator as f64 / ((c + d + t_pred) as f64 * (c + d + t_true) as f64).sqrt())
}

/// Percentile rank of `chosen` within `population`, higher scores better:
/// `100 · (count strictly better) / population size`. The optimum scores 0.
pub fn percentile_rank(population: &[f64], chosen: f64) -> Result<f64, EvalError> {
    if population.is_empty() {
        return Err(EvalError::EmptyPopulation);
    }
    if !chosen.is_finite() || population.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonComparable);
    }
    let better = population.iter().filter(|&&v| v > chosen).count();
    Ok(100.0 * better as f64 / population.len() as f64)
}

/// Median, averaging the middle pair for even counts. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

/// Midranks (1 = best score, ties averaged) of each element.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        // Positions start+1 ..= end (1-based) share the average rank.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Scatter pairs (true rank, predicted rank), midranked so exact ties land
/// between positions rather than in arbitrary order.
pub fn rank_pairs(pred: &[f64], truth: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(EvalError::NonComparable);
    }
    Ok(midranks(truth).into_iter().zip(midranks(pred)).collect())
}

/// Plot-ready CSV of [`rank_pairs`] with a `true_rank,pred_rank` header.
pub fn rank_csv(pred: &[f64], truth: &[f64]) -> Result<String, EvalError> {
    let mut out = String::from("true_rank,pred_rank\n");
    for (t, p) in rank_pairs(pred, truth)? {
        out.push_str(&format!("{t},{p}\n"));
    }
    Ok(out)
}
