//! Difficulty-preference scheduling.
//!
//! The temperature fluctuates along the run — a linear easy-to-hard trend
//! with a sinusoid on top, mapped through atanh/tanh so the trend can be
//! clamped safely — and candidate difficulties become selection
//! probabilities via a softmax scaled by that temperature. Negative
//! temperatures prefer easy samples, positive ones hard samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedGraph;
use crate::difficulty::{edit_difficulty, DifficultyError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Pick the most probable candidate (ties go to the lowest index).
    Argmax,
    /// Sample a candidate from the probability vector.
    Stochastic,
}

/// Schedule parameters. `tau_start` is conventionally negative (start
/// easy) and `tau_end` positive (end hard); the schedule midpoint
/// `(tau_start + tau_end) / 2` is where the temperature sits at step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    /// Slope compression fed through tanh; also the value u_t reaches at
    /// the final step.
    pub sigma: f64,
    /// Sinusoid frequency multiplier (cycles over the run = frequency/2).
    pub frequency: f64,
    /// Sinusoid damping: larger values mean smaller fluctuations.
    pub amplitude: f64,
    pub total_steps: usize,
    pub selection_mode: SelectionMode,
}

impl Default for CurriculumConfig {
    fn default() -> CurriculumConfig {
        CurriculumConfig {
            tau_start: -1.0,
            tau_end: 1.0,
            sigma: 0.9,
            frequency: 2.0,
            amplitude: 4.0,
            total_steps: 100,
            selection_mode: SelectionMode::Argmax,
        }
    }
}

/// Largest |u_t| fed into atanh; inputs beyond it are clamped so parameter
/// choices that push the sinusoid out of tanh's range degrade gracefully
/// instead of producing infinities.
const ATANH_DOMAIN: f64 = 0.999;

/// The preference temperature at step `t`.
///
/// u_t = (t/T)·σ + (σ/k)·sin(nπt/T), clamped to ±0.999, then
/// τ_t = (τ_T − τ_m)/σ · tanh(atanh(u_t)) + τ_m with τ_m the
/// start/end midpoint. Where no clamping triggers this reduces to
/// τ_m + (τ_T − τ_m)(t/T + sin(nπt/T)/k); the composition is kept literal
/// so the clamped region behaves as documented. The schedule runs over
/// t ∈ 1..=T, but the function is total — t=0 returns τ_m exactly.
pub fn temperature(cfg: &CurriculumConfig, t: usize) -> f64 {
    let ratio = t as f64 / cfg.total_steps as f64;
    let u = ratio * cfg.sigma
        + (cfg.sigma / cfg.amplitude) * (cfg.frequency * std::f64::consts::PI * ratio).sin();
    let sigma_t = u.clamp(-ATANH_DOMAIN, ATANH_DOMAIN).atanh();
    let tau_mid = (cfg.tau_start + cfg.tau_end) / 2.0;
    (cfg.tau_end - tau_mid) / cfg.sigma * sigma_t.tanh() + tau_mid
}

/// Softmax of `temperature(cfg, t) * difficulties`, max-subtracted for
/// stability. Maps candidate difficulties to selection probabilities.
pub fn selection_probabilities<F: Scalar>(
    cfg: &CurriculumConfig,
    t: usize,
    difficulties: &[F],
) -> Vec<F> {
    assert!(!difficulties.is_empty(), "no candidates to weigh");
    let tau = F::c(temperature(cfg, t));
    let scaled: Vec<F> = difficulties.iter().map(|&d| tau * d).collect();
    let max = scaled.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index selection over a difficulty vector, honoring the configured mode.
pub fn select_index<F: Scalar>(
    cfg: &CurriculumConfig,
    t: usize,
    difficulties: &[F],
    rng: &mut impl Rng,
) -> usize {
    let probs = selection_probabilities(cfg, t, difficulties);
    match cfg.selection_mode {
        SelectionMode::Argmax => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate().skip(1) {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        SelectionMode::Stochastic => {
            let draw = rng.gen::<f64>();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p.to_f64().expect("probability converts to f64");
                if draw < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Scores each candidate by its edit difficulty and selects one for the
/// step. The difficulty scale is the generic scalar so selection matches
/// whatever precision the training loop runs at.
pub fn select<F: Scalar>(
    cfg: &CurriculumConfig,
    t: usize,
    candidates: &[AugmentedGraph],
    rng: &mut impl Rng,
) -> Result<usize, DifficultyError> {
    let difficulties = candidate_difficulties::<F>(candidates)?;
    Ok(select_index(cfg, t, &difficulties, rng))
}

/// Difficulty values for a candidate batch, in order.
pub fn candidate_difficulties<F: Scalar>(
    candidates: &[AugmentedGraph],
) -> Result<Vec<F>, DifficultyError> {
    candidates
        .iter()
        .map(|c| edit_difficulty::<F>(c).map(|s| s.value))
        .collect()
}
