//! Few-shot fine-tuning of the encoder and scoring head on labeled cells.
//!
//! Three interchangeable objectives: plain MSE on raw accuracies, MSE on
//! Z-score-normalized accuracies, and ListMLE, which maximizes the
//! likelihood of the true accuracy ordering and only cares about ranks.
//! Training runs Adam over the joint (encoder, head) parameter vector with
//! early stopping on the monitored loss; the returned predictor always
//! carries the best parameters seen, never the last ones.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgraph::{CellGraph, GraphError, MatrixEncoding};
use crate::neuralcore::{
    stack_rows, Adam, Checkpoint, Encoder, MlpHead, NetError, CHECKPOINT_VERSION,
};
use crate::scalar::Scalar;

const PREDICTOR_KIND: &str = "dclp-predictor";

/// One architecture with its measured (or synthetic) accuracy in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSample {
    pub graph: CellGraph,
    pub accuracy: f64,
}

/// Objective used during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    MseNorm,
    ListMle,
}

/// Label normalization statistics captured at fine-tune time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a `min_delta` improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Update only the head, leaving the encoder as pre-trained.
    pub freeze_encoder: bool,
    /// Fraction of the labeled set held out for early-stop monitoring.
    /// Zero (the default) monitors the training loss itself.
    pub holdout_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> FinetuneConfig {
        FinetuneConfig {
            loss: LossKind::ListMle,
            lr: 0.005,
            max_epochs: 200,
            patience: 20,
            min_delta: 1e-5,
            freeze_encoder: false,
            holdout_fraction: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.lr <= 0.0
            || self.max_epochs == 0
            || self.patience == 0
            || self.min_delta < 0.0
            || !(0.0..1.0).contains(&self.holdout_fraction)
        {
            return Err(PredictorError::BadConfig(
                "lr, max_epochs and patience must be positive; min_delta ≥ 0; \
                 holdout_fraction in [0, 1)"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("need at least {needed} labeled samples, got {got}")]
    TooFewLabels { needed: usize, got: usize },
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("labels have zero variance; Z-score normalization is undefined")]
    ZeroVariance,
    #[error("order is not a permutation of 0..{expected}")]
    NotAPermutation { expected: usize },
    #[error("lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("bad fine-tune config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Mini-batch size rule: one fifth of the labeled set, but never below 4.
/// 100 labels → 20.
pub fn batch_size_rule(n: usize) -> usize {
    n.div_ceil(5).max(4)
}

/// Z-score normalization with the population standard deviation. Returns
/// the normalized labels plus the `(mean, std)` pair needed to undo it.
pub fn zscore_normalize<F: Scalar>(labels: &[F]) -> Result<(Vec<F>, F, F), PredictorError> {
    if labels.len() < 2 {
        return Err(PredictorError::TooFewLabels { needed: 2, got: labels.len() });
    }
    let n = F::from_count(labels.len());
    let mean = labels.iter().copied().sum::<F>() / n;
    let var = labels.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
    let std = var.sqrt();
    if std <= F::zero() {
        return Err(PredictorError::ZeroVariance);
    }
    Ok((labels.iter().map(|&x| (x - mean) / std).collect(), mean, std))
}

fn check_permutation(order: &[usize], n: usize) -> Result<(), PredictorError> {
    let mut seen = vec![false; n];
    let valid = order.len() == n
        && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
    if !valid {
        return Err(PredictorError::NotAPermutation { expected: n });
    }
    Ok(())
}

/// ListMLE: negative log-likelihood of `order` (indices by descending true
/// accuracy) under the Plackett-Luce model over the scores,
/// `−Σᵢ log( exp(s_{oᵢ}) / Σ_{j≥i} exp(s_{oⱼ}) )`, with each suffix
/// normalizer evaluated as a log-sum-exp.
pub fn listmle_loss<F: Scalar>(scores: &[F], order: &[usize]) -> Result<F, PredictorError> {
    Ok(listmle_with_grad(scores, order)?.0)
}

/// ListMLE loss together with dL/d(scores).
pub fn listmle_with_grad<F: Scalar>(
    scores: &[F],
    order: &[usize],
) -> Result<(F, Vec<F>), PredictorError> {
    check_permutation(order, scores.len())?;
    let n = scores.len();
    let ordered: Vec<F> = order.iter().map(|&i| scores[i]).collect();

    // Suffix log-sum-exps, built back to front: lse[i] = LSE(ordered[i..]).
    let mut lse = vec![F::zero(); n];
    for i in (0..n).rev() {
        lse[i] = if i + 1 == n {
            ordered[i]
        } else {
            let (a, b) = (ordered[i], lse[i + 1]);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        };
    }

    let mut loss = F::zero();
    let mut grad = vec![F::zero(); n];
    for (i, &t) in ordered.iter().enumerate() {
        loss += lse[i] - t;
        // Position j's score appears in every suffix i ≤ j with softmax
        // weight exp(t_j − lse_i) ≤ 1, minus one for heading its own term.
        for (j, &u) in ordered.iter().enumerate().skip(i) {
            grad[order[j]] += (u - lse[i]).exp();
        }
        grad[order[i]] -= F::one();
    }
    Ok((loss, grad))
}

/// Mean squared error over a batch and its per-score gradient.
pub fn mse_with_grad<F: Scalar>(
    scores: &[F],
    targets: &[F],
) -> Result<(F, Vec<F>), PredictorError> {
    if scores.len() != targets.len() {
        return Err(PredictorError::LengthMismatch {
            left: scores.len(),
            right: targets.len(),
        });
    }
    let n = F::from_count(scores.len());
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); scores.len()];
    for (g, (&s, &y)) in grad.iter_mut().zip(scores.iter().zip(targets)) {
        let d = s - y;
        loss += d * d / n;
        *g = (d + d) / n;
    }
    Ok((loss, grad))
}

/// Trained scorer: encoder, head, and everything needed to reproduce its
/// outputs (loss kind and, for normalized training, the label statistics).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "F: Serialize", deserialize = "F: DeserializeOwned"))]
pub struct Predictor<F> {
    pub encoder: Encoder<F>,
    pub head: MlpHead<F>,
    pub loss: LossKind,
    pub norm: Option<NormStats>,
}

impl<F: Scalar> Predictor<F> {
    /// Scores a slice of graphs. Deterministic and isomorphism-invariant;
    /// outputs are raw head values (rank-equivalent to accuracy — use
    /// [`Predictor::denormalize`] to map a normalized-regime score back to
    /// the accuracy scale).
    pub fn predict(&self, graphs: &[CellGraph]) -> Result<Vec<F>, PredictorError> {
        let mut scores = Vec::with_capacity(graphs.len());
        for g in graphs {
            let z = self.encoder.embed(g)?;
            scores.push(self.head.forward(stack_rows(&[z]))[0]);
        }
        Ok(scores)
    }

    pub fn predict_one(&self, graph: &CellGraph) -> Result<F, PredictorError> {
        Ok(self.predict(std::slice::from_ref(graph))?[0])
    }

    /// Maps a score back to the accuracy scale (`x̄ + σ·ŷ`) when the
    /// predictor was trained on normalized labels; identity otherwise.
    pub fn denormalize(&self, score: F) -> F {
        match self.norm {
            Some(NormStats { mean, std }) => F::c(mean) + F::c(std) * score,
            None => score,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictorError>
    where
        F: Serialize,
    {
        let file = Checkpoint {
            kind: PREDICTOR_KIND.into(),
            version: CHECKPOINT_VERSION,
            payload: self,
        };
        fs::write(path, serde_json::to_string(&file).expect("predictor serializes"))
            .map_err(NetError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Predictor<F>, PredictorError>
    where
        F: DeserializeOwned,
    {
        let text = fs::read_to_string(path).map_err(NetError::from)?;
        let file: Checkpoint<Predictor<F>> = serde_json::from_str(&text)
            .map_err(|e| NetError::BadCheckpoint(e.to_string()))?;
        file.check_kind(PREDICTOR_KIND)?;
        file.payload.head.validate_shapes()?;
        Ok(file.payload)
    }
}

/// What `finetune` hands back besides the predictor itself.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome<F> {
    pub predictor: Predictor<F>,
    /// Monitored loss before any update (epoch 0 baseline).
    pub initial_loss: f64,
    /// Monitored loss after each completed epoch (full forward pass over
    /// the monitor set — the training set, or the holdout when configured).
    pub epoch_losses: Vec<f64>,
    /// Index into `epoch_losses` of the restored parameters.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub batch_size: usize,
}

/// Accuracy-descending order over `samples`, ties broken by the canonical
/// graph digest so the ranking target is deterministic.
fn descending_order(samples: &[&LabeledSample]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[b]
            .accuracy
            .partial_cmp(&samples[a].accuracy)
            .expect("accuracies are finite")
            .then_with(|| {
                samples[a]
                    .graph
                    .canonical_hash()
                    .cmp(&samples[b].graph.canonical_hash())
            })
    });
    order
}

/// Joint parameter vector in (encoder, head) layout; the encoder block is
/// omitted when frozen.
struct JointParams<F> {
    flat: Vec<F>,
    encoder_len: usize,
}

impl<F: Scalar> JointParams<F> {
    fn gather(encoder: &Encoder<F>, head: &MlpHead<F>, freeze_encoder: bool) -> JointParams<F> {
        let mut flat = if freeze_encoder { Vec::new() } else { encoder.flatten() };
        let encoder_len = flat.len();
        flat.extend(head.flatten());
        JointParams { flat, encoder_len }
    }

    fn scatter(&self, encoder: &mut Encoder<F>, head: &mut MlpHead<F>) {
        if self.encoder_len > 0 {
            encoder.assign_flat(&self.flat[..self.encoder_len]);
        }
        head.assign_flat(&self.flat[self.encoder_len..]);
    }
}

/// Fine-tunes the encoder plus a fresh Kaiming-initialized head on the
/// labeled set. Adam on the chosen loss, mini-batches of
/// [`batch_size_rule`] samples, early stopping once the monitored loss
/// stops improving by `min_delta` for `patience` epochs. The best-loss
/// parameters are restored before returning.
pub fn finetune<F: Scalar>(
    encoder: Encoder<F>,
    samples: &[LabeledSample],
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<FinetuneOutcome<F>, PredictorError> {
    cfg.validate()?;
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.accuracy)) {
        return Err(PredictorError::AccuracyOutOfRange(s.accuracy));
    }
    let batch_size = batch_size_rule(samples.len());
    let needed = match cfg.loss {
        // A ranking list shorter than the batch rule degenerates.
        LossKind::ListMle => batch_size.min(4),
        _ => 2,
    };
    if samples.len() < needed {
        return Err(PredictorError::TooFewLabels { needed, got: samples.len() });
    }

    // Split off the monitor set before anything else so the holdout never
    // leaks into training.
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    indices.shuffle(rng);
    let holdout_len = (samples.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let (monitor_idx, train_idx) = if holdout_len > 0 {
        let (m, t) = indices.split_at(holdout_len);
        if t.len() < needed {
            return Err(PredictorError::TooFewLabels { needed, got: t.len() });
        }
        (m.to_vec(), t.to_vec())
    } else {
        (indices.clone(), indices)
    };

    // Targets on the training scale; normalization statistics come from the
    // training labels alone.
    let train: Vec<&LabeledSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let monitor: Vec<&LabeledSample> = monitor_idx.iter().map(|&i| &samples[i]).collect();
    let accuracies: Vec<F> = train.iter().map(|s| F::c(s.accuracy)).collect();
    let (targets, norm) = match cfg.loss {
        LossKind::Mse | LossKind::ListMle => (accuracies, None),
        LossKind::MseNorm => {
            let (normalized, mean, std) = zscore_normalize(&accuracies)?;
            let stats =
                NormStats { mean: mean.to_f64().expect("finite"), std: std.to_f64().expect("finite") };
            (normalized, Some(stats))
        }
    };
    let monitor_targets: Vec<F> = match (&norm, cfg.loss) {
        (Some(stats), _) => monitor
            .iter()
            .map(|s| (F::c(s.accuracy) - F::c(stats.mean)) / F::c(stats.std))
            .collect(),
        _ => monitor.iter().map(|s| F::c(s.accuracy)).collect(),
    };

    let mut encoder = encoder;
    let mut head: MlpHead<F> = MlpHead::new(encoder.embed_width(), rng);
    let encodings: Vec<MatrixEncoding> = train
        .iter()
        .map(|s| Ok(s.graph.oon_view()?.encode_matrices(&encoder.vocabulary)?))
        .collect::<Result<_, PredictorError>>()?;
    let monitor_encodings: Vec<MatrixEncoding> = monitor
        .iter()
        .map(|s| Ok(s.graph.oon_view()?.encode_matrices(&encoder.vocabulary)?))
        .collect::<Result<_, PredictorError>>()?;

    let evaluate = |encoder: &Encoder<F>, head: &MlpHead<F>| -> Result<f64, PredictorError> {
        let embeddings = monitor_encodings
            .iter()
            .map(|e| encoder.forward(e))
            .collect::<Result<Vec<_>, _>>()?;
        let scores = head.forward(stack_rows(&embeddings));
        let loss = match cfg.loss {
            LossKind::ListMle => {
                let order = descending_order(&monitor);
                listmle_loss(&scores, &order)?
            }
            _ => mse_with_grad(&scores, &monitor_targets)?.0,
        };
        Ok(loss.to_f64().expect("loss is finite"))
    };

    let mut params = JointParams::gather(&encoder, &head, cfg.freeze_encoder);
    let mut adam = Adam::new(F::c(cfg.lr), params.flat.len());
    let initial_loss = evaluate(&encoder, &head)?;
    let mut best = (initial_loss, params.flat.clone(), 0usize);
    let mut epoch_losses = Vec::with_capacity(cfg.max_epochs);
    let mut patience_left = cfg.patience;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            // Forward: per-graph encoder caches, then the head over the
            // stacked batch.
            let mut caches = Vec::with_capacity(batch.len());
            let mut embeddings = Vec::with_capacity(batch.len());
            for &i in batch {
                let (z, c) = encoder.forward_cache(&encodings[i])?;
                embeddings.push(z);
                caches.push(c);
            }
            let (scores, head_cache) = head.forward_cache(stack_rows(&embeddings));

            let (_, d_scores) = match cfg.loss {
                LossKind::ListMle => {
                    let members: Vec<&LabeledSample> = batch.iter().map(|&i| train[i]).collect();
                    let order = descending_order(&members);
                    listmle_with_grad(&scores, &order)?
                }
                _ => {
                    let batch_targets: Vec<F> = batch.iter().map(|&i| targets[i]).collect();
                    mse_with_grad(&scores, &batch_targets)?
                }
            };

            let mut head_grad = head.zeros_like();
            let d_embeddings = head.backward(&head_cache, &d_scores, &mut head_grad);
            let mut flat_grad = if cfg.freeze_encoder {
                Vec::new()
            } else {
                let mut encoder_grad = encoder.zeros_like();
                for (cache, row) in caches.iter().zip(0..batch.len()) {
                    encoder.backward(cache, d_embeddings.row(row), &mut encoder_grad)?;
                }
                encoder_grad.flatten()
            };
            flat_grad.extend(head_grad.flatten());

            adam.step(&mut params.flat, &flat_grad);
            params.scatter(&mut encoder, &mut head);
        }

        let loss = evaluate(&encoder, &head)?;
        epoch_losses.push(loss);
        if loss < best.0 - cfg.min_delta {
            best = (loss, params.flat.clone(), epoch + 1);
            patience_left = cfg.patience;
        } else {
            patience_left -= 1;
            if patience_left == 0 {
                stopped_early = true;
                break;
            }
        }
    }

    params.flat = best.1;
    params.scatter(&mut encoder, &mut head);
    Ok(FinetuneOutcome {
        predictor: Predictor { encoder, head, loss: cfg.loss, norm },
        initial_loss,
        epoch_losses,
        best_epoch: best.2,
        stopped_early,
        batch_size,
    })
}
