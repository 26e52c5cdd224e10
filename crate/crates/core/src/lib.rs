//! Curriculum-driven contrastive pre-training (DCLP) for neural architecture
//! performance predictors, plus the search drivers that consume them.
//!
//! The crate follows the pipeline order: DAG cells ([`cellgraph`]) are drawn
//! from a search space ([`spaces`]), perturbed into positive views
//! ([`augment`]) whose distance from the origin is scored ([`difficulty`]) and
//! scheduled easy-to-hard ([`curriculum`]). A GIN encoder ([`neuralcore`]) is
//! pre-trained contrastively on those pairs ([`pretrain`]), fine-tuned into a
//! performance predictor on a few labelled cells ([`predictor`]), and the
//! result is measured ([`evalkit`]) or plugged into a search driver
//! ([`search`]).
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32`/`f64`); the `*64` aliases below are the concrete types the CLI and
//! the shipped experiments use.

pub mod augment;
pub mod cellgraph;
pub mod curriculum;
pub mod difficulty;
pub mod evalkit;
pub mod neuralcore;
pub mod predictor;
pub mod pretrain;
mod scalar;
pub mod search;
pub mod spaces;

pub use scalar::Scalar;

pub type Embedding64 = neuralcore::Embedding<f64>;
pub type Encoder64 = neuralcore::Encoder<f64>;
pub type MlpHead64 = neuralcore::MlpHead<f64>;
pub type MemoryBank64 = pretrain::MemoryBank<f64>;
pub type PretrainOutcome64 = pretrain::PretrainOutcome<f64>;
pub type Predictor64 = predictor::Predictor<f64>;
pub type FinetuneOutcome64 = predictor::FinetuneOutcome<f64>;

#[cfg(test)]
pub(crate) mod testutil;
