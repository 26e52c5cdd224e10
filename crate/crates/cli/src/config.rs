//! Run configuration: one file (TOML or JSON), layered overrides, and the
//! mapping onto the core config types.
//!
//! Precedence, lowest to highest: config file, `DCLP_*` environment
//! variables, command-line flags. The fully resolved document is echoed to
//! `config-echo.json` next to the run's artifacts so a run can be reproduced
//! from its output directory alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dclp_core::augment::{AugmentMethod, AugmentationSpec};
use dclp_core::cellgraph::CellFormat;
use dclp_core::curriculum::{CurriculumConfig, SelectionMode};
use dclp_core::predictor::{FinetuneConfig, LossKind};
use dclp_core::pretrain::ContrastiveConfig;
use dclp_core::search::{SearchConfig, SearchStrategy};
use dclp_core::spaces::{SearchSpaceSpec, Topology};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::CliError;

/// Everything a run needs, as parsed from the layered configuration.
/// `seed` is deliberately required: every stage derives its RNG streams
/// from it, and forcing it to be explicit keeps runs reproducible from the
/// config alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact directory, resolved relative to the config file.
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub curriculum: CurriculumSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

fn default_out_dir() -> String {
    "out".to_string()
}

/// The architecture search space. Defaults describe the small free-topology
/// cell space the shipped experiments use, so a minimal config only needs a
/// seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceSection {
    /// "oon" (ops on nodes) or "ooe" (ops on edges).
    pub format: String,
    /// "free" (edge set varies) or "dense" (all forward edges).
    pub topology: String,
    pub max_nodes: usize,
    pub max_edges: usize,
    /// Interior operation vocabulary (input/output markers are implicit).
    pub ops: Vec<String>,
}

impl Default for SpaceSection {
    fn default() -> SpaceSection {
        SpaceSection {
            format: "oon".into(),
            topology: "free".into(),
            max_nodes: 5,
            max_edges: 10,
            ops: vec!["conv1x1".into(), "conv3x3".into(), "maxpool".into(), "skip".into()],
        }
    }
}

impl SpaceSection {
    pub fn resolve(&self) -> Result<SearchSpaceSpec, CliError> {
        let format = match self.format.as_str() {
            "oon" => CellFormat::Oon,
            "ooe" => CellFormat::Ooe,
            other => {
                return Err(CliError::config(format!(
                    "space.format must be \"oon\" or \"ooe\", got {other:?}"
                )))
            }
        };
        let topology = match self.topology.as_str() {
            "free" => Topology::Free,
            "dense" => Topology::Dense,
            other => {
                return Err(CliError::config(format!(
                    "space.topology must be \"free\" or \"dense\", got {other:?}"
                )))
            }
        };
        if self.ops.is_empty() {
            return Err(CliError::config("space.ops must list at least one operation"));
        }
        Ok(SearchSpaceSpec {
            format,
            topology,
            max_nodes: self.max_nodes,
            max_edges: self.max_edges,
            ops: self.ops.clone(),
        })
    }
}

/// Pre-training stage: corpus source, encoder shape, and the contrastive
/// optimizer. Numeric defaults mirror [`ContrastiveConfig::default`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Unlabeled cells sampled from the space when no corpus file is given.
    pub corpus_size: usize,
    /// Optional benchmark-table JSON Lines file; its graphs become the
    /// corpus (accuracies are ignored). Relative to the config file.
    pub corpus_file: Option<String>,
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub bank_capacity: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub rbf_sigma: f64,
    pub candidates: usize,
    /// "edge_perturbation", "attribute_masking", or "mixed".
    pub augment: String,
    /// Fixed edit ratio in [0, 1]; unset means each candidate draws its own.
    pub augment_ratio: Option<f64>,
}

impl Default for PretrainSection {
    fn default() -> PretrainSection {
        let c = ContrastiveConfig::default();
        PretrainSection {
            corpus_size: 100,
            corpus_file: None,
            hidden: 128,
            layers: 3,
            epochs: c.epochs,
            batch_size: c.batch_size,
            bank_capacity: c.bank_capacity,
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            temperature: c.temperature,
            rbf_sigma: c.rbf_sigma,
            candidates: c.candidates,
            augment: "mixed".into(),
            augment_ratio: None,
        }
    }
}

impl PretrainSection {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            rbf_sigma: self.rbf_sigma,
            bank_capacity: self.bank_capacity,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            candidates: self.candidates,
        }
    }

    pub fn augmentation(&self) -> Result<AugmentationSpec, CliError> {
        let method = match self.augment.as_str() {
            "edge_perturbation" => AugmentMethod::EdgePerturbation,
            "attribute_masking" => AugmentMethod::AttributeMasking,
            "mixed" => AugmentMethod::Mixed,
            other => {
                return Err(CliError::config(format!(
                    "pretrain.augment must be \"edge_perturbation\", \
                     \"attribute_masking\", or \"mixed\", got {other:?}"
                )))
            }
        };
        Ok(AugmentationSpec { method, ratio: self.augment_ratio, candidates: self.candidates })
    }
}

/// Temperature schedule for positive selection. `total_steps` is not
/// configurable: the pre-training loop pins it to the run's actual step
/// count. Defaults mirror [`CurriculumConfig::default`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub tau_start: f64,
    pub tau_end: f64,
    pub sigma: f64,
    pub frequency: f64,
    pub amplitude: f64,
    /// "argmax" or "stochastic".
    pub selection: String,
}

impl Default for CurriculumSection {
    fn default() -> CurriculumSection {
        let c = CurriculumConfig::default();
        CurriculumSection {
            tau_start: c.tau_start,
            tau_end: c.tau_end,
            sigma: c.sigma,
            frequency: c.frequency,
            amplitude: c.amplitude,
            selection: "argmax".into(),
        }
    }
}

impl CurriculumSection {
    pub fn resolve(&self) -> Result<CurriculumConfig, CliError> {
        let selection_mode = match self.selection.as_str() {
            "argmax" => SelectionMode::Argmax,
            "stochastic" => SelectionMode::Stochastic,
            other => {
                return Err(CliError::config(format!(
                    "curriculum.selection must be \"argmax\" or \"stochastic\", got {other:?}"
                )))
            }
        };
        Ok(CurriculumConfig {
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            sigma: self.sigma,
            frequency: self.frequency,
            amplitude: self.amplitude,
            selection_mode,
            ..CurriculumConfig::default()
        })
    }
}

/// Fine-tuning stage. Defaults mirror [`FinetuneConfig::default`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// "listmle", "mse", or "mse_norm".
    pub loss: String,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub freeze_encoder: bool,
    pub holdout_fraction: f64,
}

impl Default for FinetuneSection {
    fn default() -> FinetuneSection {
        let c = FinetuneConfig::default();
        FinetuneSection {
            loss: "listmle".into(),
            lr: c.lr,
            max_epochs: c.max_epochs,
            patience: c.patience,
            min_delta: c.min_delta,
            freeze_encoder: c.freeze_encoder,
            holdout_fraction: c.holdout_fraction,
        }
    }
}

impl FinetuneSection {
    pub fn resolve(&self) -> Result<FinetuneConfig, CliError> {
        Ok(FinetuneConfig {
            loss: parse_loss(&self.loss)?,
            lr: self.lr,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            freeze_encoder: self.freeze_encoder,
            holdout_fraction: self.holdout_fraction,
        })
    }
}

fn parse_loss(name: &str) -> Result<LossKind, CliError> {
    match name {
        "listmle" => Ok(LossKind::ListMle),
        "mse" => Ok(LossKind::Mse),
        "mse_norm" => Ok(LossKind::MseNorm),
        other => Err(CliError::config(format!(
            "finetune.loss must be \"listmle\", \"mse\", or \"mse_norm\", got {other:?}"
        ))),
    }
}

/// Search stage. Defaults mirror [`SearchConfig::default`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    /// "random", "evolution", or "rl".
    pub strategy: String,
    pub iterations: usize,
    pub samples_per_iteration: usize,
    pub top_k: usize,
    pub population: usize,
    pub max_population: usize,
    pub policy_lr: f64,
    pub baseline_decay: f64,
}

impl Default for SearchSection {
    fn default() -> SearchSection {
        let c = SearchConfig::default();
        SearchSection {
            strategy: "random".into(),
            iterations: c.iterations,
            samples_per_iteration: c.samples_per_iteration,
            top_k: c.top_k,
            population: c.population,
            max_population: c.max_population,
            policy_lr: c.policy_lr,
            baseline_decay: c.baseline_decay,
        }
    }
}

impl SearchSection {
    pub fn resolve(&self, seed: u64) -> Result<SearchConfig, CliError> {
        let strategy = match self.strategy.as_str() {
            "random" => SearchStrategy::Random,
            "evolution" => SearchStrategy::Evolution,
            "rl" => SearchStrategy::Rl,
            other => {
                return Err(CliError::config(format!(
                    "search.strategy must be \"random\", \"evolution\", or \"rl\", got {other:?}"
                )))
            }
        };
        Ok(SearchConfig {
            strategy,
            iterations: self.iterations,
            samples_per_iteration: self.samples_per_iteration,
            top_k: self.top_k,
            population: self.population,
            max_population: self.max_population,
            policy_lr: self.policy_lr,
            baseline_decay: self.baseline_decay,
            seed: stage_seed(seed, crate::STAGE_SEARCH),
        })
    }
}

/// Evaluation inputs shared by `eval` and `search`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Benchmark-table JSON Lines file used as ground truth when the
    /// subcommand is not given one explicitly. Relative to the config file.
    pub table: Option<String>,
}

/// Synthetic ground-truth scorer used by `oracle-export` and by `search`
/// when no benchmark table is available.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub seed: u64,
    pub noise: f64,
}

impl Default for OracleSection {
    fn default() -> OracleSection {
        OracleSection { seed: 0, noise: 0.01 }
    }
}

/// Distinct RNG streams per stage, all derived from the one global seed.
/// (SplitMix64 step; consecutive seeds map to unrelated streams.)
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed.wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A parsed config plus everything needed to echo and reproduce it.
pub struct LoadedConfig {
    pub run: RunConfig,
    /// Directory of the config file; relative paths resolve against it.
    pub base_dir: PathBuf,
    /// The fully layered document the run actually used.
    pub resolved: serde_json::Value,
    /// SHA-256 of the canonical resolved document.
    pub digest: String,
}

impl LoadedConfig {
    /// Resolves a config-supplied path against the config file's directory.
    pub fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path(&self.run.out_dir)
    }
}

/// Flag-level overrides (highest precedence layer).
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    /// `section.field=value` assignments from repeated `--set` flags.
    pub set: Vec<String>,
}

pub fn load(config_path: &Path, overrides: &Overrides) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliError::config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut doc = parse_document(config_path, &text)?;
    apply_env_overrides(&mut doc, std::env::vars())?;
    apply_flag_overrides(&mut doc, overrides)?;

    let run: RunConfig = serde_json::from_value(doc.clone())
        .map_err(|e| CliError::config(format!("invalid config: {e}")))?;
    // Re-serialize the typed config so the echoed document carries every
    // field, defaults included.
    let resolved = serde_json::to_value(&run).expect("config serializes");
    let canonical = serde_json::to_vec(&resolved).expect("config serializes");
    let digest = format!("{:x}", Sha256::digest(&canonical));
    let base_dir = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig { run, base_dir, resolved, digest })
}

fn parse_document(path: &Path, text: &str) -> Result<serde_json::Value, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "json" => serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("invalid JSON config: {e}"))),
        "toml" => toml_to_json(text),
        _ => {
            // Extension gives no hint; accept either syntax.
            serde_json::from_str(text).or_else(|json_err| {
                toml_to_json(text).map_err(|toml_err| {
                    CliError::config(format!(
                        "config is neither valid JSON ({json_err}) nor valid TOML ({toml_err})"
                    ))
                })
            })
        }
    }
}

fn toml_to_json(text: &str) -> Result<serde_json::Value, CliError> {
    let value: toml::Value =
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid TOML config: {e}")))?;
    serde_json::to_value(value).map_err(|e| CliError::config(format!("invalid config: {e}")))
}

const SECTIONS: [&str; 7] =
    ["space", "pretrain", "curriculum", "finetune", "search", "eval", "oracle"];

/// Applies `DCLP_*` environment variables: `DCLP_SEED`, `DCLP_OUT_DIR`, and
/// `DCLP_<SECTION>_<FIELD>` (e.g. `DCLP_PRETRAIN_EPOCHS=10`). Values parse
/// as JSON when possible and fall back to strings, so numbers, booleans,
/// and arrays all work.
fn apply_env_overrides(
    doc: &mut serde_json::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<(), CliError> {
    // Sort for a deterministic application order (last write would win).
    let mut pending: BTreeMap<String, String> = BTreeMap::new();
    for (key, value) in vars {
        if let Some(rest) = key.strip_prefix("DCLP_") {
            pending.insert(rest.to_string(), value);
        }
    }
    for (key, value) in pending {
        let parsed = parse_scalar(&value);
        if key == "SEED" {
            set_path(doc, &["seed"], parsed);
            continue;
        }
        if key == "OUT_DIR" {
            set_path(doc, &["out_dir"], parsed);
            continue;
        }
        let Some((section, field)) = key.split_once('_') else {
            return Err(CliError::config(format!(
                "environment variable DCLP_{key} does not name a config field \
                 (expected DCLP_SEED, DCLP_OUT_DIR, or DCLP_<SECTION>_<FIELD>)"
            )));
        };
        let section = section.to_ascii_lowercase();
        if !SECTIONS.contains(&section.as_str()) {
            return Err(CliError::config(format!(
                "environment variable DCLP_{key}: unknown section {section:?}"
            )));
        }
        let field = field.to_ascii_lowercase();
        set_path(doc, &[&section, &field], parsed);
    }
    Ok(())
}

fn apply_flag_overrides(doc: &mut serde_json::Value, ov: &Overrides) -> Result<(), CliError> {
    if let Some(seed) = ov.seed {
        set_path(doc, &["seed"], serde_json::json!(seed));
    }
    if let Some(out_dir) = &ov.out_dir {
        set_path(doc, &["out_dir"], serde_json::json!(out_dir));
    }
    for assignment in &ov.set {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(CliError::config(format!(
                "--set {assignment:?} is not of the form section.field=value"
            )));
        };
        let segments: Vec<&str> = key.split('.').collect();
        let valid = match segments.as_slice() {
            [top] => *top == "seed" || *top == "out_dir",
            [section, _field] => SECTIONS.contains(section),
            _ => false,
        };
        if !valid {
            return Err(CliError::config(format!(
                "--set key {key:?} does not name a config field"
            )));
        }
        set_path(doc, &segments, parse_scalar(value));
    }
    Ok(())
}

/// JSON if it parses, string otherwise — `10` is a number, `mixed` a string.
fn parse_scalar(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap_or_else(|_| serde_json::Value::String(text.to_string()))
}

fn set_path(doc: &mut serde_json::Value, path: &[&str], value: serde_json::Value) {
    let mut node = doc;
    for segment in &path[..path.len() - 1] {
        if !node.is_object() {
            *node = serde_json::json!({});
        }
        node = node
            .as_object_mut()
            .expect("just ensured object")
            .entry(segment.to_string())
            .or_insert(serde_json::json!({}));
    }
    if !node.is_object() {
        *node = serde_json::json!({});
    }
    node.as_object_mut()
        .expect("just ensured object")
        .insert(path[path.len() - 1].to_string(), value);
}
