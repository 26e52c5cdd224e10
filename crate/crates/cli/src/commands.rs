//! The five subcommands. Each prepares a run context (resolved config,
//! output directory, `config-echo.json`), does its stage's work through the
//! core crate, and writes the stage artifacts documented in the README.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dclp_core::cellgraph::CellGraph;
use dclp_core::evalkit::{kendall_tau, percentile_rank, ExperimentReport, RankReport};
use dclp_core::predictor::{batch_size_rule, finetune, LabeledSample};
use dclp_core::pretrain::pretrain;
use dclp_core::search::{run_search, SearchOutcome};
use dclp_core::spaces::{
    BenchmarkTable, GroundTruth, SampleSource, SearchSpaceSpec, SyntheticOracle, TableError,
};
use dclp_core::{Encoder64, Predictor64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{stage_seed, LoadedConfig};
use crate::{
    CliError, STAGE_FINETUNE, STAGE_INIT, STAGE_PRETRAIN, STAGE_SAMPLE, STAGE_SEARCH,
};

/// A prepared run: config loaded, output directory created, echo written.
pub struct Ctx {
    pub cfg: LoadedConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn prepare(cfg: LoadedConfig, command: &str) -> Result<Ctx, CliError> {
        let out_dir = cfg.out_dir();
        fs::create_dir_all(&out_dir).map_err(|e| {
            CliError::config(format!("cannot create out_dir {}: {e}", out_dir.display()))
        })?;
        let echo = serde_json::json!({
            "command": command,
            "seed": cfg.run.seed,
            "config": cfg.resolved,
            "config_digest": cfg.digest,
            "version": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
        });
        let path = out_dir.join("config-echo.json");
        fs::write(&path, serde_json::to_string_pretty(&echo).expect("echo serializes"))
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(Ctx { cfg, out_dir })
    }

    fn rng(&self, stage: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stage_seed(self.cfg.run.seed, stage))
    }
}

/// Loads a benchmark table, classifying failures: an unreadable path is a
/// config problem (exit 2), a malformed or inconsistent file is a bad
/// artifact (exit 3).
fn load_table(path: &Path) -> Result<BenchmarkTable, CliError> {
    BenchmarkTable::load(path).map_err(|e| match e {
        TableError::Io(e) => {
            CliError::config(format!("cannot read table {}: {e}", path.display()))
        }
        other => CliError::artifact(format!("table {}: {other}", path.display())),
    })
}

/// Artifact compatibility: every op the table uses must exist in the
/// encoder's vocabulary, or embedding the graphs is impossible.
fn check_vocabulary(vocabulary: &[String], table: &BenchmarkTable) -> Result<(), CliError> {
    let known: HashSet<&str> = vocabulary.iter().map(String::as_str).collect();
    for rec in table.iter() {
        for op in rec.graph.vocabulary_view() {
            if !known.contains(op.as_str()) {
                return Err(CliError::artifact(format!(
                    "shape echo mismatch: labels use op {op:?} but the encoder vocabulary is \
                     {vocabulary:?}"
                )));
            }
        }
    }
    Ok(())
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<(), CliError> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", epoch + 1, loss));
    }
    fs::write(path, out)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json serializes"))
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Samples `count` distinct cells (by canonical hash) from the space.
fn sample_corpus(
    space: &SearchSpaceSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CellGraph>, CliError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count.saturating_mul(200) + 10_000 {
            return Err(CliError::config(format!(
                "space too small to sample {count} distinct cells (found {})",
                out.len()
            )));
        }
        let g = space
            .sample_uniform(rng)
            .map_err(|e| CliError::config(format!("space cannot be sampled: {e}")))?;
        if seen.insert(g.canonical_hash()) {
            out.push(g);
        }
    }
    Ok(out)
}

pub fn run_pretrain(ctx: &Ctx) -> Result<(), CliError> {
    let run = &ctx.cfg.run;
    let space = run.space.resolve()?;
    let corpus = match &run.pretrain.corpus_file {
        Some(file) => {
            let path = ctx.cfg.path(file);
            let table = load_table(&path)?;
            check_vocabulary(&space.vocabulary(), &table)
                .map_err(|_| CliError::artifact(format!(
                    "corpus {} uses ops outside space.ops", path.display()
                )))?;
            table.iter().map(|r| r.graph.clone()).collect()
        }
        None => sample_corpus(&space, run.pretrain.corpus_size, &mut ctx.rng(STAGE_SAMPLE))?,
    };

    let encoder = Encoder64::new(
        space.vocabulary(),
        run.pretrain.hidden,
        run.pretrain.layers,
        &mut ctx.rng(STAGE_INIT),
    );
    let outcome = pretrain(
        &corpus,
        encoder,
        &run.curriculum.resolve()?,
        &run.pretrain.contrastive(),
        &run.pretrain.augmentation()?,
        &mut ctx.rng(STAGE_PRETRAIN),
    )
    .map_err(|e| CliError::runtime(format!("pre-training failed: {e}")))?;

    outcome
        .encoder
        .save(ctx.out_dir.join("encoder.json"))
        .map_err(|e| CliError::runtime(format!("cannot write encoder checkpoint: {e}")))?;
    write_loss_csv(&ctx.out_dir.join("pretrain_loss.csv"), &outcome.epoch_losses)?;
    let selections: Vec<serde_json::Value> = outcome
        .selections
        .iter()
        .map(|s| serde_json::to_value(s).expect("selection serializes"))
        .collect();
    let mut trace = String::new();
    for line in &selections {
        trace.push_str(&line.to_string());
        trace.push('\n');
    }
    fs::write(ctx.out_dir.join("selections.jsonl"), trace)
        .map_err(|e| CliError::runtime(format!("cannot write selection trace: {e}")))?;

    println!("pre-trained on {} cells for {} epochs", corpus.len(), outcome.epoch_losses.len());
    println!("kernel width used: {}", outcome.sigma_used);
    println!("final epoch loss: {}", outcome.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn load_encoder(path: &Path) -> Result<Encoder64, CliError> {
    Encoder64::load(path)
        .map_err(|e| CliError::artifact(format!("encoder {}: {e}", path.display())))
}

fn load_predictor(path: &Path) -> Result<Predictor64, CliError> {
    Predictor64::load(path)
        .map_err(|e| CliError::artifact(format!("predictor {}: {e}", path.display())))
}

pub fn run_finetune(ctx: &Ctx, encoder_path: &Path, labels_path: &Path) -> Result<(), CliError> {
    let run = &ctx.cfg.run;
    let encoder = load_encoder(encoder_path)?;
    let table = load_table(labels_path)?;
    check_vocabulary(&encoder.vocabulary, &table)?;

    let samples: Vec<LabeledSample> = table
        .iter()
        .map(|r| LabeledSample { graph: r.graph.clone(), accuracy: r.accuracy })
        .collect();
    let batch = batch_size_rule(samples.len());
    let outcome = finetune(encoder, &samples, &run.finetune.resolve()?, &mut ctx.rng(STAGE_FINETUNE))
        .map_err(|e| CliError::runtime(format!("fine-tuning failed: {e}")))?;

    outcome
        .predictor
        .save(ctx.out_dir.join("predictor.json"))
        .map_err(|e| CliError::runtime(format!("cannot write predictor checkpoint: {e}")))?;
    write_loss_csv(&ctx.out_dir.join("finetune_loss.csv"), &outcome.epoch_losses)?;

    println!("fine-tuned on {} labels (batch size {batch})", samples.len());
    println!(
        "best epoch {} of {}{}",
        outcome.best_epoch,
        outcome.epoch_losses.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

pub fn run_eval(ctx: &Ctx, predictor_path: &Path, labels_path: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let predictor = load_predictor(predictor_path)?;
    let table = load_table(labels_path)?;
    check_vocabulary(&predictor.encoder.vocabulary, &table)?;

    let graphs: Vec<CellGraph> = table.iter().map(|r| r.graph.clone()).collect();
    let truth: Vec<f64> = table.iter().map(|r| r.accuracy).collect();
    let pred = predictor
        .predict(&graphs)
        .map_err(|e| CliError::runtime(format!("prediction failed: {e}")))?;
    let tau = kendall_tau(&pred, &truth)
        .map_err(|e| CliError::runtime(format!("rank correlation failed: {e}")))?;

    let report = ExperimentReport {
        seed: ctx.cfg.run.seed,
        config_digest: ctx.cfg.digest.clone(),
        rank: RankReport { tau, n: graphs.len(), percentile: None, query_budget: 0 },
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(
        &ctx.out_dir.join("report.json"),
        &serde_json::to_value(&report).expect("report serializes"),
    )?;
    println!("tau {tau}");
    Ok(())
}

/// Census cap for percentile reporting on enumerable spaces; spaces larger
/// than this report no percentile rather than a biased one.
const ENUMERATION_CAP: usize = 100_000;

pub fn run_search(
    ctx: &Ctx,
    predictor_path: &Path,
    table_flag: Option<&Path>,
) -> Result<(), CliError> {
    let run = &ctx.cfg.run;
    let predictor = load_predictor(predictor_path)?;
    let search_cfg = run.search.resolve(run.seed)?;

    // Ground truth: an explicit table (flag, then config) wins; otherwise
    // the seeded synthetic oracle over the configured space.
    let table_path: Option<PathBuf> = table_flag
        .map(Path::to_path_buf)
        .or_else(|| run.eval.table.as_ref().map(|t| ctx.cfg.path(t)));
    let space = run.space.resolve()?;
    let oracle;
    let table;
    let (source, evaluator) = match &table_path {
        Some(path) => {
            table = load_table(path)?;
            check_vocabulary(&predictor.encoder.vocabulary, &table)?;
            (SampleSource::Table(&table), GroundTruth::Table(&table))
        }
        None => {
            oracle = SyntheticOracle::from_seed(&space, run.oracle.seed, run.oracle.noise);
            (SampleSource::Space(&space), GroundTruth::Oracle(&oracle))
        }
    };

    let outcome = run_search(&source, &predictor, &evaluator, &search_cfg)
        .map_err(|e| CliError::runtime(format!("search failed: {e}")))?;
    let best = outcome
        .best
        .as_ref()
        .ok_or_else(|| CliError::config("search.top_k must be at least 1".to_string()))?;
    let percentile = census_percentile(&table_path, &outcome, &source, &evaluator)?;

    let mut log = String::new();
    for line in &outcome.log {
        log.push_str(&serde_json::to_string(line).expect("log serializes"));
        log.push('\n');
    }
    fs::write(ctx.out_dir.join("search_log.jsonl"), log)
        .map_err(|e| CliError::runtime(format!("cannot write search log: {e}")))?;

    let best_json = serde_json::to_value(&best.graph).expect("graph serializes");
    write_json(
        &ctx.out_dir.join("search_report.json"),
        &serde_json::json!({
            "seed": ctx.cfg.run.seed,
            "config_digest": ctx.cfg.digest,
            "strategy": run.search.strategy,
            "best": best_json,
            "digest": best.digest.to_string(),
            "predicted": best.predicted,
            "true_score": best.true_score,
            "percentile": percentile,
            "queries": outcome.queries,
        }),
    )?;

    println!("{best_json}");
    match percentile {
        Some(p) => println!("true score {} (percentile {p}, {} queries)", best.true_score, outcome.queries),
        None => println!("true score {} ({} queries)", best.true_score, outcome.queries),
    }
    Ok(())
}

/// True-performance percentile of the found architecture over the whole
/// population: every table record, or a full enumeration of the space when
/// it is small enough to census.
fn census_percentile(
    table_path: &Option<PathBuf>,
    outcome: &SearchOutcome,
    source: &SampleSource,
    evaluator: &GroundTruth,
) -> Result<Option<f64>, CliError> {
    let best = match &outcome.best {
        Some(b) => b,
        None => return Ok(None),
    };
    let population: Vec<f64> = if table_path.is_some() {
        match source {
            SampleSource::Table(t) => t.iter().map(|r| r.accuracy).collect(),
            SampleSource::Space(_) => unreachable!("table path implies table source"),
        }
    } else {
        let cells = source
            .space()
            .enumerate(Some(ENUMERATION_CAP))
            .map_err(|e| CliError::runtime(format!("enumeration failed: {e}")))?;
        if cells.len() >= ENUMERATION_CAP {
            return Ok(None); // truncated census would bias the rank
        }
        cells
            .iter()
            .map(|g| evaluator.evaluate(g))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::runtime(format!("census scoring failed: {e}")))?
    };
    let p = percentile_rank(&population, best.true_score)
        .map_err(|e| CliError::runtime(format!("percentile failed: {e}")))?;
    Ok(Some(p))
}

pub fn run_oracle_export(ctx: &Ctx, count: usize, out: Option<&Path>) -> Result<(), CliError> {
    let run = &ctx.cfg.run;
    let space = run.space.resolve()?;
    let oracle = SyntheticOracle::from_seed(&space, run.oracle.seed, run.oracle.noise);
    let table = BenchmarkTable::synthesize(&space, &oracle, count, &mut ctx.rng(STAGE_SAMPLE))
        .map_err(|e| CliError::config(format!("cannot synthesize {count} records: {e}")))?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_dir.join("table.jsonl"));
    table
        .save(&path)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {} records to {}", table.len(), path.display());
    Ok(())
}
