//! Predictor-guided search drivers: random sampling, evolutionary
//! mutation, and a REINFORCE policy over per-site op choices.
//!
//! All three share one discipline: per iteration, score `samples_per_iteration`
//! candidates with the cheap predictor and keep the top `top_k` in a
//! deduplicated candidate pool; only after the last iteration does the
//! expensive ground truth run, once per distinct pool member. Ground-truth
//! queries are therefore bounded by `top_k · iterations` regardless of
//! strategy.

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgraph::{CellFormat, CellGraph, Digest, GraphError};
use crate::predictor::Predictor;
use crate::scalar::Scalar;
use crate::spaces::{EvaluateError, GroundTruth, SampleSource, SpaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    Random,
    Evolution,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub strategy: SearchStrategy,
    /// T: predictor-guided iterations.
    pub iterations: usize,
    /// Nᵗ: candidates scored per iteration.
    pub samples_per_iteration: usize,
    /// K: candidates kept per iteration; ground-truth budget is K·T.
    pub top_k: usize,
    /// N₀: initial population size (evolution only).
    pub population: usize,
    /// Oldest individuals are evicted beyond this bound (evolution only).
    pub max_population: usize,
    /// Policy-gradient step size (rl only).
    pub policy_lr: f64,
    /// Exponential-moving-average reward baseline decay (rl only).
    pub baseline_decay: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            strategy: SearchStrategy::Random,
            iterations: 10,
            samples_per_iteration: 100,
            top_k: 5,
            population: 16,
            max_population: 64,
            policy_lr: 0.1,
            baseline_decay: 0.9,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.iterations == 0 || self.samples_per_iteration == 0 {
            return Err(SearchError::BadConfig(
                "iterations and samples_per_iteration must be ≥ 1".into(),
            ));
        }
        if self.top_k > self.samples_per_iteration {
            return Err(SearchError::BadConfig(format!(
                "top_k {} exceeds samples_per_iteration {}",
                self.top_k, self.samples_per_iteration
            )));
        }
        if self.strategy == SearchStrategy::Evolution
            && (self.population == 0 || self.max_population < self.population)
        {
            return Err(SearchError::BadConfig(
                "evolution needs population ≥ 1 and max_population ≥ population".into(),
            ));
        }
        if self.strategy == SearchStrategy::Rl
            && (self.policy_lr <= 0.0 || !(0.0..1.0).contains(&self.baseline_decay))
        {
            return Err(SearchError::BadConfig(
                "rl needs policy_lr > 0 and baseline_decay in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("bad search config: {0}")]
    BadConfig(String),
    #[error("space exhausted: wanted {needed} distinct architectures, found {got}")]
    SpaceExhausted { needed: usize, got: usize },
    #[error("prediction was not finite")]
    NonFiniteScore,
    #[error("scoring failed: {0}")]
    Score(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Anything that can cheaply score an architecture: a trained predictor in
/// the real pipeline, or the ground truth itself for perfect-predictor
/// sanity runs.
pub trait ArchScorer {
    fn score(&self, g: &CellGraph) -> Result<f64, SearchError>;
}

impl<F: Scalar> ArchScorer for Predictor<F> {
    fn score(&self, g: &CellGraph) -> Result<f64, SearchError> {
        let s = self.predict_one(g).map_err(|e| SearchError::Score(e.to_string()))?;
        s.to_f64().ok_or(SearchError::NonFiniteScore)
    }
}

impl ArchScorer for GroundTruth<'_> {
    fn score(&self, g: &CellGraph) -> Result<f64, SearchError> {
        Ok(self.evaluate(g)?)
    }
}

/// One kept candidate: where it came from and what the predictor thought.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolEntry {
    pub graph: CellGraph,
    pub digest: Digest,
    pub predicted: f64,
    pub iteration: usize,
    pub strategy: SearchStrategy,
    /// Mutation parent (evolution only); the chain always reaches an
    /// initial population member.
    pub parent: Option<Digest>,
}

/// Deduplicated candidate set bounded by K·T.
#[derive(Debug, Default)]
struct CandidatePool {
    entries: Vec<PoolEntry>,
    seen: HashSet<Digest>,
}

impl CandidatePool {
    fn try_add(&mut self, entry: PoolEntry) -> bool {
        if self.seen.insert(entry.digest) {
            self.entries.push(entry);
            true
        } else {
            false
        }
    }
}

/// One line of the per-iteration search log (serialized as JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub t: usize,
    pub sampled: usize,
    pub kept: Vec<String>,
    pub best_predicted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_entropy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestPick {
    pub graph: CellGraph,
    pub digest: Digest,
    pub predicted: f64,
    pub true_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Ground-truth argmax over the pool; `None` only for the degenerate
    /// `top_k = 0` configuration, which keeps nothing.
    pub best: Option<BestPick>,
    pub pool: Vec<PoolEntry>,
    pub log: Vec<IterationLog>,
    /// Ground-truth evaluations spent (= pool size, ≤ K·T).
    pub queries: usize,
    /// Digests of the evolution starting population (empty otherwise).
    pub initial_population: Vec<Digest>,
    /// Population remaining after the last eviction (evolution only).
    pub final_population: Vec<Digest>,
    /// Final per-site categorical logits (rl only).
    pub policy_logits: Option<Vec<Vec<f64>>>,
}

/// Dispatches on `cfg.strategy`.
pub fn run_search(
    source: &SampleSource,
    scorer: &dyn ArchScorer,
    evaluator: &GroundTruth,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    match cfg.strategy {
        SearchStrategy::Random => random_search(source, scorer, evaluator, cfg),
        SearchStrategy::Evolution => evolution_search(source, scorer, evaluator, cfg),
        SearchStrategy::Rl => rl_search(source, scorer, evaluator, cfg),
    }
}

/// Scores a batch and returns indices of the top `k`, ordered best-first.
/// Ties break on the canonical digest so runs are reproducible.
fn rank_candidates(
    scored: &[(f64, Digest)],
    k: usize,
) -> Result<Vec<usize>, SearchError> {
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(SearchError::NonFiniteScore);
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| {
        scored[b]
            .0
            .partial_cmp(&scored[a].0)
            .expect("scores checked finite")
            .then_with(|| scored[a].1.cmp(&scored[b].1))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Ground-truth pass over the pool: every distinct member is evaluated
/// exactly once and the true argmax wins (digest tie-break).
fn settle(
    pool: CandidatePool,
    evaluator: &GroundTruth,
) -> Result<(Option<BestPick>, Vec<PoolEntry>, usize), SearchError> {
    let mut best: Option<BestPick> = None;
    let mut queries = 0;
    for entry in &pool.entries {
        let true_score = evaluator.evaluate(&entry.graph)?;
        queries += 1;
        let better = match &best {
            None => true,
            Some(b) => {
                true_score > b.true_score
                    || (true_score == b.true_score && entry.digest < b.digest)
            }
        };
        if better {
            best = Some(BestPick {
                graph: entry.graph.clone(),
                digest: entry.digest,
                predicted: entry.predicted,
                true_score,
            });
        }
    }
    Ok((best, pool.entries, queries))
}

/// Predictor-based random search: each iteration samples
/// `samples_per_iteration` architectures never seen in this run, keeps the
/// predicted top-K, and the final ground-truth pass picks the winner.
pub fn random_search(
    source: &SampleSource,
    scorer: &dyn ArchScorer,
    evaluator: &GroundTruth,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen: HashSet<Digest> = HashSet::new();
    let mut pool = CandidatePool::default();
    let mut log = Vec::with_capacity(cfg.iterations);

    for t in 1..=cfg.iterations {
        // Rejection-sample distinct unseen members; a finite source makes
        // exhaustion exact, a generative one is cut off by attempt budget.
        let mut batch: Vec<(CellGraph, Digest)> = Vec::with_capacity(cfg.samples_per_iteration);
        let attempt_budget = 1000 + 200 * cfg.samples_per_iteration;
        let mut attempts = 0;
        while batch.len() < cfg.samples_per_iteration {
            if source.size().is_some_and(|total| seen.len() >= total) || attempts >= attempt_budget
            {
                return Err(SearchError::SpaceExhausted {
                    needed: cfg.samples_per_iteration,
                    got: batch.len(),
                });
            }
            attempts += 1;
            let g = source.sample_uniform(&mut rng)?;
            let digest = g.canonical_hash();
            if seen.insert(digest) {
                batch.push((g, digest));
            }
        }

        let scored = batch
            .iter()
            .map(|(g, d)| Ok((scorer.score(g)?, *d)))
            .collect::<Result<Vec<_>, SearchError>>()?;
        let top = rank_candidates(&scored, cfg.top_k)?;
        let mut kept = Vec::with_capacity(top.len());
        for &i in &top {
            kept.push(scored[i].1.to_string());
            pool.try_add(PoolEntry {
                graph: batch[i].0.clone(),
                digest: scored[i].1,
                predicted: scored[i].0,
                iteration: t,
                strategy: SearchStrategy::Random,
                parent: None,
            });
        }
        log.push(IterationLog {
            t,
            sampled: batch.len(),
            kept,
            best_predicted: top.first().map(|&i| scored[i].0),
            policy_entropy: None,
        });
    }

    let (best, entries, queries) = settle(pool, evaluator)?;
    Ok(SearchOutcome {
        best,
        pool: entries,
        log,
        queries,
        initial_population: Vec::new(),
        final_population: Vec::new(),
        policy_logits: None,
    })
}

/// Evolutionary search: mutate uniformly chosen parents, keep the predicted
/// top-K as both pool candidates and new population members, and evict the
/// oldest individuals beyond `max_population`.
pub fn evolution_search(
    source: &SampleSource,
    scorer: &dyn ArchScorer,
    evaluator: &GroundTruth,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Distinct random initial population.
    let mut population: VecDeque<(CellGraph, Digest)> = VecDeque::new();
    let mut initial_digests = HashSet::new();
    let attempt_budget = 1000 + 200 * cfg.population;
    let mut attempts = 0;
    while population.len() < cfg.population {
        if source.size().is_some_and(|total| initial_digests.len() >= total)
            || attempts >= attempt_budget
        {
            return Err(SearchError::SpaceExhausted {
                needed: cfg.population,
                got: population.len(),
            });
        }
        attempts += 1;
        let g = source.sample_uniform(&mut rng)?;
        let digest = g.canonical_hash();
        if initial_digests.insert(digest) {
            population.push_back((g, digest));
        }
    }
    let initial_population: Vec<Digest> = population.iter().map(|(_, d)| *d).collect();

    let mut pool = CandidatePool::default();
    let mut log = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        // Children of uniformly drawn parents; parents without legal edits
        // are redrawn, and a fully stuck population is a hard error.
        let mut children: Vec<(CellGraph, Digest, Digest)> =
            Vec::with_capacity(cfg.samples_per_iteration);
        while children.len() < cfg.samples_per_iteration {
            let mut stuck = 0;
            let child = loop {
                let (parent, parent_digest) = &population[rng.gen_range(0..population.len())];
                match source.mutate(parent, &mut rng) {
                    Ok(c) => break (c, *parent_digest),
                    Err(SpaceError::NoValidNeighbour) if stuck < 4 * population.len() => {
                        stuck += 1;
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            let digest = child.0.canonical_hash();
            children.push((child.0, digest, child.1));
        }

        let scored = children
            .iter()
            .map(|(g, d, _)| Ok((scorer.score(g)?, *d)))
            .collect::<Result<Vec<_>, SearchError>>()?;
        let top = rank_candidates(&scored, cfg.top_k)?;
        let mut kept = Vec::with_capacity(top.len());
        for &i in &top {
            kept.push(scored[i].1.to_string());
            pool.try_add(PoolEntry {
                graph: children[i].0.clone(),
                digest: children[i].1,
                predicted: scored[i].0,
                iteration: t,
                strategy: SearchStrategy::Evolution,
                parent: Some(children[i].2),
            });
            population.push_back((children[i].0.clone(), children[i].1));
        }
        while population.len() > cfg.max_population {
            population.pop_front();
        }
        log.push(IterationLog {
            t,
            sampled: children.len(),
            kept,
            best_predicted: top.first().map(|&i| scored[i].0),
            policy_entropy: None,
        });
    }

    let final_population = population.iter().map(|(_, d)| *d).collect();
    let (best, entries, queries) = settle(pool, evaluator)?;
    Ok(SearchOutcome {
        best,
        pool: entries,
        log,
        queries,
        initial_population,
        final_population,
        policy_logits: None,
    })
}

/// Per-site categorical policy: one logit vector per decision site —
/// interior node for op-on-node cells, forward edge for op-on-edge cells.
struct Policy {
    logits: Vec<Vec<f64>>,
    ops: Vec<String>,
    format: CellFormat,
    /// Lexicographic complete-DAG edge slots (ooe only).
    edge_slots: Vec<(usize, usize)>,
}

impl Policy {
    fn uniform(source: &SampleSource) -> Policy {
        let space = source.space();
        let (sites, edge_slots) = match space.format {
            CellFormat::Oon => (space.max_nodes.saturating_sub(2), Vec::new()),
            CellFormat::Ooe => {
                let slots: Vec<(usize, usize)> = (0..space.max_nodes)
                    .flat_map(|i| (i + 1..space.max_nodes).map(move |j| (i, j)))
                    .collect();
                (slots.len(), slots)
            }
        };
        Policy {
            logits: vec![vec![0.0; space.ops.len()]; sites],
            ops: space.ops.clone(),
            format: space.format,
            edge_slots,
        }
    }

    fn probs(&self, site: usize) -> Vec<f64> {
        let logits = &self.logits[site];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    fn sample_choice(&self, site: usize, rng: &mut impl Rng) -> usize {
        let probs = self.probs(site);
        let mut u: f64 = rng.gen_range(0.0..1.0);
        for (i, p) in probs.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Draws a topology from the source and overrides its op choices with
    /// policy samples, recording the (site, choice) actions taken.
    fn sample_graph(
        &self,
        source: &SampleSource,
        rng: &mut impl Rng,
    ) -> Result<(CellGraph, Vec<(usize, usize)>), SearchError> {
        let mut g = source.sample_uniform(rng)?;
        let mut actions = Vec::new();
        match self.format {
            CellFormat::Oon => {
                for v in 1..g.node_count.saturating_sub(1) {
                    let site = v - 1;
                    let choice = self.sample_choice(site, rng);
                    g.node_ops[v] = self.ops[choice].clone();
                    actions.push((site, choice));
                }
            }
            CellFormat::Ooe => {
                for (site, slot) in self.edge_slots.iter().enumerate() {
                    let choice = self.sample_choice(site, rng);
                    g.edge_ops.insert(*slot, self.ops[choice].clone());
                    actions.push((site, choice));
                }
            }
        }
        Ok((g, actions))
    }

    /// Mean per-site entropy of the current policy, in nats.
    fn entropy(&self) -> f64 {
        if self.logits.is_empty() {
            return 0.0;
        }
        let total: f64 = (0..self.logits.len())
            .map(|site| {
                -self
                    .probs(site)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.logits.len() as f64
    }

    /// REINFORCE update from the reinforced samples' actions: for each
    /// recorded (site, choice), logits += lr · advantage · (onehot − π),
    /// averaged over the reinforced set.
    fn reinforce(&mut self, action_sets: &[&Vec<(usize, usize)>], advantage: f64, lr: f64) {
        if action_sets.is_empty() {
            return;
        }
        let scale = lr * advantage / action_sets.len() as f64;
        for actions in action_sets {
            for &(site, choice) in *actions {
                let probs = self.probs(site);
                for (c, p) in probs.iter().enumerate() {
                    let indicator = if c == choice { 1.0 } else { 0.0 };
                    self.logits[site][c] += scale * (indicator - p);
                }
            }
        }
    }
}

/// REINFORCE policy search: sample architectures from a per-site
/// categorical policy, reward the iteration's predicted top-K mean, and
/// update the policy with a score-function step against an
/// exponential-moving-average baseline (initialized at zero).
pub fn rl_search(
    source: &SampleSource,
    scorer: &dyn ArchScorer,
    evaluator: &GroundTruth,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::uniform(source);
    let mut pool = CandidatePool::default();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut baseline = 0.0;

    for t in 1..=cfg.iterations {
        let entropy = policy.entropy();
        let mut batch = Vec::with_capacity(cfg.samples_per_iteration);
        for _ in 0..cfg.samples_per_iteration {
            let (g, actions) = policy.sample_graph(source, &mut rng)?;
            let digest = g.canonical_hash();
            batch.push((g, digest, actions));
        }

        let scored = batch
            .iter()
            .map(|(g, d, _)| Ok((scorer.score(g)?, *d)))
            .collect::<Result<Vec<_>, SearchError>>()?;
        let top = rank_candidates(&scored, cfg.top_k)?;
        let mut kept = Vec::with_capacity(top.len());
        for &i in &top {
            kept.push(scored[i].1.to_string());
            pool.try_add(PoolEntry {
                graph: batch[i].0.clone(),
                digest: batch[i].1,
                predicted: scored[i].0,
                iteration: t,
                strategy: SearchStrategy::Rl,
                parent: None,
            });
        }

        // Reward: mean predicted score of the kept set; advantage against
        // the pre-update baseline, then fold the reward into the EMA.
        if !top.is_empty() {
            let reward =
                top.iter().map(|&i| scored[i].0).sum::<f64>() / top.len() as f64;
            let advantage = reward - baseline;
            let actions: Vec<&Vec<(usize, usize)>> =
                top.iter().map(|&i| &batch[i].2).collect();
            policy.reinforce(&actions, advantage, cfg.policy_lr);
            baseline =
                cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * reward;
        }

        log.push(IterationLog {
            t,
            sampled: batch.len(),
            kept,
            best_predicted: top.first().map(|&i| scored[i].0),
            policy_entropy: Some(entropy),
        });
    }

    let (best, entries, queries) = settle(pool, evaluator)?;
    Ok(SearchOutcome {
        best,
        pool: entries,
        log,
        queries,
        initial_population: Vec::new(),
        final_population: Vec::new(),
        policy_logits: Some(policy.logits),
    })
}
