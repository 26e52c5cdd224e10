//! Search spaces, benchmark tables, and the synthetic ground-truth oracle.
//!
//! A [`SearchSpaceSpec`] describes a family of cells (format, size bounds,
//! op vocabulary, topology convention) and knows how to sample, mutate and
//! enumerate members. Ground truth comes either from a [`BenchmarkTable`]
//! loaded from a JSON-Lines export of a tabular benchmark, or from a
//! [`SyntheticOracle`] that scores any cell deterministically — the offline
//! stand-in that makes curriculum ablations and search experiments runnable
//! without the real benchmark files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::cellgraph::{CellFormat, CellGraph, Digest, GraphError, INPUT_OP, OUTPUT_OP};

/// Whether the edge set is a degree of freedom or fixed to the complete DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// Edge set sampled per cell (NAS-Bench-101 style).
    #[serde(rename = "free")]
    Free,
    /// Every forward edge present; only the op labels vary (NAS-Bench-201
    /// style). Required for ooe spaces.
    #[serde(rename = "dense")]
    Dense,
}

/// Declarative description of a cell search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub format: CellFormat,
    pub topology: Topology,
    pub max_nodes: usize,
    pub max_edges: usize,
    /// Interior op labels (oon) or edge op labels (ooe). Marker labels are
    /// implicit and exposed via [`SearchSpaceSpec::vocabulary`].
    pub ops: Vec<String>,
}

impl SearchSpaceSpec {
    /// 7-node, 9-edge cells with three interior op choices.
    pub fn nb101_like() -> SearchSpaceSpec {
        SearchSpaceSpec {
            format: CellFormat::Oon,
            topology: Topology::Free,
            max_nodes: 7,
            max_edges: 9,
            ops: ["conv1x1", "conv3x3", "maxpool"].map(String::from).to_vec(),
        }
    }

    /// Dense 4-node cells with five ops per edge (5^6 = 15,625 cells).
    pub fn nb201_like() -> SearchSpaceSpec {
        SearchSpaceSpec {
            format: CellFormat::Ooe,
            topology: Topology::Dense,
            max_nodes: 4,
            max_edges: 6,
            ops: ["zero", "skip", "conv1x1", "conv3x3", "avgpool"]
                .map(String::from)
                .to_vec(),
        }
    }

    /// Full op vocabulary of the encoder-facing oon view: marker labels plus
    /// the space's op labels. Defines the one-hot attribute width.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.ops.len() + 2);
        v.push(INPUT_OP.to_string());
        v.extend(self.ops.iter().cloned());
        v.push(OUTPUT_OP.to_string());
        v
    }

    /// All forward edge slots of an n-node cell, in lexicographic order.
    fn dense_slots(n: usize) -> Vec<(usize, usize)> {
        let mut slots = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                slots.push((i, j));
            }
        }
        slots
    }

    fn op_index(&self, op: &str) -> Option<usize> {
        self.ops.iter().position(|o| o == op)
    }

    /// Structural validity plus space membership (format, bounds, topology
    /// convention, vocabulary).
    pub fn check_member(&self, g: &CellGraph) -> Result<(), SpaceError> {
        if g.format != self.format {
            return Err(SpaceError::FormatMismatch { expected: self.format, found: g.format });
        }
        let report = g.validate();
        if !report.is_ok() {
            return Err(SpaceError::InvalidGraph(report.to_string()));
        }
        if g.node_count > self.max_nodes {
            return Err(SpaceError::TooManyNodes { found: g.node_count, max: self.max_nodes });
        }
        if g.edge_count() > self.max_edges {
            return Err(SpaceError::TooManyEdges { found: g.edge_count(), max: self.max_edges });
        }
        if self.topology == Topology::Dense {
            let want = Self::dense_slots(self.max_nodes);
            if g.node_count != self.max_nodes || g.edges != want {
                return Err(SpaceError::NotDense);
            }
        }
        match self.format {
            CellFormat::Oon => {
                if g.node_ops.first().map(String::as_str) != Some(INPUT_OP)
                    || g.node_ops.last().map(String::as_str) != Some(OUTPUT_OP)
                {
                    return Err(SpaceError::MissingMarkers);
                }
                for op in &g.node_ops[1..g.node_count - 1] {
                    if self.op_index(op).is_none() {
                        return Err(SpaceError::UnknownOp { op: op.clone() });
                    }
                }
            }
            CellFormat::Ooe => {
                for op in g.edge_ops.values() {
                    if self.op_index(op).is_none() {
                        return Err(SpaceError::UnknownOp { op: op.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws one valid cell. Dense spaces label every slot uniformly; free
    /// spaces rejection-sample a random forward edge set (each slot kept with
    /// probability 1/2, NAS-Bench-101 style) until the cell is valid and
    /// within the edge budget.
    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Result<CellGraph, SpaceError> {
        if self.ops.is_empty() {
            return Err(SpaceError::EmptyVocabulary);
        }
        match self.topology {
            Topology::Dense => {
                let slots = Self::dense_slots(self.max_nodes);
                if slots.len() > self.max_edges {
                    return Err(SpaceError::DenseOverBudget {
                        slots: slots.len(),
                        max: self.max_edges,
                    });
                }
                let g = match self.format {
                    CellFormat::Ooe => {
                        let edge_ops: BTreeMap<_, _> = slots
                            .iter()
                            .map(|&s| (s, self.ops[rng.gen_range(0..self.ops.len())].clone()))
                            .collect();
                        CellGraph::ooe(self.max_nodes, edge_ops)
                    }
                    CellFormat::Oon => {
                        let mut node_ops = vec![INPUT_OP.to_string()];
                        for _ in 1..self.max_nodes - 1 {
                            node_ops.push(self.ops[rng.gen_range(0..self.ops.len())].clone());
                        }
                        node_ops.push(OUTPUT_OP.to_string());
                        CellGraph::oon(self.max_nodes, slots, node_ops)
                    }
                };
                debug_assert!(self.check_member(&g).is_ok());
                Ok(g)
            }
            Topology::Free => {
                if self.format == CellFormat::Ooe {
                    return Err(SpaceError::FreeOoeUnsupported);
                }
                let n = self.max_nodes;
                let slots = Self::dense_slots(n);
                for _ in 0..10_000 {
                    let edges: Vec<_> =
                        slots.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
                    if edges.len() > self.max_edges {
                        continue;
                    }
                    let mut node_ops = vec![INPUT_OP.to_string()];
                    for _ in 1..n - 1 {
                        node_ops.push(self.ops[rng.gen_range(0..self.ops.len())].clone());
                    }
                    node_ops.push(OUTPUT_OP.to_string());
                    let g = CellGraph::oon(n, edges, node_ops);
                    if g.validate().is_ok() {
                        // Tie-break relabelling keeps the stored order canonical.
                        let g = g.canonicalize().expect("valid graph has a topological order");
                        debug_assert!(self.check_member(&g).is_ok());
                        return Ok(g);
                    }
                }
                Err(SpaceError::SamplingExhausted)
            }
        }
    }

    /// All legal single-edit neighbours of `g`: op relabels always, edge
    /// flips only in free spaces (adds within the edge budget, removals that
    /// keep the cell valid).
    fn legal_edits(&self, g: &CellGraph) -> Vec<CellGraph> {
        let mut out = Vec::new();
        match self.format {
            CellFormat::Ooe => {
                for (&slot, current) in &g.edge_ops {
                    for op in &self.ops {
                        if op != current {
                            let mut edge_ops = g.edge_ops.clone();
                            edge_ops.insert(slot, op.clone());
                            out.push(CellGraph::ooe(g.node_count, edge_ops));
                        }
                    }
                }
            }
            CellFormat::Oon => {
                for v in 1..g.node_count.saturating_sub(1) {
                    for op in &self.ops {
                        if *op != g.node_ops[v] {
                            let mut h = g.clone();
                            h.node_ops[v] = op.clone();
                            out.push(h);
                        }
                    }
                }
                if self.topology == Topology::Free {
                    for (i, j) in Self::dense_slots(g.node_count) {
                        let mut h = g.clone();
                        if g.has_edge(i, j) {
                            h.edges.retain(|&e| e != (i, j));
                        } else if g.edge_count() < self.max_edges {
                            h.edges.push((i, j));
                            h.edges.sort_unstable();
                        } else {
                            continue;
                        }
                        if h.validate().is_ok() {
                            out.push(h);
                        }
                    }
                }
            }
        }
        out
    }

    /// Uniformly picks one legal single-edit neighbour.
    pub fn mutate(&self, g: &CellGraph, rng: &mut impl Rng) -> Result<CellGraph, SpaceError> {
        self.check_member(g)?;
        let mut neighbours = self.legal_edits(g);
        if neighbours.is_empty() {
            return Err(SpaceError::NoValidNeighbour);
        }
        let pick = neighbours.swap_remove(rng.gen_range(0..neighbours.len()));
        debug_assert!(self.check_member(&pick).is_ok());
        Ok(pick)
    }

    /// Enumerates distinct members in a deterministic order, up to `limit`.
    /// Dense spaces iterate label assignments lexicographically; free spaces
    /// additionally iterate edge subsets (practical for small cells only).
    /// Architectures are deduplicated by canonical hash.
    pub fn enumerate(&self, limit: Option<usize>) -> Result<Vec<CellGraph>, SpaceError> {
        if self.ops.is_empty() {
            return Err(SpaceError::EmptyVocabulary);
        }
        let cap = limit.unwrap_or(usize::MAX);
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();

        let mut push = |g: CellGraph, out: &mut Vec<CellGraph>| -> bool {
            if seen.insert(g.canonical_hash()) {
                out.push(g);
            }
            out.len() >= cap
        };

        match (self.topology, self.format) {
            (Topology::Dense, CellFormat::Ooe) => {
                let slots = Self::dense_slots(self.max_nodes);
                let mut counter = vec![0usize; slots.len()];
                loop {
                    let edge_ops: BTreeMap<_, _> = slots
                        .iter()
                        .zip(&counter)
                        .map(|(&s, &c)| (s, self.ops[c].clone()))
                        .collect();
                    if push(CellGraph::ooe(self.max_nodes, edge_ops), &mut out) {
                        return Ok(out);
                    }
                    if !Self::advance(&mut counter, self.ops.len()) {
                        return Ok(out);
                    }
                }
            }
            (Topology::Dense, CellFormat::Oon) => {
                let slots = Self::dense_slots(self.max_nodes);
                let interior = self.max_nodes.saturating_sub(2);
                let mut counter = vec![0usize; interior];
                loop {
                    let mut node_ops = vec![INPUT_OP.to_string()];
                    node_ops.extend(counter.iter().map(|&c| self.ops[c].clone()));
                    node_ops.push(OUTPUT_OP.to_string());
                    let g = CellGraph::oon(self.max_nodes, slots.clone(), node_ops);
                    if push(g, &mut out) {
                        return Ok(out);
                    }
                    if !Self::advance(&mut counter, self.ops.len()) {
                        return Ok(out);
                    }
                }
            }
            (Topology::Free, CellFormat::Oon) => {
                let n = self.max_nodes;
                let slots = Self::dense_slots(n);
                assert!(slots.len() < 64, "free enumeration needs < 64 edge slots");
                let interior = n.saturating_sub(2);
                for mask in 0u64..(1u64 << slots.len()) {
                    if (mask.count_ones() as usize) > self.max_edges {
                        continue;
                    }
                    let edges: Vec<_> = slots
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| mask >> k & 1 == 1)
                        .map(|(_, &s)| s)
                        .collect();
                    let probe = CellGraph::oon(
                        n,
                        edges.clone(),
                        std::iter::once(INPUT_OP.to_string())
                            .chain(std::iter::repeat(self.ops[0].clone()).take(interior))
                            .chain(std::iter::once(OUTPUT_OP.to_string()))
                            .collect(),
                    );
                    if !probe.validate().is_ok() {
                        continue;
                    }
                    let mut counter = vec![0usize; interior];
                    loop {
                        let mut node_ops = vec![INPUT_OP.to_string()];
                        node_ops.extend(counter.iter().map(|&c| self.ops[c].clone()));
                        node_ops.push(OUTPUT_OP.to_string());
                        let g = CellGraph::oon(n, edges.clone(), node_ops)
                            .canonicalize()
                            .expect("valid graph has a topological order");
                        if push(g, &mut out) {
                            return Ok(out);
                        }
                        if !Self::advance(&mut counter, self.ops.len()) {
                            break;
                        }
                    }
                }
                Ok(out)
            }
            (Topology::Free, CellFormat::Ooe) => Err(SpaceError::FreeOoeUnsupported),
        }
    }

    /// Odometer increment over base-`radix` digits. Returns false on wrap.
    fn advance(counter: &mut [usize], radix: usize) -> bool {
        for digit in counter.iter_mut().rev() {
            *digit += 1;
            if *digit < radix {
                return true;
            }
            *digit = 0;
        }
        false
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum SpaceError {
    #[error("space has an empty op vocabulary")]
    EmptyVocabulary,
    #[error("expected a {expected} cell, found {found}")]
    FormatMismatch { expected: CellFormat, found: CellFormat },
    #[error("graph is not valid: {0}")]
    InvalidGraph(String),
    #[error("graph has {found} nodes, space allows {max}")]
    TooManyNodes { found: usize, max: usize },
    #[error("graph has {found} edges, space allows {max}")]
    TooManyEdges { found: usize, max: usize },
    #[error("dense-topology member must contain every forward edge")]
    NotDense,
    #[error("oon cells must begin with the input marker and end with the output marker")]
    MissingMarkers,
    #[error("op label {op:?} is not in the space vocabulary")]
    UnknownOp { op: String },
    #[error("dense topology needs {slots} edges but the space allows {max}")]
    DenseOverBudget { slots: usize, max: usize },
    #[error("free topology is only defined for oon cells")]
    FreeOoeUnsupported,
    #[error("rejection sampling failed to find a valid cell")]
    SamplingExhausted,
    #[error("no valid single-edit neighbour exists")]
    NoValidNeighbour,
}

/// One row of a benchmark table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRecord {
    pub graph: CellGraph,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

/// Ground-truth store keyed by canonical hash, preserving insertion order.
#[derive(Debug, Clone)]
pub struct BenchmarkTable {
    pub space: SearchSpaceSpec,
    records: IndexMap<Digest, TableRecord>,
}

impl BenchmarkTable {
    pub fn new(space: SearchSpaceSpec) -> BenchmarkTable {
        BenchmarkTable { space, records: IndexMap::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TableRecord> {
        self.records.values()
    }

    pub fn record_at(&self, index: usize) -> &TableRecord {
        self.records
            .get_index(index)
            .expect("index within table length")
            .1
    }

    /// Validates and inserts a record; isomorphic duplicates are rejected.
    pub fn insert(&mut self, record: TableRecord) -> Result<(), TableError> {
        self.space
            .check_member(&record.graph)
            .map_err(|e| TableError::BadRecord { reason: e.to_string() })?;
        if !(0.0..=1.0).contains(&record.accuracy) || !record.accuracy.is_finite() {
            return Err(TableError::AccuracyRange { value: record.accuracy });
        }
        let digest = record.graph.canonical_hash();
        if self.records.contains_key(&digest) {
            return Err(TableError::DuplicateArchitecture { digest });
        }
        self.records.insert(digest, record);
        Ok(())
    }

    /// Accuracy of the stored architecture isomorphic to `g`.
    pub fn lookup(&self, g: &CellGraph) -> Result<f64, TableError> {
        let digest = g.canonical_hash();
        self.records
            .get(&digest)
            .map(|r| r.accuracy)
            .ok_or(TableError::MissingArchitecture { digest })
    }

    pub fn contains(&self, g: &CellGraph) -> bool {
        self.records.contains_key(&g.canonical_hash())
    }

    /// Loads a JSON-Lines table, inferring a permissive space from the
    /// records themselves.
    pub fn load(path: impl AsRef<Path>) -> Result<BenchmarkTable, TableError> {
        let records = Self::parse_records(path.as_ref())?;
        let first = records.first().ok_or(TableError::Empty)?;
        let format = first.1.graph.format;
        let mut max_nodes = 0;
        let mut max_edges = 0;
        let mut ops = std::collections::BTreeSet::new();
        for (_, rec) in &records {
            max_nodes = max_nodes.max(rec.graph.node_count);
            max_edges = max_edges.max(rec.graph.edge_count());
            match format {
                CellFormat::Oon => {
                    for op in &rec.graph.node_ops {
                        if op != INPUT_OP && op != OUTPUT_OP {
                            ops.insert(op.clone());
                        }
                    }
                }
                CellFormat::Ooe => ops.extend(rec.graph.edge_ops.values().cloned()),
            }
        }
        // Dense if every record carries the full forward edge set.
        let dense = records.iter().all(|(_, r)| {
            r.graph.node_count == max_nodes
                && r.graph.edges == SearchSpaceSpec::dense_slots(max_nodes)
        });
        let space = SearchSpaceSpec {
            format,
            topology: if dense { Topology::Dense } else { Topology::Free },
            max_nodes,
            max_edges,
            ops: ops.into_iter().collect(),
        };
        Self::assemble(space, records)
    }

    /// Loads a JSON-Lines table and checks every record against `space`.
    pub fn load_for_space(
        path: impl AsRef<Path>,
        space: SearchSpaceSpec,
    ) -> Result<BenchmarkTable, TableError> {
        let records = Self::parse_records(path.as_ref())?;
        if records.is_empty() {
            return Err(TableError::Empty);
        }
        Self::assemble(space, records)
    }

    fn parse_records(path: &Path) -> Result<Vec<(usize, TableRecord)>, TableError> {
        let file = fs::File::open(path)?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TableRecord = serde_json::from_str(&line).map_err(|e| {
                TableError::Parse { line: idx + 1, reason: e.to_string() }
            })?;
            records.push((idx + 1, record));
        }
        Ok(records)
    }

    fn assemble(
        space: SearchSpaceSpec,
        records: Vec<(usize, TableRecord)>,
    ) -> Result<BenchmarkTable, TableError> {
        let mut table = BenchmarkTable::new(space);
        for (line, record) in records {
            table.insert(record).map_err(|e| match e {
                TableError::BadRecord { reason } => TableError::RecordAt { line, reason },
                TableError::DuplicateArchitecture { digest } => {
                    TableError::DuplicateLine { line, digest }
                }
                TableError::AccuracyRange { value } => TableError::RecordAt {
                    line,
                    reason: format!("accuracy {value} outside [0, 1]"),
                },
                other => other,
            })?;
        }
        Ok(table)
    }

    /// Writes the table as JSON Lines in insertion order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        let mut file = fs::File::create(path)?;
        for record in self.records.values() {
            serde_json::to_writer(&mut file, record)
                .map_err(|e| TableError::Parse { line: 0, reason: e.to_string() })?;
            writeln!(file)?;
        }
        Ok(())
    }

    /// Samples `count` distinct cells from `space`, scores them with the
    /// oracle, and freezes the result as a table — a reproducible synthetic
    /// population for offline experiments.
    pub fn synthesize(
        space: &SearchSpaceSpec,
        oracle: &SyntheticOracle,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<BenchmarkTable, TableError> {
        let mut table = BenchmarkTable::new(space.clone());
        let mut attempts = 0usize;
        while table.len() < count {
            attempts += 1;
            if attempts > count.saturating_mul(200) + 10_000 {
                return Err(TableError::BadRecord {
                    reason: format!(
                        "could not collect {count} distinct cells (space too small?)"
                    ),
                });
            }
            let graph = space
                .sample_uniform(rng)
                .map_err(|e| TableError::BadRecord { reason: e.to_string() })?;
            if table.contains(&graph) {
                continue;
            }
            let accuracy = oracle
                .score(&graph)
                .map_err(|e| TableError::BadRecord { reason: e.to_string() })?;
            table.insert(TableRecord { graph, accuracy, metrics: BTreeMap::new() })?;
        }
        Ok(table)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record rejected: {reason}")]
    BadRecord { reason: String },
    #[error("line {line}: {reason}")]
    RecordAt { line: usize, reason: String },
    #[error("accuracy {value} outside [0, 1]")]
    AccuracyRange { value: f64 },
    #[error("duplicate architecture {digest}")]
    DuplicateArchitecture { digest: Digest },
    #[error("line {line}: duplicate of already-stored architecture {digest}")]
    DuplicateLine { line: usize, digest: Digest },
    #[error("architecture {digest} is not in the table")]
    MissingArchitecture { digest: Digest },
    #[error("table has no records")]
    Empty,
}

/// Deterministic stand-in for benchmark ground truth.
///
/// The score of a cell is a logistic transform of a weighted sum of
/// structural features of its oon view — per-op node fractions, normalised
/// longest source-to-sink path, edge density, and the fractions of edges
/// per ordered endpoint-op pair — plus bounded noise keyed by (canonical
/// hash, seed). The pair terms make the landscape depend on local wiring,
/// not just op counts, while single edits still move the score smoothly;
/// structurally similar cells therefore score similarly, which is what
/// makes offline curriculum ablations meaningful.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticOracle {
    /// Op labels whose node counts become feature slots, in order.
    pub ops: Vec<String>,
    pub op_weights: Vec<f64>,
    pub path_weight: f64,
    pub edge_weight: f64,
    /// Interaction weights over directed edge-endpoint op pairs, indexed
    /// `pair_weights[a * v + b]` where `a`, `b` run over the pair
    /// vocabulary `[input, ops.., output]` of size `v`.
    pub pair_weights: Vec<f64>,
    /// Half-width of the uniform noise added to the logistic score.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticOracle {
    /// Derives the weight vectors from `seed` (uniform in [-2, 2] per slot).
    pub fn from_seed(space: &SearchSpaceSpec, seed: u64, noise_scale: f64) -> SyntheticOracle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op_weights = (0..space.ops.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let path_weight = rng.gen_range(-2.0..2.0);
        let edge_weight = rng.gen_range(-2.0..2.0);
        let v = space.ops.len() + 2;
        let pair_weights = (0..v * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        SyntheticOracle {
            ops: space.ops.clone(),
            op_weights,
            path_weight,
            edge_weight,
            pair_weights,
            noise_scale,
            seed,
        }
    }

    /// Index of an op label in the pair vocabulary `[input, ops.., output]`,
    /// or `None` for labels the oracle was not seeded with.
    fn pair_index(&self, op: &str) -> Option<usize> {
        if op == INPUT_OP {
            return Some(0);
        }
        if op == OUTPUT_OP {
            return Some(self.ops.len() + 1);
        }
        self.ops.iter().position(|o| o == op).map(|i| i + 1)
    }

    /// Feature vector `[fraction of nodes per op ..., longest_path/(n-1),
    /// edge density, fraction of edges per endpoint-op pair ...]` of the
    /// cell's oon view. Edges whose endpoint ops the oracle does not know
    /// contribute to no pair slot.
    pub fn features(&self, g: &CellGraph) -> Result<Vec<f64>, GraphError> {
        let view = g.oon_view()?;
        let n = view.node_count as f64;
        let v = self.ops.len() + 2;
        let mut out = Vec::with_capacity(self.ops.len() + 2 + v * v);
        for op in &self.ops {
            let count = view.node_ops.iter().filter(|o| *o == op).count();
            out.push(count as f64 / n);
        }
        out.push(view.longest_path() as f64 / (n - 1.0).max(1.0));
        let possible = n * (n - 1.0) / 2.0;
        out.push(view.edge_count() as f64 / possible.max(1.0));
        let mut pairs = vec![0.0; v * v];
        for &(from, to) in &view.edges {
            let (a, b) = (&view.node_ops[from], &view.node_ops[to]);
            if let (Some(i), Some(j)) = (self.pair_index(a), self.pair_index(b)) {
                pairs[i * v + j] += 1.0;
            }
        }
        let edges = (view.edge_count() as f64).max(1.0);
        out.extend(pairs.into_iter().map(|c| c / edges));
        Ok(out)
    }

    /// Accuracy-like score in the open interval (0, 1). Deterministic in
    /// (architecture, seed); isomorphic cells score identically.
    pub fn score(&self, g: &CellGraph) -> Result<f64, GraphError> {
        let features = self.features(g)?;
        let mut u = self.path_weight * features[self.ops.len()]
            + self.edge_weight * features[self.ops.len() + 1];
        for (w, f) in self.op_weights.iter().zip(&features) {
            u += w * f;
        }
        for (w, f) in self.pair_weights.iter().zip(&features[self.ops.len() + 2..]) {
            u += w * f;
        }
        let base = 1.0 / (1.0 + (-u).exp());
        let noise = self.noise_scale * (2.0 * self.unit_noise(g) - 1.0);
        Ok((base + noise).clamp(1e-9, 1.0 - 1e-9))
    }

    /// Uniform draw in [0, 1) keyed by the cell's canonical hash and the
    /// oracle seed.
    fn unit_noise(&self, g: &CellGraph) -> f64 {
        let mut h = Sha256::new();
        h.update(g.canonical_hash().0);
        h.update(self.seed.to_le_bytes());
        let bytes: [u8; 32] = h.finalize().into();
        let x = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        // 53 high bits -> [0, 1) double.
        (x >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Where search candidates come from: a generative space or a finite table.
#[derive(Debug, Clone, Copy)]
pub enum SampleSource<'a> {
    Space(&'a SearchSpaceSpec),
    Table(&'a BenchmarkTable),
}

impl SampleSource<'_> {
    pub fn space(&self) -> &SearchSpaceSpec {
        match self {
            SampleSource::Space(s) => s,
            SampleSource::Table(t) => &t.space,
        }
    }

    /// Number of members when the source is finite.
    pub fn size(&self) -> Option<usize> {
        match self {
            SampleSource::Space(_) => None,
            SampleSource::Table(t) => Some(t.len()),
        }
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Result<CellGraph, SpaceError> {
        match self {
            SampleSource::Space(s) => s.sample_uniform(rng),
            SampleSource::Table(t) => {
                if t.is_empty() {
                    return Err(SpaceError::SamplingExhausted);
                }
                Ok(t.record_at(rng.gen_range(0..t.len())).graph.clone())
            }
        }
    }

    pub fn mutate(&self, g: &CellGraph, rng: &mut impl Rng) -> Result<CellGraph, SpaceError> {
        self.space().mutate(g, rng)
    }
}

/// Ground truth used to settle search pools and evaluation reports.
#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    Table(&'a BenchmarkTable),
    Oracle(&'a SyntheticOracle),
}

impl GroundTruth<'_> {
    pub fn evaluate(&self, g: &CellGraph) -> Result<f64, EvaluateError> {
        match self {
            GroundTruth::Table(t) => Ok(t.lookup(g)?),
            GroundTruth::Oracle(o) => Ok(o.score(g)?),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    #[test]
    fn nb201_samples_are_valid_dense_cells() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(1);
        for _ in 0..100 {
            let g = space.sample_uniform(&mut rng).unwrap();
            assert!(g.validate().is_ok());
            assert_eq!(g.edge_count(), 6);
            assert_eq!(g.edge_ops.len(), 6, "every edge slot labelled");
            space.check_member(&g).unwrap();
        }
    }

    #[test]
    fn nb201_edge_op_marginals_are_uniform() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(2);
        // counts[slot][op]
        let slots = SearchSpaceSpec::dense_slots(4);
        let mut counts = vec![vec![0u64; space.ops.len()]; slots.len()];
        for _ in 0..10_000 {
            let g = space.sample_uniform(&mut rng).unwrap();
            for (k, slot) in slots.iter().enumerate() {
                let op = &g.edge_ops[slot];
                counts[k][space.op_index(op).unwrap()] += 1;
            }
        }
        // Aggregate chi-square across all slots (df = slots * (ops - 1)).
        let flat: Vec<u64> = counts.into_iter().flatten().collect();
        let p = testutil::chi_square_uniform_p(&flat);
        assert!(p > 0.01, "marginals not uniform: p = {p}");
    }

    #[test]
    fn nb101_samples_respect_edge_budget() {
        let space = SearchSpaceSpec::nb101_like();
        let mut rng = testutil::rng(3);
        for _ in 0..1000 {
            let g = space.sample_uniform(&mut rng).unwrap();
            assert!(g.validate().is_ok());
            assert!(g.edge_count() <= 9, "got {} edges", g.edge_count());
            space.check_member(&g).unwrap();
        }
    }

    #[test]
    fn mutate_ooe_changes_exactly_one_label() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(4);
        for _ in 0..200 {
            let g = space.sample_uniform(&mut rng).unwrap();
            let m = space.mutate(&g, &mut rng).unwrap();
            let diffs = g
                .edge_ops
                .iter()
                .filter(|(slot, op)| m.edge_ops.get(slot) != Some(op))
                .count();
            assert_eq!(diffs, 1);
        }
    }

    #[test]
    fn mutate_oon_is_a_valid_single_edit() {
        let space = SearchSpaceSpec::nb101_like();
        let mut rng = testutil::rng(5);
        for _ in 0..1000 {
            let g = space.sample_uniform(&mut rng).unwrap();
            let m = space.mutate(&g, &mut rng).unwrap();
            assert!(m.validate().is_ok());
            space.check_member(&m).unwrap();
            // Exactly one elementary edit: symmetric edge difference plus
            // op-label differences must total 1.
            let edge_diff = g
                .edges
                .iter()
                .filter(|e| !m.edges.contains(e))
                .count()
                + m.edges.iter().filter(|e| !g.edges.contains(e)).count();
            let op_diff = g
                .node_ops
                .iter()
                .zip(&m.node_ops)
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(edge_diff + op_diff, 1, "edges {edge_diff}, ops {op_diff}");
        }
    }

    #[test]
    fn enumerate_nb201_yields_exactly_15625_cells() {
        let space = SearchSpaceSpec::nb201_like();
        let cells = space.enumerate(None).unwrap();
        assert_eq!(cells.len(), 5usize.pow(6));
        let hashes: std::collections::HashSet<_> =
            cells.iter().map(|g| g.canonical_hash()).collect();
        assert_eq!(hashes.len(), cells.len(), "all enumerated cells distinct");
    }

    #[test]
    fn enumerate_respects_limit() {
        let space = SearchSpaceSpec::nb201_like();
        assert_eq!(space.enumerate(Some(100)).unwrap().len(), 100);
    }

    #[test]
    fn enumerate_free_space_is_deduplicated_and_valid() {
        let space = SearchSpaceSpec {
            format: CellFormat::Oon,
            topology: Topology::Free,
            max_nodes: 4,
            max_edges: 6,
            ops: vec!["a".into(), "b".into()],
        };
        let cells = space.enumerate(None).unwrap();
        assert!(!cells.is_empty());
        let hashes: std::collections::HashSet<_> =
            cells.iter().map(|g| g.canonical_hash()).collect();
        assert_eq!(hashes.len(), cells.len());
        for g in &cells {
            space.check_member(g).unwrap();
        }
    }

    #[test]
    fn table_lookup_by_isomorphism() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(6);
        let g = space.sample_uniform(&mut rng).unwrap();
        let mut table = BenchmarkTable::new(space);
        table
            .insert(TableRecord { graph: g.clone(), accuracy: 0.9434, metrics: BTreeMap::new() })
            .unwrap();
        assert_eq!(table.lookup(&g).unwrap(), 0.9434);

        // A relabelled isomorphic copy resolves to the same record.
        let relabelled = testutil::permute_nodes(&g, &mut rng).canonicalize().unwrap();
        assert_eq!(table.lookup(&relabelled).unwrap(), 0.9434);
    }

    #[test]
    fn table_missing_architecture_error_names_the_hash() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(7);
        let g = space.sample_uniform(&mut rng).unwrap();
        let table = BenchmarkTable::new(space);
        let err = table.lookup(&g).unwrap_err();
        assert!(err.to_string().contains(&g.canonical_hash().to_hex()));
    }

    #[test]
    fn table_rejects_duplicates_and_bad_accuracy() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(8);
        let g = space.sample_uniform(&mut rng).unwrap();
        let mut table = BenchmarkTable::new(space);
        let rec = |acc| TableRecord { graph: g.clone(), accuracy: acc, metrics: BTreeMap::new() };
        assert!(matches!(
            table.insert(rec(1.25)),
            Err(TableError::AccuracyRange { .. })
        ));
        table.insert(rec(0.5)).unwrap();
        assert!(matches!(
            table.insert(rec(0.6)),
            Err(TableError::DuplicateArchitecture { .. })
        ));
    }

    #[test]
    fn table_round_trips_through_jsonl() {
        let space = SearchSpaceSpec::nb201_like();
        let oracle = SyntheticOracle::from_seed(&space, 9, 0.01);
        let mut rng = testutil::rng(9);
        let table = BenchmarkTable::synthesize(&space, &oracle, 20, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.jsonl");
        table.save(&path).unwrap();

        let loaded = BenchmarkTable::load(&path).unwrap();
        assert_eq!(loaded.len(), 20);
        for rec in table.iter() {
            assert_eq!(loaded.lookup(&rec.graph).unwrap(), rec.accuracy);
        }
        // Inferred space recognises the dense ooe layout.
        assert_eq!(loaded.space.topology, Topology::Dense);
        assert_eq!(loaded.space.format, CellFormat::Ooe);
    }

    #[test]
    fn table_load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        std::fs::write(&path, "{\"graph\": 3}\n").unwrap();
        let err = BenchmarkTable::load(&path).unwrap_err();
        assert!(err.to_string().starts_with("line 1:"), "{err}");
    }

    #[test]
    fn table_load_rejects_isomorphic_duplicate_lines() {
        let space = SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(10);
        let g = space.sample_uniform(&mut rng).unwrap();
        let iso = testutil::permute_nodes(&g, &mut rng).canonicalize().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let mut text = String::new();
        for graph in [&g, &iso] {
            text.push_str(
                &serde_json::to_string(&TableRecord {
                    graph: graph.clone(),
                    accuracy: 0.5,
                    metrics: BTreeMap::new(),
                })
                .unwrap(),
            );
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let err = BenchmarkTable::load(&path).unwrap_err();
        assert!(matches!(err, TableError::DuplicateLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn oracle_zero_weights_score_half() {
        let space = SearchSpaceSpec::nb201_like();
        let oracle = SyntheticOracle {
            ops: space.ops.clone(),
            op_weights: vec![0.0; space.ops.len()],
            path_weight: 0.0,
            edge_weight: 0.0,
            pair_weights: vec![0.0; (space.ops.len() + 2).pow(2)],
            noise_scale: 0.0,
            seed: 0,
        };
        let mut rng = testutil::rng(11);
        for _ in 0..20 {
            let g = space.sample_uniform(&mut rng).unwrap();
            assert_eq!(oracle.score(&g).unwrap(), 0.5);
        }
    }

    #[test]
    fn oracle_matches_independent_recomputation() {
        // Fixed test vector: 4-node oon chain with one conv and one pool
        // node, hand-scored from the feature definition.
        let g = CellGraph::oon(
            4,
            vec![(0, 1), (1, 2), (2, 3), (0, 2)],
            vec![INPUT_OP.into(), "conv".into(), "pool".into(), OUTPUT_OP.into()],
        );
        let mut pair_weights = vec![0.0; 16];
        // Pair vocabulary [input, conv, pool, output]: weight the
        // input→conv and conv→pool edges.
        pair_weights[0 * 4 + 1] = 0.5;
        pair_weights[1 * 4 + 2] = -0.25;
        let oracle = SyntheticOracle {
            ops: vec!["conv".into(), "pool".into()],
            op_weights: vec![1.0, -0.5],
            path_weight: 0.75,
            edge_weight: 0.25,
            pair_weights,
            noise_scale: 0.0,
            seed: 0,
        };
        // features: conv 1/4, pool 1/4, longest path 3/3, density 4/6;
        // edges input→conv, conv→pool, pool→output, input→pool, so the
        // weighted pairs each cover 1/4 of the edges.
        let u: f64 = 1.0 * 0.25 - 0.5 * 0.25 + 0.75 * 1.0 + 0.25 * (4.0 / 6.0)
            + 0.5 * 0.25
            - 0.25 * 0.25;
        let expected = 1.0 / (1.0 + (-u).exp());
        assert!((oracle.score(&g).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn oracle_is_deterministic_and_iso_invariant() {
        let space = SearchSpaceSpec::nb101_like();
        let oracle = SyntheticOracle::from_seed(&space, 42, 0.05);
        let oracle_again = SyntheticOracle::from_seed(&space, 42, 0.05);
        let mut rng = testutil::rng(12);
        for _ in 0..50 {
            let g = space.sample_uniform(&mut rng).unwrap();
            let s = oracle.score(&g).unwrap();
            assert_eq!(s, oracle_again.score(&g).unwrap());
            assert!(s > 0.0 && s < 1.0);
            let iso = testutil::permute_nodes(&g, &mut rng).canonicalize().unwrap();
            assert_eq!(s, oracle.score(&iso).unwrap());
        }
    }

    #[test]
    fn oracle_noise_stays_bounded() {
        let space = SearchSpaceSpec::nb201_like();
        let zero_noise = SyntheticOracle::from_seed(&space, 13, 0.0);
        let noisy = SyntheticOracle::from_seed(&space, 13, 0.02);
        let mut rng = testutil::rng(13);
        for _ in 0..100 {
            let g = space.sample_uniform(&mut rng).unwrap();
            let a = zero_noise.score(&g).unwrap();
            let b = noisy.score(&g).unwrap();
            assert!((a - b).abs() <= 0.02 + 1e-12);
        }
    }

    #[test]
    fn sample_source_table_draws_members() {
        let space = SearchSpaceSpec::nb201_like();
        let oracle = SyntheticOracle::from_seed(&space, 14, 0.0);
        let mut rng = testutil::rng(14);
        let table = BenchmarkTable::synthesize(&space, &oracle, 10, &mut rng).unwrap();
        let source = SampleSource::Table(&table);
        assert_eq!(source.size(), Some(10));
        for _ in 0..20 {
            let g = source.sample_uniform(&mut rng).unwrap();
            assert!(table.contains(&g));
        }
    }

    #[test]
    fn mutate_rejects_non_member() {
        let space = SearchSpaceSpec::nb201_like();
        let g = CellGraph::oon(2, vec![(0, 1)], vec![INPUT_OP.into(), OUTPUT_OP.into()]);
        let mut rng = testutil::rng(15);
        assert!(space.mutate(&g, &mut rng).is_err());
    }
}
