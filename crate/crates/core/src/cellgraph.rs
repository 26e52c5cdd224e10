//! DAG cell graphs: the architecture representation shared by every stage.
//!
//! Two storage conventions appear in tabular NAS benchmarks: operations on
//! nodes ("oon", NAS-Bench-101 style) and operations on edges ("ooe",
//! NAS-Bench-201 style). Everything downstream of the samplers consumes the
//! oon form; [`CellGraph::to_oon`] is the line-graph conversion for ooe
//! cells.
//!
//! Valid cells are DAGs with exactly one source, exactly one sink, and every
//! node on some source-to-sink path. Nodes are stored in topological order
//! (ties broken by in-degree, then op label), so every edge `(i, j)` has
//! `i < j` and the adjacency matrix is strictly upper-triangular.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Reserved op label for the source marker node of an oon cell.
pub const INPUT_OP: &str = "input";
/// Reserved op label for the sink marker node of an oon cell.
pub const OUTPUT_OP: &str = "output";

/// Where the operation labels live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellFormat {
    /// Operations on nodes.
    #[serde(rename = "oon")]
    Oon,
    /// Operations on edges.
    #[serde(rename = "ooe")]
    Ooe,
}

impl fmt::Display for CellFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellFormat::Oon => write!(f, "oon"),
            CellFormat::Ooe => write!(f, "ooe"),
        }
    }
}

/// A single architecture cell.
///
/// Fields are public plain data; use [`CellGraph::oon`] / [`CellGraph::ooe`]
/// to construct and [`CellGraph::validate`] to check the invariants. The
/// constructors sort edges but deliberately do not validate, so tests and
/// loaders can hold malformed graphs long enough to report on them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RawGraph", try_from = "RawGraph")]
pub struct CellGraph {
    pub format: CellFormat,
    pub node_count: usize,
    /// Directed edges `(from, to)`, sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
    /// Op label per node (oon only; empty for ooe).
    pub node_ops: Vec<String>,
    /// Op label per edge (ooe only; empty for oon).
    pub edge_ops: BTreeMap<(usize, usize), String>,
}

impl CellGraph {
    /// Builds an operations-on-nodes cell. Edges are sorted and deduplicated.
    pub fn oon(
        node_count: usize,
        mut edges: Vec<(usize, usize)>,
        node_ops: Vec<String>,
    ) -> CellGraph {
        edges.sort_unstable();
        edges.dedup();
        CellGraph {
            format: CellFormat::Oon,
            node_count,
            edges,
            node_ops,
            edge_ops: BTreeMap::new(),
        }
    }

    /// Builds an operations-on-edges cell from the labelled edge map.
    pub fn ooe(node_count: usize, edge_ops: BTreeMap<(usize, usize), String>) -> CellGraph {
        let edges: Vec<_> = edge_ops.keys().copied().collect();
        CellGraph {
            format: CellFormat::Ooe,
            node_count,
            edges,
            node_ops: Vec::new(),
            edge_ops,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.binary_search(&(from, to)).is_ok()
    }

    pub fn predecessors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |&&(_, j)| j == node)
            .map(|&(i, _)| i)
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |&&(i, _)| i == node)
            .map(|&(_, j)| j)
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.predecessors(node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.successors(node).count()
    }

    /// Checks every structural invariant and reports all violations at once.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.node_count;
        if n == 0 {
            violations.push(Violation::Empty);
            return ValidationReport { violations };
        }

        let mut well_formed_edges = true;
        for &(i, j) in &self.edges {
            if i >= n || j >= n {
                violations.push(Violation::EdgeOutOfRange { edge: (i, j) });
                well_formed_edges = false;
            } else if i == j {
                violations.push(Violation::SelfLoop { node: i });
                well_formed_edges = false;
            } else if i > j {
                // With nodes stored topologically, a back edge means the
                // ordering is broken or the graph has a cycle.
                violations.push(Violation::OrderingOrCycle { edge: (i, j) });
                well_formed_edges = false;
            }
        }
        for w in self.edges.windows(2) {
            if w[0] == w[1] {
                violations.push(Violation::DuplicateEdge { edge: w[0] });
                well_formed_edges = false;
            }
        }

        match self.format {
            CellFormat::Oon => {
                if self.node_ops.len() != n {
                    violations.push(Violation::OpArity {
                        expected: n,
                        found: self.node_ops.len(),
                        what: "node_ops",
                    });
                }
                if !self.edge_ops.is_empty() {
                    violations.push(Violation::StrayOps { what: "edge_ops" });
                }
            }
            CellFormat::Ooe => {
                if !self.node_ops.is_empty() {
                    violations.push(Violation::StrayOps { what: "node_ops" });
                }
                let keys: Vec<_> = self.edge_ops.keys().copied().collect();
                if keys != self.edges {
                    violations.push(Violation::OpArity {
                        expected: self.edges.len(),
                        found: self.edge_ops.len(),
                        what: "edge_ops",
                    });
                }
            }
        }

        if well_formed_edges {
            let sources: Vec<_> = (0..n).filter(|&v| self.in_degree(v) == 0).collect();
            let sinks: Vec<_> = (0..n).filter(|&v| self.out_degree(v) == 0).collect();
            if sources != [0] {
                violations.push(Violation::SourceCount { nodes: sources });
            }
            if sinks != [n - 1] {
                violations.push(Violation::SinkCount { nodes: sinks });
            }
            // Every node must sit on some source-to-sink path.
            let from_source = self.reachable_forward(0);
            let to_sink = self.reachable_backward(n - 1);
            for v in 0..n {
                if !(from_source[v] && to_sink[v]) {
                    violations.push(Violation::Dangling { node: v });
                }
            }
        }

        ValidationReport { violations }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    fn reachable_forward(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.node_count];
        seen[start] = true;
        // Edges are sorted with i < j, so one forward sweep settles reachability.
        for &(i, j) in &self.edges {
            if seen[i] {
                seen[j] = true;
            }
        }
        seen
    }

    fn reachable_backward(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.node_count];
        seen[start] = true;
        for &(i, j) in self.edges.iter().rev() {
            if seen[j] {
                seen[i] = true;
            }
        }
        seen
    }

    /// Relabels the nodes into the canonical topological order (Kahn's
    /// algorithm, ties broken by original in-degree, then op label, then
    /// original index). Fails on cyclic graphs.
    pub fn canonicalize(&self) -> Result<CellGraph, GraphError> {
        let n = self.node_count;
        if self.edges.iter().any(|&(i, j)| i >= n || j >= n || i == j) {
            return Err(GraphError::Invalid(self.validate()));
        }
        let mut residual = vec![0usize; n];
        let mut original = vec![0usize; n];
        for &(_, j) in &self.edges {
            residual[j] += 1;
            original[j] += 1;
        }
        let op_of = |v: usize| -> &str {
            match self.format {
                CellFormat::Oon => self.node_ops.get(v).map(String::as_str).unwrap_or(""),
                CellFormat::Ooe => "",
            }
        };

        let mut ready: Vec<usize> = (0..n).filter(|&v| residual[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while !ready.is_empty() {
            let (pos, _) = ready
                .iter()
                .enumerate()
                .min_by_key(|&(_, &v)| (original[v], op_of(v), v))
                .expect("ready set is non-empty");
            let v = ready.swap_remove(pos);
            order.push(v);
            for w in self.successors(v) {
                residual[w] -= 1;
                if residual[w] == 0 {
                    ready.push(w);
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::Cycle);
        }

        let mut new_index = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(i, j)| (new_index[i], new_index[j]))
            .collect();
        Ok(match self.format {
            CellFormat::Oon => {
                let node_ops = order.iter().map(|&old| self.node_ops[old].clone()).collect();
                CellGraph::oon(n, edges, node_ops)
            }
            CellFormat::Ooe => {
                let edge_ops = self
                    .edge_ops
                    .iter()
                    .map(|(&(i, j), op)| ((new_index[i], new_index[j]), op.clone()))
                    .collect();
                CellGraph::ooe(n, edge_ops)
            }
        })
    }

    /// Line-graph conversion of a valid ooe cell into the oon form: one op
    /// node per labelled edge (zero-style ops included), plus input and
    /// output marker nodes.
    pub fn to_oon(&self) -> Result<CellGraph, GraphError> {
        if self.format != CellFormat::Ooe {
            return Err(GraphError::WrongFormat {
                expected: CellFormat::Ooe,
                found: self.format,
            });
        }
        let report = self.validate();
        if !report.is_ok() {
            return Err(GraphError::Invalid(report));
        }

        let m = self.edges.len();
        let source = 0;
        let sink = self.node_count - 1;
        // Edge k of the ooe cell becomes node k + 1; 0 and m + 1 are markers.
        let mut node_ops = Vec::with_capacity(m + 2);
        node_ops.push(INPUT_OP.to_string());
        for e in &self.edges {
            node_ops.push(self.edge_ops[e].clone());
        }
        node_ops.push(OUTPUT_OP.to_string());

        let mut edges = Vec::new();
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            if a == source {
                edges.push((0, k + 1));
            }
            if b == sink {
                edges.push((k + 1, m + 1));
            }
            for (l, &(c, _)) in self.edges.iter().enumerate() {
                if c == b {
                    edges.push((k + 1, l + 1));
                }
            }
        }
        CellGraph::oon(m + 2, edges, node_ops).canonicalize()
    }

    /// Borrowed oon view: identity for oon cells, line-graph conversion for
    /// ooe cells. This is the form the encoder and the oracle consume.
    pub fn oon_view(&self) -> Result<Cow<'_, CellGraph>, GraphError> {
        match self.format {
            CellFormat::Oon => Ok(Cow::Borrowed(self)),
            CellFormat::Ooe => Ok(Cow::Owned(self.to_oon()?)),
        }
    }

    /// Weisfeiler-Lehman canonical hash, refined for `node_count` rounds over
    /// the (op label, labelled in-multiset, labelled out-multiset)
    /// neighbourhood signature. Isomorphic cells hash identically; for cells
    /// of benchmark size the hash separates non-isomorphic cells in practice.
    pub fn canonical_hash(&self) -> Digest {
        let n = self.node_count;
        let mut colors: Vec<[u8; 32]> = (0..n)
            .map(|v| {
                let mut h = Sha256::new();
                h.update([match self.format {
                    CellFormat::Oon => 0u8,
                    CellFormat::Ooe => 1u8,
                }]);
                if self.format == CellFormat::Oon {
                    h.update(self.node_ops.get(v).map(String::as_str).unwrap_or("").as_bytes());
                }
                h.finalize().into()
            })
            .collect();

        let edge_label = |i: usize, j: usize| -> &str {
            match self.format {
                CellFormat::Oon => "",
                CellFormat::Ooe => self.edge_ops.get(&(i, j)).map(String::as_str).unwrap_or(""),
            }
        };

        for _ in 0..n {
            let mut next = Vec::with_capacity(n);
            for v in 0..n {
                let mut ins: Vec<(&str, [u8; 32])> = self
                    .edges
                    .iter()
                    .filter(|&&(_, j)| j == v)
                    .map(|&(i, j)| (edge_label(i, j), colors[i]))
                    .collect();
                let mut outs: Vec<(&str, [u8; 32])> = self
                    .edges
                    .iter()
                    .filter(|&&(i, _)| i == v)
                    .map(|&(i, j)| (edge_label(i, j), colors[j]))
                    .collect();
                ins.sort_unstable();
                outs.sort_unstable();
                let mut h = Sha256::new();
                h.update(colors[v]);
                h.update([0xfe]);
                for (lab, c) in &ins {
                    h.update(lab.as_bytes());
                    h.update([0x00]);
                    h.update(c);
                }
                h.update([0xff]);
                for (lab, c) in &outs {
                    h.update(lab.as_bytes());
                    h.update([0x00]);
                    h.update(c);
                }
                next.push(h.finalize().into());
            }
            colors = next;
        }

        colors.sort_unstable();
        let mut h = Sha256::new();
        h.update((n as u64).to_le_bytes());
        h.update((self.edges.len() as u64).to_le_bytes());
        for c in &colors {
            h.update(c);
        }
        Digest(h.finalize().into())
    }

    /// One-hot matrix encoding of a valid oon cell over the given op
    /// vocabulary. The adjacency matrix is strictly upper-triangular because
    /// nodes are stored topologically.
    pub fn encode_matrices(&self, vocabulary: &[String]) -> Result<MatrixEncoding, GraphError> {
        if self.format != CellFormat::Oon {
            return Err(GraphError::WrongFormat {
                expected: CellFormat::Oon,
                found: self.format,
            });
        }
        let report = self.validate();
        if !report.is_ok() {
            return Err(GraphError::Invalid(report));
        }
        let n = self.node_count;
        let mut adjacency = vec![vec![0u8; n]; n];
        for &(i, j) in &self.edges {
            adjacency[i][j] = 1;
        }
        let mut attributes = vec![vec![0u8; vocabulary.len()]; n];
        for (v, op) in self.node_ops.iter().enumerate() {
            let slot = vocabulary
                .iter()
                .position(|w| w == op)
                .ok_or_else(|| GraphError::UnknownOp { op: op.clone() })?;
            attributes[v][slot] = 1;
        }
        Ok(MatrixEncoding { adjacency, attributes })
    }

    /// Length (in edges) of the longest source-to-sink path of a valid cell.
    pub fn longest_path(&self) -> usize {
        let n = self.node_count;
        let mut dist = vec![0usize; n];
        for &(i, j) in &self.edges {
            dist[j] = dist[j].max(dist[i] + 1);
        }
        dist[n - 1]
    }
}

/// Binary matrix form consumed by the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixEncoding {
    /// `node_count x node_count`, strictly upper-triangular.
    pub adjacency: Vec<Vec<u8>>,
    /// `node_count x vocabulary len`, one-hot per node.
    pub attributes: Vec<Vec<u8>>,
}

impl MatrixEncoding {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Inverse of [`CellGraph::encode_matrices`] over the same vocabulary.
    pub fn decode(&self, vocabulary: &[String]) -> CellGraph {
        let n = self.node_count();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[i][j] != 0 {
                    edges.push((i, j));
                }
            }
        }
        let node_ops = self
            .attributes
            .iter()
            .map(|row| {
                let slot = row.iter().position(|&b| b != 0).expect("one-hot row");
                vocabulary[slot].clone()
            })
            .collect();
        CellGraph::oon(n, edges, node_ops)
    }
}

/// 32-byte stable digest identifying an architecture up to isomorphism.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (k, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16)?;
            let lo = (chunk[1] as char).to_digit(16)?;
            out[k] = (hi * 16 + lo) as u8;
        }
        Some(Digest(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("invalid digest hex"))
    }
}

/// One structural defect found by [`CellGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    EdgeOutOfRange { edge: (usize, usize) },
    SelfLoop { node: usize },
    DuplicateEdge { edge: (usize, usize) },
    /// A back edge: either the topological ordering is broken or the graph
    /// has a cycle.
    OrderingOrCycle { edge: (usize, usize) },
    /// The in-degree-0 set is not exactly `{0}`.
    SourceCount { nodes: Vec<usize> },
    /// The out-degree-0 set is not exactly `{node_count - 1}`.
    SinkCount { nodes: Vec<usize> },
    /// Node is not on any source-to-sink path.
    Dangling { node: usize },
    OpArity { expected: usize, found: usize, what: &'static str },
    StrayOps { what: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "graph has no nodes"),
            Violation::EdgeOutOfRange { edge } => {
                write!(f, "edge ({}, {}) references a missing node", edge.0, edge.1)
            }
            Violation::SelfLoop { node } => write!(f, "self loop on node {node}"),
            Violation::DuplicateEdge { edge } => {
                write!(f, "duplicate edge ({}, {})", edge.0, edge.1)
            }
            Violation::OrderingOrCycle { edge } => write!(
                f,
                "edge ({}, {}) breaks the topological ordering (cycle or mislabelled nodes)",
                edge.0, edge.1
            ),
            Violation::SourceCount { nodes } => {
                write!(f, "expected node 0 as the only source, found {nodes:?}")
            }
            Violation::SinkCount { nodes } => {
                write!(f, "expected the last node as the only sink, found {nodes:?}")
            }
            Violation::Dangling { node } => {
                write!(f, "node {node} is not on any source-to-sink path")
            }
            Violation::OpArity { expected, found, what } => {
                write!(f, "{what} has {found} entries, expected {expected}")
            }
            Violation::StrayOps { what } => write!(f, "{what} must be empty for this format"),
        }
    }
}

/// Everything wrong with a graph, in one report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GraphError {
    #[error("graph contains a cycle; no topological order exists")]
    Cycle,
    #[error("expected a {expected} cell, found {found}")]
    WrongFormat { expected: CellFormat, found: CellFormat },
    #[error("graph fails validation: {0}")]
    Invalid(ValidationReport),
    #[error("op label {op:?} is not in the vocabulary")]
    UnknownOp { op: String },
}

/// Wire format: `{"format", "nodes", "edges", "node_ops", "edge_ops"}` with
/// edge-op keys spelled `"i-j"`.
#[derive(Serialize, Deserialize)]
struct RawGraph {
    format: CellFormat,
    nodes: usize,
    edges: Vec<(usize, usize)>,
    #[serde(default)]
    node_ops: Vec<String>,
    #[serde(default)]
    edge_ops: BTreeMap<String, String>,
}

impl From<CellGraph> for RawGraph {
    fn from(g: CellGraph) -> RawGraph {
        RawGraph {
            format: g.format,
            nodes: g.node_count,
            edges: g.edges,
            node_ops: g.node_ops,
            edge_ops: g
                .edge_ops
                .into_iter()
                .map(|((i, j), op)| (format!("{i}-{j}"), op))
                .collect(),
        }
    }
}

impl TryFrom<RawGraph> for CellGraph {
    type Error = String;

    fn try_from(raw: RawGraph) -> Result<CellGraph, String> {
        let mut edge_ops = BTreeMap::new();
        for (key, op) in raw.edge_ops {
            let (i, j) = key
                .split_once('-')
                .ok_or_else(|| format!("edge_ops key {key:?} is not of the form \"i-j\""))?;
            let i: usize = i.parse().map_err(|_| format!("bad edge_ops key {key:?}"))?;
            let j: usize = j.parse().map_err(|_| format!("bad edge_ops key {key:?}"))?;
            if edge_ops.insert((i, j), op).is_some() {
                return Err(format!("edge_ops key {key:?} repeated"));
            }
        }
        let mut edges = raw.edges;
        edges.sort_unstable();
        edges.dedup();
        Ok(CellGraph {
            format: raw.format,
            node_count: raw.nodes,
            edges,
            node_ops: raw.node_ops,
            edge_ops,
        })
    }
}
