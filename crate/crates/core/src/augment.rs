//! Positive-sample generation for contrastive pre-training.
//!
//! Two augmentation primitives over operation-on-node cells: random edge
//! flips (present slots removed, absent slots added) and node-op masking
//! (interior nodes relabelled). Every augmentation records its exact edit
//! trace so the difficulty score can be computed without a graph-edit
//! solver, and so a candidate can be replayed from its origin.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgraph::{CellFormat, CellGraph, Digest, ValidationReport};

/// Per-candidate edit ratios drawn when the spec leaves `ratio` unset.
/// A fixed ratio would give all candidates in a batch the same difficulty,
/// which collapses the curriculum's choice; a spread keeps it meaningful.
pub const DEFAULT_RATIO_CHOICES: &[f64] = &[0.05, 0.1, 0.2, 0.3, 0.4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    EdgePerturbation,
    AttributeMasking,
    /// Edge perturbation followed by attribute masking, each at the same
    /// ratio.
    Mixed,
}

/// What to generate per origin graph: which primitive, how hard, how many.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub method: AugmentMethod,
    /// Edit ratio in `[0, 1]`. When `None`, each candidate draws its own
    /// ratio uniformly from the augmenter's ratio choices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    /// Number of candidates per origin (at least 1).
    pub candidates: usize,
}

/// One elementary change relative to the origin graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edit {
    EdgeAdded(usize, usize),
    EdgeRemoved(usize, usize),
    OpChanged(usize, String, String),
}

/// An augmented cell together with where it came from and how.
///
/// The trace is recorded against the OON form of the origin: replaying
/// `edits` on that origin reproduces `graph` exactly, and no slot or node
/// is ever edited twice (no edit cancels another).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedGraph {
    pub graph: CellGraph,
    pub origin_hash: Digest,
    pub edits: Vec<Edit>,
}

impl AugmentedGraph {
    /// Edge count of the origin, reconstructed from the trace. Each
    /// recorded addition means the origin had one edge fewer, each removal
    /// one more.
    pub fn origin_edge_count(&self) -> usize {
        let mut count = self.graph.edge_count() as isize;
        for edit in &self.edits {
            match edit {
                Edit::EdgeAdded(..) => count -= 1,
                Edit::EdgeRemoved(..) => count += 1,
                Edit::OpChanged(..) => {}
            }
        }
        count as usize
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation needs an {expected} graph, got {got}")]
    WrongFormat { expected: CellFormat, got: CellFormat },
    #[error("origin graph fails validation: {0}")]
    InvalidOrigin(ValidationReport),
    #[error("edit ratio {0} outside [0, 1]")]
    RatioRange(f64),
    #[error("no ratio choices configured and the spec leaves ratio unset")]
    NoRatioChoices,
    #[error("no legal edge flip left after {applied} edits")]
    NoLegalFlip { applied: usize },
    #[error("need at least two interior op labels to mask, have {0}")]
    VocabularyTooSmall(usize),
    #[error("candidate count must be at least 1")]
    NoCandidates,
    #[error("edit {index} does not replay: {reason}")]
    Replay { index: usize, reason: String },
    #[error(transparent)]
    Graph(#[from] crate::cellgraph::GraphError),
}

/// Replays an edit trace on an origin graph.
///
/// Fails if an edit does not apply cleanly (adding a present edge,
/// removing an absent one, or relabelling a node whose current op does not
/// match the recorded old op), which would mean the trace and origin do
/// not belong together.
pub fn apply_edits(origin: &CellGraph, edits: &[Edit]) -> Result<CellGraph, AugmentError> {
    if origin.format != CellFormat::Oon {
        return Err(AugmentError::WrongFormat {
            expected: CellFormat::Oon,
            got: origin.format,
        });
    }
    let n = origin.node_count;
    let mut edges: BTreeSet<(usize, usize)> = origin.edges.iter().copied().collect();
    let mut ops = origin.node_ops.clone();
    for (index, edit) in edits.iter().enumerate() {
        let fail = |reason: String| AugmentError::Replay { index, reason };
        match edit {
            Edit::EdgeAdded(i, j) => {
                if *i >= *j || *j >= n {
                    return Err(fail(format!("edge ({i}, {j}) out of range")));
                }
                if !edges.insert((*i, *j)) {
                    return Err(fail(format!("edge ({i}, {j}) already present")));
                }
            }
            Edit::EdgeRemoved(i, j) => {
                if !edges.remove(&(*i, *j)) {
                    return Err(fail(format!("edge ({i}, {j}) absent")));
                }
            }
            Edit::OpChanged(node, old, new) => {
                if *node >= n {
                    return Err(fail(format!("node {node} out of range")));
                }
                if &ops[*node] != old {
                    return Err(fail(format!(
                        "node {node} carries '{}', trace expects '{old}'",
                        ops[*node]
                    )));
                }
                ops[*node] = new.clone();
            }
        }
    }
    Ok(CellGraph::oon(n, edges.into_iter().collect(), ops))
}

/// All edge slots whose flip keeps the graph valid, skipping slots already
/// edited (a second flip would cancel the first and leave a non-minimal
/// trace).
fn legal_edge_flips(g: &CellGraph, touched: &BTreeSet<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut pool = Vec::new();
    for i in 0..g.node_count {
        for j in (i + 1)..g.node_count {
            if touched.contains(&(i, j)) {
                continue;
            }
            let mut edges = g.edges.clone();
            if g.has_edge(i, j) {
                edges.retain(|&e| e != (i, j));
            } else {
                edges.push((i, j));
            }
            let probe = CellGraph::oon(g.node_count, edges, g.node_ops.clone());
            if probe.validate().is_ok() {
                pool.push((i, j));
            }
        }
    }
    pool
}

/// Number of edits forced by ratio `mu` over `total` editable sites:
/// `ceil(mu * total)`, with products snapped to the nearest integer first
/// so ratios meant as exact fractions (e.g. 1/9 of 9) don't round up on
/// float noise.
fn edit_count(mu: f64, total: usize) -> usize {
    let x = mu * total as f64;
    if (x - x.round()).abs() < 1e-9 {
        x.round() as usize
    } else {
        x.ceil() as usize
    }
}

fn check_origin(g: &CellGraph, mu: f64) -> Result<(), AugmentError> {
    if g.format != CellFormat::Oon {
        return Err(AugmentError::WrongFormat {
            expected: CellFormat::Oon,
            got: g.format,
        });
    }
    let report = g.validate();
    if !report.is_ok() {
        return Err(AugmentError::InvalidOrigin(report));
    }
    if !(0.0..=1.0).contains(&mu) || !mu.is_finite() {
        return Err(AugmentError::RatioRange(mu));
    }
    Ok(())
}

/// Generates augmentations over a fixed interior op vocabulary.
#[derive(Debug, Clone)]
pub struct Augmenter {
    ops: Vec<String>,
    ratio_choices: Vec<f64>,
}

impl Augmenter {
    /// `ops` is the interior vocabulary masking relabels into, typically
    /// the search space's op list.
    pub fn new(ops: Vec<String>) -> Augmenter {
        Augmenter { ops, ratio_choices: DEFAULT_RATIO_CHOICES.to_vec() }
    }

    pub fn with_ratio_choices(mut self, choices: Vec<f64>) -> Augmenter {
        self.ratio_choices = choices;
        self
    }

    /// Flips `ceil(mu * edge_count)` edge slots, each chosen uniformly
    /// among the flips that keep the graph valid at that point.
    pub fn edge_perturbation(
        &self,
        g: &CellGraph,
        mu: f64,
        rng: &mut impl Rng,
    ) -> Result<AugmentedGraph, AugmentError> {
        check_origin(g, mu)?;
        let wanted = edit_count(mu, g.edge_count());
        let mut current = g.clone();
        let mut touched = BTreeSet::new();
        let mut edits = Vec::with_capacity(wanted);
        for _ in 0..wanted {
            let pool = legal_edge_flips(&current, &touched);
            let Some(&(i, j)) = pool.choose(rng) else {
                return Err(AugmentError::NoLegalFlip { applied: edits.len() });
            };
            let mut edges = current.edges.clone();
            if current.has_edge(i, j) {
                edges.retain(|&e| e != (i, j));
                edits.push(Edit::EdgeRemoved(i, j));
            } else {
                edges.push((i, j));
                edits.push(Edit::EdgeAdded(i, j));
            }
            current = CellGraph::oon(current.node_count, edges, current.node_ops);
            touched.insert((i, j));
        }
        Ok(AugmentedGraph { graph: current, origin_hash: g.canonical_hash(), edits })
    }

    /// Relabels `ceil(mu * interior_count)` distinct interior nodes, each
    /// to a uniformly chosen different op from the vocabulary.
    pub fn attribute_masking(
        &self,
        g: &CellGraph,
        mu: f64,
        rng: &mut impl Rng,
    ) -> Result<AugmentedGraph, AugmentError> {
        check_origin(g, mu)?;
        let interior = g.node_count.saturating_sub(2);
        let wanted = edit_count(mu, interior);
        if wanted > 0 && self.ops.len() < 2 {
            return Err(AugmentError::VocabularyTooSmall(self.ops.len()));
        }
        // Interior nodes are 1..=interior; pick `wanted` of them without
        // replacement so no node is relabelled twice.
        let chosen = rand::seq::index::sample(rng, interior, wanted.min(interior));
        let mut ops = g.node_ops.clone();
        let mut edits = Vec::with_capacity(wanted);
        for node in chosen.iter().map(|k| k + 1) {
            let old = ops[node].clone();
            let pool: Vec<&String> = self.ops.iter().filter(|op| **op != old).collect();
            let Some(new) = pool.choose(rng) else {
                return Err(AugmentError::VocabularyTooSmall(self.ops.len()));
            };
            ops[node] = (*new).clone();
            edits.push(Edit::OpChanged(node, old, ops[node].clone()));
        }
        let graph = CellGraph::oon(g.node_count, g.edges.clone(), ops);
        Ok(AugmentedGraph { graph, origin_hash: g.canonical_hash(), edits })
    }

    /// Draws `spec.candidates` independent augmentations of `g`. OOE
    /// origins are converted to their OON view first, and the recorded
    /// origin hash is the hash of that view.
    pub fn generate_candidates(
        &self,
        g: &CellGraph,
        spec: &AugmentationSpec,
        rng: &mut impl Rng,
    ) -> Result<Vec<AugmentedGraph>, AugmentError> {
        if spec.candidates == 0 {
            return Err(AugmentError::NoCandidates);
        }
        if let Some(mu) = spec.ratio {
            if !(0.0..=1.0).contains(&mu) || !mu.is_finite() {
                return Err(AugmentError::RatioRange(mu));
            }
        } else if self.ratio_choices.is_empty() {
            return Err(AugmentError::NoRatioChoices);
        }
        let origin = g.oon_view()?;
        let mut out = Vec::with_capacity(spec.candidates);
        for _ in 0..spec.candidates {
            let mu = match spec.ratio {
                Some(mu) => mu,
                None => *self.ratio_choices.choose(rng).expect("checked non-empty"),
            };
            let candidate = match spec.method {
                AugmentMethod::EdgePerturbation => self.edge_perturbation(&origin, mu, rng)?,
                AugmentMethod::AttributeMasking => self.attribute_masking(&origin, mu, rng)?,
                AugmentMethod::Mixed => {
                    let first = self.edge_perturbation(&origin, mu, rng)?;
                    let second = self.attribute_masking(&first.graph, mu, rng)?;
                    let mut edits = first.edits;
                    edits.extend(second.edits);
                    AugmentedGraph {
                        graph: second.graph,
                        origin_hash: first.origin_hash,
                        edits,
                    }
                }
            };
            out.push(candidate);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgraph::{INPUT_OP, OUTPUT_OP};
    use crate::testutil;

    fn augmenter() -> Augmenter {
        Augmenter::new(vec!["conv1x1".into(), "conv3x3".into(), "maxpool".into()])
    }

    /// input -> 5 interior nodes -> output, chain plus a few skips: 9 edges.
    fn seven_node_graph() -> CellGraph {
        CellGraph::oon(
            7,
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 3), (1, 4), (2, 6)],
            vec![
                INPUT_OP.into(),
                "conv1x1".into(),
                "conv3x3".into(),
                "maxpool".into(),
                "conv1x1".into(),
                "conv3x3".into(),
                OUTPUT_OP.into(),
            ],
        )
    }

    #[test]
    fn zero_ratio_is_identity() {
        let g = seven_node_graph();
        let mut rng = testutil::rng(1);
        for method in [
            Augmenter::edge_perturbation as fn(&Augmenter, &CellGraph, f64, &mut _) -> _,
            Augmenter::attribute_masking,
        ] {
            let aug = method(&augmenter(), &g, 0.0, &mut rng).unwrap();
            assert_eq!(aug.graph, g);
            assert!(aug.edits.is_empty());
        }
    }

    #[test]
    fn edit_counts_follow_the_ceiling() {
        let g = seven_node_graph();
        assert_eq!(g.edge_count(), 9);
        let mut rng = testutil::rng(2);
        let a = augmenter();

        // 1/9 of 9 edges is exactly one flip, float noise notwithstanding.
        let aug = a.edge_perturbation(&g, 1.0 / 9.0, &mut rng).unwrap();
        assert_eq!(aug.edits.len(), 1);

        // 0.2 of 9 edges rounds up to 2.
        let aug = a.edge_perturbation(&g, 0.2, &mut rng).unwrap();
        assert_eq!(aug.edits.len(), 2);

        // 0.4 of 5 interior nodes is exactly 2.
        let aug = a.attribute_masking(&g, 0.4, &mut rng).unwrap();
        assert_eq!(aug.edits.len(), 2);
        assert!(aug.edits.iter().all(|e| matches!(e, Edit::OpChanged(..))));
    }

    #[test]
    fn masking_never_repeats_a_label() {
        let g = seven_node_graph();
        let a = augmenter();
        let mut rng = testutil::rng(3);
        for _ in 0..10_000 {
            let aug = a.attribute_masking(&g, 0.4, &mut rng).unwrap();
            for edit in &aug.edits {
                let Edit::OpChanged(node, old, new) = edit else {
                    panic!("unexpected edit kind")
                };
                assert_ne!(old, new);
                assert!((1..6).contains(node), "masked a marker node");
            }
        }
    }

    #[test]
    fn first_flip_is_uniform_over_the_legal_pool() {
        let g = seven_node_graph();
        let pool = legal_edge_flips(&g, &BTreeSet::new());
        assert!(pool.len() > 2);
        let a = augmenter();
        let mut rng = testutil::rng(4);
        let mut counts = vec![0u64; pool.len()];
        for _ in 0..10_000 {
            // mu small enough to force exactly one flip.
            let aug = a.edge_perturbation(&g, 0.01, &mut rng).unwrap();
            let slot = match aug.edits[0] {
                Edit::EdgeAdded(i, j) | Edit::EdgeRemoved(i, j) => (i, j),
                _ => panic!("edge perturbation recorded an op edit"),
            };
            let k = pool.iter().position(|&s| s == slot).expect("flip outside pool");
            counts[k] += 1;
        }
        let p = testutil::chi_square_uniform_p(&counts);
        assert!(p > 0.01, "flip choice not uniform: p = {p}");
    }

    #[test]
    fn replay_reproduces_every_augmentation() {
        let a = augmenter();
        let ops = ["conv1x1", "conv3x3", "maxpool"];
        let mut rng = testutil::rng(5);
        for round in 0..200 {
            let g = testutil::random_valid_oon(4 + round % 4, &ops, &mut rng);
            for method in [
                AugmentMethod::EdgePerturbation,
                AugmentMethod::AttributeMasking,
                AugmentMethod::Mixed,
            ] {
                let spec = AugmentationSpec { method, ratio: None, candidates: 2 };
                for aug in a.generate_candidates(&g, &spec, &mut rng).unwrap() {
                    assert!(aug.graph.validate().is_ok());
                    assert_eq!(apply_edits(&g, &aug.edits).unwrap(), aug.graph);
                    assert_eq!(aug.origin_hash, g.canonical_hash());
                    assert_eq!(aug.origin_edge_count(), g.edge_count());
                }
            }
        }
    }

    #[test]
    fn traces_never_cancel() {
        let a = augmenter();
        let g = seven_node_graph();
        let mut rng = testutil::rng(6);
        for _ in 0..500 {
            let spec = AugmentationSpec {
                method: AugmentMethod::Mixed,
                ratio: Some(1.0),
                candidates: 1,
            };
            let aug = &a.generate_candidates(&g, &spec, &mut rng).unwrap()[0];
            let mut slots = BTreeSet::new();
            let mut nodes = BTreeSet::new();
            for edit in &aug.edits {
                match edit {
                    Edit::EdgeAdded(i, j) | Edit::EdgeRemoved(i, j) => {
                        assert!(slots.insert((*i, *j)), "slot edited twice");
                    }
                    Edit::OpChanged(node, ..) => {
                        assert!(nodes.insert(*node), "node relabelled twice");
                    }
                }
            }
        }
    }

    #[test]
    fn candidates_share_the_origin_and_vary_in_ratio() {
        let a = augmenter();
        let g = seven_node_graph();
        let spec = AugmentationSpec {
            method: AugmentMethod::EdgePerturbation,
            ratio: None,
            candidates: 8,
        };
        let mut rng = testutil::rng(7);
        let batch = a.generate_candidates(&g, &spec, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        assert!(batch.iter().all(|c| c.origin_hash == g.canonical_hash()));
        let sizes: BTreeSet<usize> = batch.iter().map(|c| c.edits.len()).collect();
        assert!(sizes.len() > 1, "per-candidate ratios should spread edit counts");
    }

    #[test]
    fn ooe_origins_are_converted_before_augmenting() {
        let space = crate::spaces::SearchSpaceSpec::nb201_like();
        let mut rng = testutil::rng(8);
        let g = space.sample_uniform(&mut rng).unwrap();
        let a = Augmenter::new(space.ops.clone());
        let spec = AugmentationSpec {
            method: AugmentMethod::AttributeMasking,
            ratio: Some(0.3),
            candidates: 3,
        };
        let oon = g.oon_view().unwrap().into_owned();
        for aug in a.generate_candidates(&g, &spec, &mut rng).unwrap() {
            assert_eq!(aug.graph.format, CellFormat::Oon);
            assert_eq!(aug.origin_hash, oon.canonical_hash());
            assert_eq!(apply_edits(&oon, &aug.edits).unwrap(), aug.graph);
        }
    }

    #[test]
    fn error_paths_are_reported() {
        let a = augmenter();
        let g = seven_node_graph();
        let mut rng = testutil::rng(9);

        assert!(matches!(
            a.edge_perturbation(&g, 1.5, &mut rng),
            Err(AugmentError::RatioRange(_))
        ));

        let tiny_vocab = Augmenter::new(vec!["conv1x1".into()]);
        assert!(matches!(
            tiny_vocab.attribute_masking(&g, 0.5, &mut rng),
            Err(AugmentError::VocabularyTooSmall(1))
        ));

        let spec = AugmentationSpec {
            method: AugmentMethod::Mixed,
            ratio: Some(0.2),
            candidates: 0,
        };
        assert!(matches!(
            a.generate_candidates(&g, &spec, &mut rng),
            Err(AugmentError::NoCandidates)
        ));

        // A bare input->output wire has no legal flip: removing its only
        // edge disconnects it and there is no other slot.
        let wire = CellGraph::oon(2, vec![(0, 1)], vec![INPUT_OP.into(), OUTPUT_OP.into()]);
        assert!(matches!(
            a.edge_perturbation(&wire, 1.0, &mut rng),
            Err(AugmentError::NoLegalFlip { applied: 0 })
        ));
    }

    #[test]
    fn replay_rejects_mismatched_traces() {
        let g = seven_node_graph();
        let err = apply_edits(&g, &[Edit::EdgeAdded(0, 1)]).unwrap_err();
        assert!(matches!(err, AugmentError::Replay { index: 0, .. }));
        let err = apply_edits(&g, &[Edit::OpChanged(1, "maxpool".into(), "conv3x3".into())])
            .unwrap_err();
        assert!(err.to_string().contains("trace expects"));
    }

    #[test]
    fn edits_serialize_compactly() {
        let edits = vec![
            Edit::EdgeAdded(0, 2),
            Edit::EdgeRemoved(1, 3),
            Edit::OpChanged(2, "conv3x3".into(), "maxpool".into()),
        ];
        let json = serde_json::to_string(&edits).unwrap();
        assert_eq!(
            json,
            r#"[{"edge_added":[0,2]},{"edge_removed":[1,3]},{"op_changed":[2,"conv3x3","maxpool"]}]"#
        );
        let back: Vec<Edit> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, edits);
    }
}
