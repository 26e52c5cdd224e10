//! Helpers shared by the unit tests: a brute-force isomorphism oracle and a
//! chi-square goodness-of-fit p-value.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cellgraph::{CellFormat, CellGraph, INPUT_OP, OUTPUT_OP};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Constructs a random valid oon cell: every node gets an incoming edge from
/// an earlier node and an outgoing edge to a later one, then extra forward
/// edges are sprinkled in. Valid by construction.
pub fn random_valid_oon(n: usize, interior_ops: &[&str], rng: &mut impl Rng) -> CellGraph {
    assert!(n >= 2);
    let mut edges = std::collections::BTreeSet::new();
    for v in 1..n {
        edges.insert((rng.gen_range(0..v), v));
    }
    for v in (0..n - 1).rev() {
        if !edges.iter().any(|&(i, _)| i == v) {
            edges.insert((v, rng.gen_range(v + 1..n)));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(0.15) {
                edges.insert((i, j));
            }
        }
    }
    let mut node_ops = vec![INPUT_OP.to_string()];
    for _ in 1..n - 1 {
        node_ops.push(interior_ops[rng.gen_range(0..interior_ops.len())].to_string());
    }
    node_ops.push(OUTPUT_OP.to_string());
    let g = CellGraph::oon(n, edges.into_iter().collect(), node_ops);
    debug_assert!(g.validate().is_ok(), "{}", g.validate());
    g
}

/// Applies a random node permutation without re-canonicalising, so the result
/// is an isomorphic graph in a (usually invalid) relabelled representation.
pub fn permute_nodes(g: &CellGraph, rng: &mut impl Rng) -> CellGraph {
    let n = g.node_count;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let edges: Vec<_> = g.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
    match g.format {
        CellFormat::Oon => {
            let mut node_ops = vec![String::new(); n];
            for v in 0..n {
                node_ops[perm[v]] = g.node_ops[v].clone();
            }
            CellGraph::oon(n, edges, node_ops)
        }
        CellFormat::Ooe => {
            let edge_ops = g
                .edge_ops
                .iter()
                .map(|(&(i, j), op)| ((perm[i], perm[j]), op.clone()))
                .collect();
            CellGraph::ooe(n, edge_ops)
        }
    }
}

/// Exhaustive isomorphism check over all node bijections (fine for the tiny
/// cells the tests use). Independent of `canonical_hash` on purpose.
pub fn isomorphic(a: &CellGraph, b: &CellGraph) -> bool {
    if a.format != b.format || a.node_count != b.node_count || a.edge_count() != b.edge_count() {
        return false;
    }
    let n = a.node_count;
    (0..n).permutations(n).any(|perm| {
        let edges_match = a.edges.iter().all(|&(i, j)| b.has_edge(perm[i], perm[j]));
        if !edges_match {
            return false;
        }
        match a.format {
            CellFormat::Oon => (0..n).all(|v| a.node_ops[v] == b.node_ops[perm[v]]),
            CellFormat::Ooe => a
                .edge_ops
                .iter()
                .all(|(&(i, j), op)| b.edge_ops.get(&(perm[i], perm[j])) == Some(op)),
        }
    })
}

/// Upper-tail p-value of a chi-square fit of observed counts against uniform
/// expectation.
pub fn chi_square_uniform_p(observed: &[u64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = observed.iter().sum();
    let expected = total as f64 / observed.len() as f64;
    let stat: f64 = observed
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let df = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}
