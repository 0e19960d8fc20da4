//! Meta-path-constrained random walk corpora.
//!
//! Transitions are uniform over the typed neighbor set of the current node;
//! a node with no eligible neighbor is a dead end and truncates the walk.
//! Symmetric (palindromic) paths cycle; asymmetric paths stop at their last
//! type. Each walk draws from an RNG stream keyed by
//! (seed, start node, path index, walk index).

use std::collections::BTreeMap;

use crate::hin::{Hin, MetaPath, NodeId, TypeId};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    /// Nodes per walk, spanning repeated traversals of the meta path.
    pub walk_length: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walks_per_node: 10,
            walk_length: 21,
            seed: 0,
        }
    }
}

/// One node sequence tied to the meta path that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Walk {
    pub path_index: usize,
    pub nodes: Vec<NodeId>,
}

/// Walks grouped by the node type they start from.
#[derive(Clone, Debug, Default)]
pub struct WalkCorpus {
    pub by_start_type: BTreeMap<TypeId, Vec<Walk>>,
}

impl WalkCorpus {
    pub fn n_walks(&self) -> usize {
        self.by_start_type.values().map(|w| w.len()).sum()
    }

    pub fn walks_for(&self, t: TypeId) -> &[Walk] {
        self.by_start_type.get(&t).map(|w| w.as_slice()).unwrap_or(&[])
    }

    /// Dump: one walk per line, path name prefix then space-separated node ids.
    pub fn to_text(&self, hin: &Hin, paths: &[MetaPath]) -> String {
        let mut out = String::new();
        for walks in self.by_start_type.values() {
            for w in walks {
                out.push_str(&paths[w.path_index].name(hin.schema()));
                for &v in &w.nodes {
                    out.push(' ');
                    out.push_str(hin.label(v));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Uniform next-step law over typed neighbors: probability
/// 1/|N_v^(t)| on each eligible neighbor, empty at dead ends.
pub fn next_step_distribution(hin: &Hin, current: NodeId, required_type: TypeId) -> Vec<(NodeId, f64)> {
    let neighbors = hin
        .neighbors_of_type(current, required_type)
        .unwrap_or(&[]);
    if neighbors.is_empty() {
        return Vec::new();
    }
    let p = 1.0 / neighbors.len() as f64;
    neighbors.iter().map(|&v| (v, p)).collect()
}

/// Draw one next node, or None at a dead end.
pub fn step(hin: &Hin, current: NodeId, required_type: TypeId, rng: &mut Rng) -> Option<NodeId> {
    let neighbors = hin.neighbors_of_type(current, required_type).ok()?;
    if neighbors.is_empty() {
        return None;
    }
    Some(neighbors[rng.below(neighbors.len())])
}

/// Walk from `start` following the (cyclically repeated) type sequence of
/// `path`. Panics in debug builds if the start type mismatches.
pub fn generate_walk(
    hin: &Hin,
    start: NodeId,
    path: &MetaPath,
    path_index: usize,
    cfg: &WalkConfig,
    rng: &mut Rng,
) -> Walk {
    debug_assert_eq!(hin.node_type(start), path.start_type(), "start type mismatch");
    let mut nodes = Vec::with_capacity(cfg.walk_length);
    nodes.push(start);
    let mut current = start;
    for pos in 1..cfg.walk_length {
        let Some(required) = path.type_at(pos) else {
            break; // asymmetric path exhausted
        };
        match step(hin, current, required, rng) {
            Some(next) => {
                nodes.push(next);
                current = next;
            }
            None => break, // dead end truncates
        }
    }
    Walk { path_index, nodes }
}

/// `walks_per_node` walks per (eligible start node, path), partitioned by
/// start-node type. Deterministic in (node, path, walk-index) order.
pub fn generate_corpus(hin: &Hin, paths: &[MetaPath], cfg: &WalkConfig) -> WalkCorpus {
    let mut corpus = WalkCorpus::default();
    for (pi, path) in paths.iter().enumerate() {
        let start_type = path.start_type();
        for start in hin.nodes_of_type(start_type) {
            for w in 0..cfg.walks_per_node {
                let mut rng = Rng::stream(cfg.seed, &[start.0 as u64, pi as u64, w as u64]);
                let walk = generate_walk(hin, start, path, pi, cfg, &mut rng);
                corpus
                    .by_start_type
                    .entry(start_type)
                    .or_default()
                    .push(walk);
            }
        }
    }
    corpus
}
