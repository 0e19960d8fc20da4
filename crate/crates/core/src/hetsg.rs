//! Skip-gram pretraining over the walk corpus and per-type linear fusion of
//! the per-meta-path tables into the context bank (c_u, c_i, c_a).
//!
//! The objective is the log-domain negative-sampling form: maximize
//! log sigma(t.c) + sum_w log sigma(-t.c_w), with negatives drawn from the
//! unigram distribution of the context node's type raised to 0.75.

use std::collections::{BTreeMap, HashMap};

use crate::hin::{Hin, MetaPath, NodeId, TypeId};
use crate::rng::Rng;
use crate::vecmath::{axpy, dot, log_sigmoid, sigmoid};
use crate::walks::WalkCorpus;

#[derive(Clone, Debug)]
pub struct SkipGramConfig {
    pub dim: usize,
    /// Context radius in walk positions.
    pub window: usize,
    /// Negatives drawn per positive pair.
    pub negatives: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 64,
            window: 2,
            negatives: 3,
            lr: 0.025,
            epochs: 2,
            seed: 0,
        }
    }
}

/// Embedding tables for one meta path: a target and a context vector per node
/// appearing in that path's walks.
#[derive(Clone, Debug)]
pub struct PathTable {
    pub dim: usize,
    pub nodes: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    pub target: Vec<f64>,
    pub context: Vec<f64>,
    /// Per node type: (type-local node rows, cumulative unigram^0.75 mass).
    neg_tables: BTreeMap<TypeId, (Vec<usize>, Vec<f64>)>,
}

impl PathTable {
    pub fn row(&self, v: NodeId) -> Option<usize> {
        self.index.get(&v).copied()
    }

    pub fn target_vec(&self, row: usize) -> &[f64] {
        &self.target[row * self.dim..(row + 1) * self.dim]
    }

    pub fn context_vec(&self, row: usize) -> &[f64] {
        &self.context[row * self.dim..(row + 1) * self.dim]
    }

    fn draw_negatives(&self, t: TypeId, count: usize, rng: &mut Rng, out: &mut Vec<usize>) {
        out.clear();
        if let Some((rows, cum)) = self.neg_tables.get(&t) {
            for _ in 0..count {
                out.push(rows[rng.weighted(cum)]);
            }
        }
    }
}

/// One table per meta path.
#[derive(Clone, Debug)]
pub struct MetaPathEmbeddings {
    pub dim: usize,
    pub tables: Vec<PathTable>,
}

/// Loss of one skip-gram step given raw vectors; shared by the trainer and
/// the gradient verifier so the two cannot diverge.
pub fn pair_loss(target: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -log_sigmoid(dot(target, context));
    for neg in negatives {
        loss -= log_sigmoid(-dot(target, neg));
    }
    loss
}

/// Analytic gradients of `pair_loss` w.r.t. the target, context, and each
/// negative context vector.
#[allow(clippy::type_complexity)]
pub fn pair_grads(
    target: &[f64],
    context: &[f64],
    negatives: &[&[f64]],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let d = target.len();
    let mut g_target = vec![0.0; d];
    let g_pos = sigmoid(dot(target, context)) - 1.0;
    axpy(g_pos, context, &mut g_target);
    let g_context: Vec<f64> = target.iter().map(|&t| g_pos * t).collect();
    let mut g_negs = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let g = sigmoid(dot(target, neg));
        axpy(g, neg, &mut g_target);
        g_negs.push(target.iter().map(|&t| g * t).collect());
    }
    (g_target, g_context, g_negs)
}

/// One SGD step on (center row, context row, negative rows) inside a table.
/// Returns the pre-step loss. A center equal to its context is degenerate and
/// contributes zero.
pub fn skipgram_step(
    table: &mut PathTable,
    center: usize,
    context: usize,
    negatives: &[usize],
    lr: f64,
) -> f64 {
    if center == context {
        return 0.0;
    }
    let d = table.dim;
    let t_off = center * d;
    let c_off = context * d;

    let (loss, g_target, g_context, g_negs) = {
        let target = &table.target[t_off..t_off + d];
        let context_v = &table.context[c_off..c_off + d];
        let neg_vs: Vec<&[f64]> = negatives
            .iter()
            .map(|&n| &table.context[n * d..(n + 1) * d])
            .collect();
        let loss = pair_loss(target, context_v, &neg_vs);
        let (gt, gc, gn) = pair_grads(target, context_v, &neg_vs);
        (loss, gt, gc, gn)
    };

    axpy(-lr, &g_target, &mut table.target[t_off..t_off + d]);
    axpy(-lr, &g_context, &mut table.context[c_off..c_off + d]);
    for (&n, gn) in negatives.iter().zip(&g_negs) {
        axpy(-lr, gn, &mut table.context[n * d..(n + 1) * d]);
    }
    loss
}

/// Index of (path -> walks) pairs with context windows, reused every epoch.
pub struct SkipGramTrainer<'a> {
    pub emb: MetaPathEmbeddings,
    hin: &'a Hin,
    corpus: &'a WalkCorpus,
    cfg: SkipGramConfig,
    /// Per path: (start type, walk index) of every walk, for sampled passes.
    walk_index: Vec<Vec<(TypeId, u32)>>,
}

impl<'a> SkipGramTrainer<'a> {
    pub fn new(hin: &'a Hin, corpus: &'a WalkCorpus, paths: &[MetaPath], cfg: SkipGramConfig) -> Self {
        let emb = init_tables(hin, corpus, paths, &cfg);
        let mut walk_index: Vec<Vec<(TypeId, u32)>> = vec![Vec::new(); paths.len()];
        for (&t, walks) in &corpus.by_start_type {
            for (wi, w) in walks.iter().enumerate() {
                walk_index[w.path_index].push((t, wi as u32));
            }
        }
        SkipGramTrainer {
            emb,
            hin,
            corpus,
            cfg,
            walk_index,
        }
    }

    pub fn config(&self) -> &SkipGramConfig {
        &self.cfg
    }

    /// SGD over `n_pairs` randomly drawn (center, context) pairs; keeps the
    /// skip-gram pressure alive during the joint stages. Returns the mean
    /// pre-step pair loss.
    pub fn sampled_pass(&mut self, n_pairs: usize, lr: f64, epoch: u64) -> f64 {
        let mut rng = Rng::stream(self.cfg.seed, &[0x5a3, epoch]);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut negs = Vec::with_capacity(self.cfg.negatives);
        for _ in 0..n_pairs {
            let pi = rng.below(self.emb.tables.len());
            let walks = &self.walk_index[pi];
            if walks.is_empty() {
                continue;
            }
            let (t, wi) = walks[rng.below(walks.len())];
            let walk = &self.corpus.by_start_type[&t][wi as usize];
            if walk.nodes.len() < 2 {
                continue;
            }
            let pos = rng.below(walk.nodes.len());
            let lo = pos.saturating_sub(self.cfg.window);
            let hi = (pos + self.cfg.window).min(walk.nodes.len() - 1);
            let cpos = lo + rng.below(hi - lo + 1);
            if cpos == pos {
                continue;
            }
            let center = walk.nodes[pos];
            let ctx = walk.nodes[cpos];
            let ctx_type = self.hin.node_type(ctx);
            let table = &mut self.emb.tables[pi];
            let (Some(crow), Some(xrow)) = (table.row(center), table.row(ctx)) else {
                continue;
            };
            table.draw_negatives(ctx_type, self.cfg.negatives, &mut rng, &mut negs);
            total += skipgram_step(table, crow, xrow, &negs, lr);
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// One full pass over the corpus; returns the mean per-pair loss.
    pub fn epoch(&mut self, epoch_index: u64) -> f64 {
        let mut total = 0.0;
        let mut n_pairs = 0usize;
        let window = self.cfg.window;
        let mut negs = Vec::with_capacity(self.cfg.negatives);
        for (pi, table) in self.emb.tables.iter_mut().enumerate() {
            let mut rng = Rng::stream(self.cfg.seed, &[0x5e60, pi as u64, epoch_index]);
            for walks in self.corpus.by_start_type.values() {
                for walk in walks.iter().filter(|w| w.path_index == pi) {
                    for (pos, &center) in walk.nodes.iter().enumerate() {
                        let Some(center_row) = table.row(center) else {
                            continue;
                        };
                        let lo = pos.saturating_sub(window);
                        let hi = (pos + window).min(walk.nodes.len() - 1);
                        for cpos in lo..=hi {
                            if cpos == pos {
                                continue;
                            }
                            let ctx = walk.nodes[cpos];
                            let Some(ctx_row) = table.row(ctx) else {
                                continue;
                            };
                            let ctx_type = self.hin.node_type(ctx);
                            table.draw_negatives(ctx_type, self.cfg.negatives, &mut rng, &mut negs);
                            total += skipgram_step(table, center_row, ctx_row, &negs, self.cfg.lr);
                            n_pairs += 1;
                        }
                    }
                }
            }
        }
        if n_pairs == 0 {
            0.0
        } else {
            total / n_pairs as f64
        }
    }

    /// Skip-gram loss and gradient over every (center, context) pair of the
    /// corpus without touching the tables. Gradients are laid out like the
    /// tables themselves. Used by the joint objective and by gradient checks.
    #[allow(clippy::type_complexity)]
    pub fn loss_and_grads(&self) -> (f64, Vec<(Vec<f64>, Vec<f64>)>) {
        let window = self.cfg.window;
        let mut total = 0.0;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .emb
            .tables
            .iter()
            .map(|t| (vec![0.0; t.target.len()], vec![0.0; t.context.len()]))
            .collect();
        let mut negs = Vec::new();
        for (pi, table) in self.emb.tables.iter().enumerate() {
            let d = table.dim;
            // negatives must match the trainer's draws pair-for-pair, so the
            // stream key mirrors epoch 0 of `epoch()`
            let mut rng = Rng::stream(self.cfg.seed, &[0x5e60, pi as u64, 0]);
            let (g_t, g_c) = &mut grads[pi];
            for walks in self.corpus.by_start_type.values() {
                for walk in walks.iter().filter(|w| w.path_index == pi) {
                    for (pos, &center) in walk.nodes.iter().enumerate() {
                        let Some(center_row) = table.row(center) else {
                            continue;
                        };
                        let lo = pos.saturating_sub(window);
                        let hi = (pos + window).min(walk.nodes.len() - 1);
                        for cpos in lo..=hi {
                            if cpos == pos {
                                continue;
                            }
                            let ctx = walk.nodes[cpos];
                            let Some(ctx_row) = table.row(ctx) else {
                                continue;
                            };
                            let ctx_type = self.hin.node_type(ctx);
                            table.draw_negatives(ctx_type, self.cfg.negatives, &mut rng, &mut negs);
                            if center_row == ctx_row {
                                continue;
                            }
                            let target = table.target_vec(center_row);
                            let context_v = table.context_vec(ctx_row);
                            let neg_vs: Vec<&[f64]> =
                                negs.iter().map(|&n| table.context_vec(n)).collect();
                            total += pair_loss(target, context_v, &neg_vs);
                            let (gt, gc, gn) = pair_grads(target, context_v, &neg_vs);
                            axpy(1.0, &gt, &mut g_t[center_row * d..(center_row + 1) * d]);
                            axpy(1.0, &gc, &mut g_c[ctx_row * d..(ctx_row + 1) * d]);
                            for (&n, g) in negs.iter().zip(&gn) {
                                axpy(1.0, g, &mut g_c[n * d..(n + 1) * d]);
                            }
                        }
                    }
                }
            }
        }
        (total, grads)
    }
}

fn init_tables(
    hin: &Hin,
    corpus: &WalkCorpus,
    paths: &[MetaPath],
    cfg: &SkipGramConfig,
) -> MetaPathEmbeddings {
    let d = cfg.dim;
    let mut tables = Vec::with_capacity(paths.len());
    for pi in 0..paths.len() {
        let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
        for walks in corpus.by_start_type.values() {
            for walk in walks.iter().filter(|w| w.path_index == pi) {
                for &v in &walk.nodes {
                    *counts.entry(v).or_insert(0) += 1;
                }
            }
        }
        let nodes: Vec<NodeId> = counts.keys().cloned().collect();
        let index: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();

        let mut rng = Rng::stream(cfg.seed, &[0x1417, pi as u64]);
        let mut target = Vec::with_capacity(nodes.len() * d);
        for _ in 0..nodes.len() * d {
            target.push(rng.uniform(-0.5, 0.5) / d as f64);
        }
        let context = vec![0.0; nodes.len() * d];

        // per-type negative tables, unigram^0.75
        let mut neg_tables: BTreeMap<TypeId, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for (row, &v) in nodes.iter().enumerate() {
            let t = hin.node_type(v);
            let entry = neg_tables.entry(t).or_default();
            entry.0.push(row);
            let w = (counts[&v] as f64).powf(0.75);
            let prev = entry.1.last().copied().unwrap_or(0.0);
            entry.1.push(prev + w);
        }

        tables.push(PathTable {
            dim: d,
            nodes,
            index,
            target,
            context,
            neg_tables,
        });
    }
    MetaPathEmbeddings { dim: d, tables }
}

/// Pretrain: init tables, run `cfg.epochs` corpus passes, return the tables
/// and the per-epoch mean losses.
pub fn train_skipgram(
    hin: &Hin,
    corpus: &WalkCorpus,
    paths: &[MetaPath],
    cfg: &SkipGramConfig,
) -> (MetaPathEmbeddings, Vec<f64>) {
    assert!(corpus.n_walks() > 0, "empty corpus");
    let mut trainer = SkipGramTrainer::new(hin, corpus, paths, cfg.clone());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        losses.push(trainer.epoch(e as u64));
    }
    (trainer.emb, losses)
}

/// Per-type affine fusion maps, initialized near identity.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub dim: usize,
    /// Per node type: (row-major d x d matrix, length-d bias).
    pub per_type: BTreeMap<TypeId, (Vec<f64>, Vec<f64>)>,
}

impl FusionParams {
    pub fn identity_init(hin: &Hin, dim: usize, seed: u64) -> Self {
        let mut per_type = BTreeMap::new();
        for (t, _) in hin.schema().node_types() {
            let mut rng = Rng::stream(seed, &[0xf51, t.0 as u64]);
            let mut m = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..dim {
                    m[r * dim + c] = if r == c { 1.0 } else { 0.0 } + rng.uniform(-0.01, 0.01);
                }
            }
            per_type.insert(t, (m, vec![0.0; dim]));
        }
        FusionParams { dim, per_type }
    }

    /// c = M v + b for the given node type.
    pub fn apply(&self, t: TypeId, v: &[f64], out: &mut [f64]) {
        let (m, b) = &self.per_type[&t];
        let d = self.dim;
        for r in 0..d {
            out[r] = b[r] + dot(&m[r * d..(r + 1) * d], v);
        }
    }
}

/// Mean of per-path target vectors for every node, plus which tables carry it.
/// This is the linear input to the fusion map and is cached for backprop.
#[derive(Clone, Debug)]
pub struct NodeMeans {
    pub dim: usize,
    /// n_nodes x d, zero rows for nodes absent from every corpus.
    pub means: Vec<f64>,
    pub paths_with: Vec<Vec<(usize, usize)>>,
}

impl NodeMeans {
    pub fn mean(&self, v: NodeId) -> &[f64] {
        &self.means[v.idx() * self.dim..(v.idx() + 1) * self.dim]
    }

    pub fn coverage(&self, v: NodeId) -> usize {
        self.paths_with[v.idx()].len()
    }
}

pub fn node_means(hin: &Hin, emb: &MetaPathEmbeddings) -> NodeMeans {
    let d = emb.dim;
    let n = hin.n_nodes();
    let mut means = vec![0.0; n * d];
    let mut paths_with: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (pi, table) in emb.tables.iter().enumerate() {
        for (row, &v) in table.nodes.iter().enumerate() {
            paths_with[v.idx()].push((pi, row));
        }
    }
    for v in 0..n {
        let j = paths_with[v].len();
        if j == 0 {
            continue;
        }
        let out = &mut means[v * d..(v + 1) * d];
        for &(pi, row) in &paths_with[v] {
            axpy(1.0, emb.tables[pi].target_vec(row), out);
        }
        for x in out.iter_mut() {
            *x /= j as f64;
        }
    }
    NodeMeans {
        dim: d,
        means,
        paths_with,
    }
}

/// Fused context bank: one vector per user and item node, one vector per
/// aspect *type* (node-wise mean over that type), plus the flagged nodes that
/// appeared in no walk.
#[derive(Clone, Debug)]
pub struct ContextBank {
    pub dim: usize,
    pub users: Vec<NodeId>,
    pub user_vecs: Vec<f64>,
    pub items: Vec<NodeId>,
    pub item_vecs: Vec<f64>,
    pub aspect_types: Vec<TypeId>,
    pub aspect_names: Vec<String>,
    pub aspect_vecs: Vec<f64>,
    /// Nodes that had no per-path vector and were assigned zeros.
    pub uncovered: Vec<NodeId>,
}

impl ContextBank {
    pub fn n_aspects(&self) -> usize {
        self.aspect_types.len()
    }

    pub fn user_vec(&self, row: usize) -> &[f64] {
        &self.user_vecs[row * self.dim..(row + 1) * self.dim]
    }

    pub fn item_vec(&self, col: usize) -> &[f64] {
        &self.item_vecs[col * self.dim..(col + 1) * self.dim]
    }

    pub fn aspect_vec(&self, a: usize) -> &[f64] {
        &self.aspect_vecs[a * self.dim..(a + 1) * self.dim]
    }
}

/// Fuse per-path embeddings into the context bank with the per-type affine
/// maps: c = (1/J) sum_j (M c_j + b), aspect types then averaged node-wise.
pub fn fuse_embeddings(hin: &Hin, means: &NodeMeans, params: &FusionParams) -> ContextBank {
    let d = params.dim;
    let ik = hin.schema().interaction_kind().clone();
    let users = hin.nodes_of_type(ik.source_type);
    let items = hin.nodes_of_type(ik.target_type);

    let mut uncovered = Vec::new();
    let fuse_list = |nodes: &[NodeId], t: TypeId, uncovered: &mut Vec<NodeId>| -> Vec<f64> {
        let mut out = vec![0.0; nodes.len() * d];
        for (i, &v) in nodes.iter().enumerate() {
            if means.coverage(v) == 0 {
                uncovered.push(v);
                continue; // zero vector, flagged
            }
            params.apply(t, means.mean(v), &mut out[i * d..(i + 1) * d]);
        }
        out
    };

    let user_vecs = fuse_list(&users, ik.source_type, &mut uncovered);
    let item_vecs = fuse_list(&items, ik.target_type, &mut uncovered);

    let mut aspect_types = Vec::new();
    let mut aspect_names = Vec::new();
    let mut aspect_vecs = Vec::new();
    for (t, name) in hin.schema().node_types() {
        if t == ik.source_type || t == ik.target_type {
            continue;
        }
        let nodes = hin.nodes_of_type(t);
        if nodes.is_empty() {
            continue;
        }
        // type-level vector: mean of fused vectors over covered nodes
        let mut acc = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut covered = 0usize;
        for &v in &nodes {
            if means.coverage(v) == 0 {
                uncovered.push(v);
                continue;
            }
            params.apply(t, means.mean(v), &mut tmp);
            axpy(1.0, &tmp, &mut acc);
            covered += 1;
        }
        if covered > 0 {
            for x in acc.iter_mut() {
                *x /= covered as f64;
            }
        }
        aspect_types.push(t);
        aspect_names.push(name.to_string());
        aspect_vecs.extend_from_slice(&acc);
    }

    uncovered.sort_unstable();
    uncovered.dedup();
    ContextBank {
        dim: d,
        users,
        user_vecs,
        items,
        item_vecs,
        aspect_types,
        aspect_names,
        aspect_vecs,
        uncovered,
    }
}
