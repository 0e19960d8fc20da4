//! Disentangled intent representations over the user-item interaction graph.
//!
//! Each d-dimensional embedding is split into k contiguous chunks, one per
//! latent intent. Per layer the module resets per-edge routing scores to 1/k
//! and runs routing rounds of (softmax-normalize -> degree-normalized
//! weighted aggregation -> affinity score update), then maps chunks through a
//! per-layer affine+tanh and sums layer outputs into the final
//! representations. The backward pass is hand-derived and verified against
//! finite differences.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::hin::InteractionMatrix;
use crate::vecmath::dot;

#[derive(Error, Debug)]
pub enum IntentsError {
    #[error("dim {dim} not divisible by k {k}")]
    ChunkMismatch { dim: usize, k: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug)]
pub struct DisentangleConfig {
    /// Intent count k.
    pub k: usize,
    /// Routing rounds per layer.
    pub iters_l: usize,
    /// Propagation depth L.
    pub layers_l: usize,
    /// Total embedding width d.
    pub dim: usize,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        DisentangleConfig {
            k: 4,
            iters_l: 2,
            layers_l: 2,
            dim: 64,
        }
    }
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<(), IntentsError> {
        if self.k == 0 || self.iters_l == 0 || self.layers_l == 0 {
            return Err(IntentsError::BadConfig(
                "k, iters_l, layers_l must be >= 1".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.k) {
            return Err(IntentsError::ChunkMismatch {
                dim: self.dim,
                k: self.k,
            });
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.dim / self.k
    }
}

/// A d-vector split into k contiguous intent chunks of d/k each.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedEmbedding {
    pub k: usize,
    pub data: Vec<f64>,
}

impl ChunkedEmbedding {
    pub fn chunk_len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn chunk(&self, j: usize) -> &[f64] {
        let c = self.chunk_len();
        &self.data[j * c..(j + 1) * c]
    }
}

/// Chunk j is the contiguous slice [j*d/k, (j+1)*d/k).
pub fn init_chunks(
    id_embedding: &[f64],
    cfg: &DisentangleConfig,
) -> Result<ChunkedEmbedding, IntentsError> {
    if !id_embedding.len().is_multiple_of(cfg.k) || id_embedding.len() != cfg.dim {
        return Err(IntentsError::ChunkMismatch {
            dim: id_embedding.len(),
            k: cfg.k,
        });
    }
    Ok(ChunkedEmbedding {
        k: cfg.k,
        data: id_embedding.to_vec(),
    })
}

/// Interaction graph in edge-list form with per-user ranges (edges sorted by
/// (user, item)) and per-item edge indices.
#[derive(Clone, Debug)]
pub struct IntentGraph {
    pub m: usize,
    pub n: usize,
    pub edges: Vec<(u32, u32)>,
    pub user_ranges: Vec<(u32, u32)>,
    pub item_edges: Vec<Vec<u32>>,
}

impl IntentGraph {
    pub fn from_interactions(inter: &InteractionMatrix) -> Self {
        let edges = inter.edges();
        let m = inter.m();
        let n = inter.n();
        let mut user_ranges = vec![(0u32, 0u32); m];
        let mut item_edges: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut e = 0usize;
        for u in 0..m {
            let start = e;
            while e < edges.len() && edges[e].0 == u as u32 {
                item_edges[edges[e].1 as usize].push(e as u32);
                e += 1;
            }
            user_ranges[u] = (start as u32, e as u32);
        }
        IntentGraph {
            m,
            n,
            edges,
            user_ranges,
            item_edges,
        }
    }

    /// Build from per-user sorted item-column sets (e.g. a training split).
    pub fn from_user_sets(m: usize, n: usize, sets: &[Vec<u32>]) -> Self {
        assert_eq!(sets.len(), m);
        let mut edges = Vec::new();
        let mut user_ranges = vec![(0u32, 0u32); m];
        let mut item_edges: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (u, items) in sets.iter().enumerate() {
            let start = edges.len() as u32;
            for &i in items {
                item_edges[i as usize].push(edges.len() as u32);
                edges.push((u as u32, i));
            }
            user_ranges[u] = (start, edges.len() as u32);
        }
        IntentGraph {
            m,
            n,
            edges,
            user_ranges,
            item_edges,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn user_degree(&self, u: usize) -> usize {
        let (a, b) = self.user_ranges[u];
        (b - a) as usize
    }
}

/// Raw per-edge intent scores S_k(u, i), defined on observed edges only.
#[derive(Clone, Debug)]
pub struct IntentScoreMatrix {
    pub k: usize,
    /// E x k, row per edge in graph order.
    pub scores: Vec<f64>,
}

/// Every observed edge starts with the uniform score vector 1/k.
pub fn init_scores(graph: &IntentGraph, cfg: &DisentangleConfig) -> IntentScoreMatrix {
    IntentScoreMatrix {
        k: cfg.k,
        scores: vec![1.0 / cfg.k as f64; graph.n_edges() * cfg.k],
    }
}

/// Softmax-normalized scores plus per-(node, intent) degree totals.
#[derive(Clone, Debug)]
pub struct NormalizedScores {
    pub k: usize,
    /// E x k softmax rows.
    pub tilde: Vec<f64>,
    /// m x k: D_k(u) = sum of tilde over the user's edges.
    pub user_degree: Vec<f64>,
    /// n x k: D_k(i) symmetric.
    pub item_degree: Vec<f64>,
}

static NORMALIZE_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Violations of the routing-normalization invariant (row sum within 1e-9 of
/// one and strictly positive entries) observed so far in this process.
pub fn normalize_violation_count() -> u64 {
    NORMALIZE_VIOLATIONS.load(Ordering::Relaxed)
}

/// Per-edge softmax across intents with degree accumulation. The invariant
/// check runs on every call; violations are counted, never silently dropped.
pub fn normalize_scores(graph: &IntentGraph, raw: &IntentScoreMatrix) -> NormalizedScores {
    let k = raw.k;
    let mut tilde = vec![0.0; raw.scores.len()];
    for (row, chunk) in raw.scores.chunks_exact(k).enumerate() {
        let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut tilde[row * k..(row + 1) * k];
        let mut sum = 0.0;
        for (o, &s) in out.iter_mut().zip(chunk) {
            *o = (s - max).exp();
            sum += *o;
        }
        let mut rowsum = 0.0;
        for o in out.iter_mut() {
            *o /= sum;
            rowsum += *o;
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // !(x > 0) also catches NaN
        let nonpositive = out.iter().any(|&x| !(x > 0.0));
        if (rowsum - 1.0).abs() > 1e-9 || nonpositive {
            NORMALIZE_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
    }
    let mut user_degree = vec![0.0; graph.m * k];
    let mut item_degree = vec![0.0; graph.n * k];
    for (e, &(u, i)) in graph.edges.iter().enumerate() {
        for j in 0..k {
            let t = tilde[e * k + j];
            user_degree[u as usize * k + j] += t;
            item_degree[i as usize * k + j] += t;
        }
    }
    NormalizedScores {
        k,
        tilde,
        user_degree,
        item_degree,
    }
}

/// Weighted-sum aggregation: per user and intent j,
/// x_j(u) = sum over edges (u,i) of tilde_j(u,i)/sqrt(D_j(u) D_j(i)) * i_j.
/// Isolated users keep a zero aggregate (callers carry their chunks instead).
pub fn aggregate(
    graph: &IntentGraph,
    norm: &NormalizedScores,
    item_chunks: &[f64],
    cfg: &DisentangleConfig,
) -> Vec<f64> {
    let k = cfg.k;
    let c = cfg.chunk_len();
    let d = cfg.dim;
    let mut x = vec![0.0; graph.m * d];
    for (e, &(u, i)) in graph.edges.iter().enumerate() {
        let (u, i) = (u as usize, i as usize);
        for j in 0..k {
            let du = norm.user_degree[u * k + j];
            let di = norm.item_degree[i * k + j];
            let w = norm.tilde[e * k + j] / (du * di).sqrt();
            let src = &item_chunks[i * d + j * c..i * d + (j + 1) * c];
            let dst = &mut x[u * d + j * c..u * d + (j + 1) * c];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    x
}

/// Affinity update: S_j(u,i) += x_j(u) . tanh(i_j).
pub fn update_scores(
    graph: &IntentGraph,
    raw: &mut IntentScoreMatrix,
    x: &[f64],
    item_chunks: &[f64],
    cfg: &DisentangleConfig,
) {
    let k = cfg.k;
    let c = cfg.chunk_len();
    let d = cfg.dim;
    for (e, &(u, i)) in graph.edges.iter().enumerate() {
        let (u, i) = (u as usize, i as usize);
        for j in 0..k {
            let xj = &x[u * d + j * c..u * d + (j + 1) * c];
            let ij = &item_chunks[i * d + j * c..i * d + (j + 1) * c];
            let aff: f64 = xj.iter().zip(ij).map(|(a, &b)| a * b.tanh()).sum();
            raw.scores[e * k + j] += aff;
        }
    }
}

/// Deterministic k-means over the rows of an n x d matrix. Rows are
/// L2-normalized first (cluster by direction, not magnitude); seeded
/// kmeans++ initialization with a fixed number of restarts, keeping the
/// lowest-inertia assignment. Used to associate intent chunks with clusters
/// of the pretrained item geometry.
pub fn kmeans_rows(mat: &[f64], n: usize, d: usize, k: usize, seed: u64) -> Vec<usize> {
    assert_eq!(mat.len(), n * d);
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut unit = mat.to_vec();
    for i in 0..n {
        let r = &mut unit[i * d..(i + 1) * d];
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in r.iter_mut() {
                *x /= norm;
            }
        }
    }
    let row = |i: usize| &unit[i * d..(i + 1) * d];
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..4u64 {
        let mut rng = crate::rng::Rng::stream(seed, &[0x6ea5, restart]);
        let mut centroids: Vec<Vec<f64>> = vec![row(rng.below(n)).to_vec()];
        while centroids.len() < k {
            let weights: Vec<f64> = (0..n)
                .map(|i| {
                    centroids
                        .iter()
                        .map(|c| dist2(row(i), c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                centroids.push(row(rng.below(n)).to_vec());
                continue;
            }
            let mut cum = Vec::with_capacity(n);
            let mut acc = 0.0;
            for w in &weights {
                acc += w;
                cum.push(acc);
            }
            centroids.push(row(rng.weighted(&cum)).to_vec());
        }
        let mut assign = vec![0usize; n];
        for _ in 0..25 {
            for (i, a) in assign.iter_mut().enumerate() {
                let mut nearest = (f64::INFINITY, 0usize);
                for (c, centroid) in centroids.iter().enumerate() {
                    let d2 = dist2(row(i), centroid);
                    if d2 < nearest.0 {
                        nearest = (d2, c);
                    }
                }
                *a = nearest.1;
            }
            let mut counts = vec![0usize; k];
            let mut sums = vec![vec![0.0; d]; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(row(i)) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            dist2(row(a), &centroids[assign[a]])
                                .partial_cmp(&dist2(row(b), &centroids[assign[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    centroids[c] = row(far).to_vec();
                    continue;
                }
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        let inertia: f64 = (0..n).map(|i| dist2(row(i), &centroids[assign[i]])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.unwrap().1
}

/// Per-layer affine map applied chunk-wise (the same map to every chunk),
/// followed by tanh.
#[derive(Clone, Debug)]
pub struct LayerParams {
    /// Row-major (d/k) x (d/k).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LayerParams {
    pub fn identity(chunk_len: usize) -> Self {
        let mut w = vec![0.0; chunk_len * chunk_len];
        for i in 0..chunk_len {
            w[i * chunk_len + i] = 1.0;
        }
        LayerParams {
            w,
            b: vec![0.0; chunk_len],
        }
    }
}

struct RoundCache {
    tilde: Vec<f64>,
    user_degree: Vec<f64>,
    item_degree: Vec<f64>,
    x: Vec<f64>,
}

struct LayerCache {
    item_in: Vec<f64>,
    rounds: Vec<RoundCache>,
    user_out: Vec<f64>,
    item_out: Vec<f64>,
}

/// Forward pass output with everything the backward pass needs.
pub struct Forward {
    pub cfg: DisentangleConfig,
    /// Final user representations u^u, sum over layer outputs (m x d).
    pub user_repr: Vec<f64>,
    /// Final item representations i^i (n x d).
    pub item_repr: Vec<f64>,
    /// Softmax of the last layer's final scores (E x k), for intent readout.
    pub edge_tilde: Vec<f64>,
    layers: Vec<LayerCache>,
}

/// Gradients produced by the backward pass.
pub struct IntentsGrads {
    pub user_ids: Vec<f64>,
    pub item_ids: Vec<f64>,
    pub layer_w: Vec<Vec<f64>>,
    pub layer_b: Vec<Vec<f64>>,
}

/// Full forward pass. `user_ids` is m x d, `item_ids` is n x d; both are
/// consumed as chunked layer-0 representations.
pub fn forward(
    graph: &IntentGraph,
    user_ids: &[f64],
    item_ids: &[f64],
    layer_params: &[LayerParams],
    cfg: &DisentangleConfig,
) -> Result<Forward, IntentsError> {
    cfg.validate()?;
    if layer_params.len() != cfg.layers_l {
        return Err(IntentsError::BadConfig(format!(
            "expected {} layer parameter sets, got {}",
            cfg.layers_l,
            layer_params.len()
        )));
    }
    let d = cfg.dim;
    let k = cfg.k;
    let c = cfg.chunk_len();
    assert_eq!(user_ids.len(), graph.m * d);
    assert_eq!(item_ids.len(), graph.n * d);

    let mut user_prev = user_ids.to_vec();
    let mut item_prev = item_ids.to_vec();
    let mut user_repr = vec![0.0; graph.m * d];
    let mut item_repr = vec![0.0; graph.n * d];
    let mut layers = Vec::with_capacity(cfg.layers_l);
    let mut edge_tilde = vec![1.0 / k as f64; graph.n_edges() * k];

    for lp in layer_params {
        let mut scores = init_scores(graph, cfg);
        let mut rounds = Vec::with_capacity(cfg.iters_l);
        for _ in 0..cfg.iters_l {
            let norm = normalize_scores(graph, &scores);
            let x = aggregate(graph, &norm, &item_prev, cfg);
            update_scores(graph, &mut scores, &x, &item_prev, cfg);
            rounds.push(RoundCache {
                tilde: norm.tilde,
                user_degree: norm.user_degree,
                item_degree: norm.item_degree,
                x,
            });
        }
        // intent readout: softmax of the final (post-update) scores
        edge_tilde = normalize_scores(graph, &scores).tilde;

        let x_final = &rounds.last().unwrap().x;
        let mut user_out = vec![0.0; graph.m * d];
        let mut item_out = vec![0.0; graph.n * d];
        for u in 0..graph.m {
            if graph.user_degree(u) == 0 {
                user_out[u * d..(u + 1) * d].copy_from_slice(&user_prev[u * d..(u + 1) * d]);
                continue;
            }
            affine_tanh(lp, &x_final[u * d..(u + 1) * d], &mut user_out[u * d..(u + 1) * d], k, c);
        }
        for i in 0..graph.n {
            if graph.item_edges[i].is_empty() {
                item_out[i * d..(i + 1) * d].copy_from_slice(&item_prev[i * d..(i + 1) * d]);
                continue;
            }
            affine_tanh(lp, &item_prev[i * d..(i + 1) * d], &mut item_out[i * d..(i + 1) * d], k, c);
        }
        for (acc, &v) in user_repr.iter_mut().zip(&user_out) {
            *acc += v;
        }
        for (acc, &v) in item_repr.iter_mut().zip(&item_out) {
            *acc += v;
        }
        user_prev = user_out.clone();
        layers.push(LayerCache {
            item_in: std::mem::replace(&mut item_prev, item_out.clone()),
            rounds,
            user_out,
            item_out,
        });
    }

    Ok(Forward {
        cfg: *cfg,
        user_repr,
        item_repr,
        edge_tilde,
        layers,
    })
}

fn affine_tanh(lp: &LayerParams, input: &[f64], out: &mut [f64], k: usize, c: usize) {
    for j in 0..k {
        let src = &input[j * c..(j + 1) * c];
        let dst = &mut out[j * c..(j + 1) * c];
        for r in 0..c {
            dst[r] = (lp.b[r] + dot(&lp.w[r * c..(r + 1) * c], src)).tanh();
        }
    }
}

/// Backward pass: given dL/d(user_repr) and dL/d(item_repr), produce
/// gradients for the ID embeddings and the layer parameters.
pub fn backward(
    graph: &IntentGraph,
    fwd: &Forward,
    layer_params: &[LayerParams],
    grad_user_repr: &[f64],
    grad_item_repr: &[f64],
) -> IntentsGrads {
    let cfg = &fwd.cfg;
    let d = cfg.dim;
    let k = cfg.k;
    let c = cfg.chunk_len();
    let mut grad_w: Vec<Vec<f64>> = layer_params.iter().map(|lp| vec![0.0; lp.w.len()]).collect();
    let mut grad_b: Vec<Vec<f64>> = layer_params.iter().map(|lp| vec![0.0; lp.b.len()]).collect();

    // carry into u_(t-1) (isolated users) and flow into i_(t-1)
    let mut carry_u = vec![0.0; graph.m * d];
    let mut flow_i = vec![0.0; graph.n * d];

    for (t, cache) in fwd.layers.iter().enumerate().rev() {
        let lp = &layer_params[t];
        let gw = &mut grad_w[t];
        let gb = &mut grad_b[t];

        // total gradient arriving at this layer's outputs
        let mut new_carry_u = vec![0.0; graph.m * d];
        let mut new_flow_i = vec![0.0; graph.n * d];
        let mut grad_x = vec![0.0; graph.m * d];

        for u in 0..graph.m {
            let acc: Vec<f64> = (0..d)
                .map(|r| grad_user_repr[u * d + r] + carry_u[u * d + r])
                .collect();
            if graph.user_degree(u) == 0 {
                // carried chunk: gradient passes through to u_(t-1)
                for r in 0..d {
                    new_carry_u[u * d + r] += acc[r];
                }
                continue;
            }
            // through tanh(W x + b), chunk-wise
            let y = &cache.user_out[u * d..(u + 1) * d];
            let x_in = &cache.rounds.last().unwrap().x[u * d..(u + 1) * d];
            affine_tanh_backward(lp, &acc, y, x_in, gw, gb, Some(&mut grad_x[u * d..(u + 1) * d]), k, c);
        }

        for i in 0..graph.n {
            let acc: Vec<f64> = (0..d)
                .map(|r| grad_item_repr[i * d + r] + flow_i[i * d + r])
                .collect();
            if graph.item_edges[i].is_empty() {
                for r in 0..d {
                    new_flow_i[i * d + r] += acc[r];
                }
                continue;
            }
            let y = &cache.item_out[i * d..(i + 1) * d];
            let x_in = &cache.item_in[i * d..(i + 1) * d];
            affine_tanh_backward(lp, &acc, y, x_in, gw, gb, Some(&mut new_flow_i[i * d..(i + 1) * d]), k, c);
        }

        // routing backward: propagate grad_x through the rounds into item_in
        routing_backward(graph, cfg, cache, &grad_x, &mut new_flow_i);

        carry_u = new_carry_u;
        flow_i = new_flow_i;
    }

    IntentsGrads {
        user_ids: carry_u,
        item_ids: flow_i,
        layer_w: grad_w,
        layer_b: grad_b,
    }
}

#[allow(clippy::too_many_arguments)]
fn affine_tanh_backward(
    lp: &LayerParams,
    grad_out: &[f64],
    y: &[f64],
    x_in: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
    k: usize,
    c: usize,
) {
    for j in 0..k {
        for r in 0..c {
            let g_pre = grad_out[j * c + r] * (1.0 - y[j * c + r] * y[j * c + r]);
            gb[r] += g_pre;
            for s in 0..c {
                gw[r * c + s] += g_pre * x_in[j * c + s];
            }
            if let Some(gin) = grad_in.as_deref_mut() {
                for s in 0..c {
                    gin[j * c + s] += g_pre * lp.w[r * c + s];
                }
            }
        }
    }
}

/// Reverse the routing rounds of one layer. `grad_x_last` is dL/dx for the
/// final round's aggregate; gradients w.r.t. the layer's item inputs are
/// accumulated into `grad_item_in`.
fn routing_backward(
    graph: &IntentGraph,
    cfg: &DisentangleConfig,
    cache: &LayerCache,
    grad_x_last: &[f64],
    grad_item_in: &mut [f64],
) {
    let d = cfg.dim;
    let k = cfg.k;
    let c = cfg.chunk_len();
    let ne = graph.n_edges();
    let item_in = &cache.item_in;

    // dL/dS^(l+1), zero beyond the last round (the post-update readout
    // carries no loss)
    let mut grad_s_next = vec![0.0; ne * k];

    for (l, round) in cache.rounds.iter().enumerate().rev() {
        let last = l + 1 == cache.rounds.len();

        // gradient reaching this round's aggregate x^l
        let mut grad_x = vec![0.0; graph.m * d];
        if last {
            grad_x.copy_from_slice(grad_x_last);
        }
        // update step: S^(l+1) = S^l + x^l . tanh(item_in)
        for (e, &(u, i)) in graph.edges.iter().enumerate() {
            let (u, i) = (u as usize, i as usize);
            for j in 0..k {
                let gs = grad_s_next[e * k + j];
                if gs == 0.0 {
                    continue;
                }
                let xj = &round.x[u * d + j * c..u * d + (j + 1) * c];
                let ij = &item_in[i * d + j * c..i * d + (j + 1) * c];
                let gx = &mut grad_x[u * d + j * c..u * d + (j + 1) * c];
                for s in 0..c {
                    let th = ij[s].tanh();
                    gx[s] += gs * th;
                    grad_item_in[i * d + j * c + s] += gs * xj[s] * (1.0 - th * th);
                }
            }
        }

        // aggregate step: x = sum_e w_e * item_in, w_e = tilde / sqrt(Du Di)
        let mut grad_tilde = vec![0.0; ne * k];
        let mut grad_du = vec![0.0; graph.m * k];
        let mut grad_di = vec![0.0; graph.n * k];
        for (e, &(u, i)) in graph.edges.iter().enumerate() {
            let (u, i) = (u as usize, i as usize);
            for j in 0..k {
                let du = round.user_degree[u * k + j];
                let di = round.item_degree[i * k + j];
                let denom = (du * di).sqrt();
                let w = round.tilde[e * k + j] / denom;
                let gx = &grad_x[u * d + j * c..u * d + (j + 1) * c];
                let ij = &item_in[i * d + j * c..i * d + (j + 1) * c];
                // dL/d(item_in) via the aggregation path
                for s in 0..c {
                    grad_item_in[i * d + j * c + s] += w * gx[s];
                }
                let gw_e = dot(gx, ij);
                grad_tilde[e * k + j] += gw_e / denom;
                grad_du[u * k + j] += gw_e * (-w / (2.0 * du));
                grad_di[i * k + j] += gw_e * (-w / (2.0 * di));
            }
        }
        // degrees are sums of tilde over incident edges
        for (e, &(u, i)) in graph.edges.iter().enumerate() {
            let (u, i) = (u as usize, i as usize);
            for j in 0..k {
                grad_tilde[e * k + j] += grad_du[u * k + j] + grad_di[i * k + j];
            }
        }

        // softmax backward per edge row, then add the identity path from the
        // update step (dS^(l+1)/dS^l = I)
        let mut grad_s = vec![0.0; ne * k];
        for e in 0..ne {
            let t_row = &round.tilde[e * k..(e + 1) * k];
            let g_row = &grad_tilde[e * k..(e + 1) * k];
            let inner: f64 = t_row.iter().zip(g_row).map(|(&t, &g)| t * g).sum();
            for j in 0..k {
                grad_s[e * k + j] = t_row[j] * (g_row[j] - inner) + grad_s_next[e * k + j];
            }
        }
        grad_s_next = grad_s;
        // at l = 0 the raw scores are the constant 1/k: gradient stops here
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn graph_from_edges(m: usize, n: usize, edges: &[(u32, u32)]) -> IntentGraph {
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        let mut user_ranges = vec![(0u32, 0u32); m];
        let mut item_edges: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut e = 0usize;
        for u in 0..m {
            let start = e;
            while e < sorted.len() && sorted[e].0 == u as u32 {
                item_edges[sorted[e].1 as usize].push(e as u32);
                e += 1;
            }
            user_ranges[u] = (start as u32, e as u32);
        }
        IntentGraph {
            m,
            n,
            edges: sorted,
            user_ranges,
            item_edges,
        }
    }

    #[test]
    fn chunk_slicing_definition() {
        let cfg = DisentangleConfig {
            k: 4,
            iters_l: 1,
            layers_l: 1,
            dim: 8,
        };
        let v: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let ch = init_chunks(&v, &cfg).unwrap();
        assert_eq!(ch.chunk(0), &[1.0, 2.0]);
        assert_eq!(ch.chunk(1), &[3.0, 4.0]);
        assert_eq!(ch.chunk(2), &[5.0, 6.0]);
        assert_eq!(ch.chunk(3), &[7.0, 8.0]);
        // k = 1: single chunk equals the input
        let cfg1 = DisentangleConfig { k: 1, dim: 8, ..cfg };
        let one = init_chunks(&v, &cfg1).unwrap();
        assert_eq!(one.chunk(0), v.as_slice());
        // concat round-trip
        assert_eq!(ch.data, v);
    }

    #[test]
    fn chunk_mismatch_rejected() {
        let cfg = DisentangleConfig {
            k: 3,
            iters_l: 1,
            layers_l: 1,
            dim: 8,
        };
        assert!(matches!(
            cfg.validate(),
            Err(IntentsError::ChunkMismatch { .. })
        ));
    }

    #[test]
    fn scores_initialize_uniform() {
        let g = graph_from_edges(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        let cfg = DisentangleConfig {
            k: 4,
            iters_l: 1,
            layers_l: 1,
            dim: 8,
        };
        let s = init_scores(&g, &cfg);
        assert_eq!(s.scores.len(), 3 * 4);
        assert!(s.scores.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let cfg1 = DisentangleConfig { k: 1, dim: 8, ..cfg };
        let s1 = init_scores(&g, &cfg1);
        assert!(s1.scores.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn softmax_rows_and_hand_case() {
        let g = graph_from_edges(1, 2, &[(0, 0), (0, 1)]);
        let cfg = DisentangleConfig {
            k: 2,
            iters_l: 1,
            layers_l: 1,
            dim: 4,
        };
        let mut raw = init_scores(&g, &cfg);
        // row 0: equal scores -> 0.5, 0.5; row 1: [0, ln 2] -> [1/3, 2/3]
        raw.scores[2] = 0.0;
        raw.scores[3] = std::f64::consts::LN_2;
        let norm = normalize_scores(&g, &raw);
        assert!((norm.tilde[0] - 0.5).abs() < 1e-12);
        assert!((norm.tilde[2] - 1.0 / 3.0).abs() < 1e-12);
        assert!((norm.tilde[3] - 2.0 / 3.0).abs() < 1e-12);
        // degrees
        assert!((norm.user_degree[0] - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        assert!((norm.item_degree[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_randomized() {
        let g = graph_from_edges(3, 3, &[(0, 0), (0, 1), (1, 1), (2, 2)]);
        let cfg = DisentangleConfig {
            k: 4,
            iters_l: 1,
            layers_l: 1,
            dim: 8,
        };
        let mut rng = Rng::new(8);
        let mut raw = init_scores(&g, &cfg);
        for s in raw.scores.iter_mut() {
            *s = rng.uniform(-5.0, 5.0);
        }
        let before = normalize_violation_count();
        let norm = normalize_scores(&g, &raw);
        assert_eq!(normalize_violation_count(), before);
        for row in norm.tilde.chunks_exact(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(row.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn single_edge_aggregate_copies_item_chunk() {
        // degenerate graph: one edge, k = 1 -> x = item chunk exactly
        let g = graph_from_edges(1, 1, &[(0, 0)]);
        let cfg = DisentangleConfig {
            k: 1,
            iters_l: 1,
            layers_l: 1,
            dim: 3,
        };
        let raw = init_scores(&g, &cfg);
        let norm = normalize_scores(&g, &raw);
        let item = vec![0.3, -0.7, 2.0];
        let x = aggregate(&g, &norm, &item, &cfg);
        for (a, b) in x.iter().zip(&item) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_tiny_brute_force() {
        // user 0 with two items sharing identical chunks and equal scores
        let g = graph_from_edges(1, 2, &[(0, 0), (0, 1)]);
        let cfg = DisentangleConfig {
            k: 1,
            iters_l: 1,
            layers_l: 1,
            dim: 2,
        };
        let raw = init_scores(&g, &cfg);
        let norm = normalize_scores(&g, &raw);
        let v = [0.5, -1.0];
        let item = vec![v[0], v[1], v[0], v[1]];
        let x = aggregate(&g, &norm, &item, &cfg);
        // brute force: tilde = 1 per edge; Du = 2, Di = 1 each
        // x = 2 * (1/sqrt(2*1)) * v
        for r in 0..2 {
            let expect = 2.0 * (1.0 / (2.0f64).sqrt()) * v[r];
            assert!((x[r] - expect).abs() < 1e-12, "{} vs {}", x[r], expect);
        }
    }

    #[test]
    fn aggregate_is_linear_in_item_chunks() {
        let g = graph_from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let cfg = DisentangleConfig {
            k: 2,
            iters_l: 1,
            layers_l: 1,
            dim: 4,
        };
        let mut rng = Rng::new(3);
        let mut raw = init_scores(&g, &cfg);
        for s in raw.scores.iter_mut() {
            *s = rng.uniform(-1.0, 1.0);
        }
        let norm = normalize_scores(&g, &raw);
        let items: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x1 = aggregate(&g, &norm, &items, &cfg);
        let scaled: Vec<f64> = items.iter().map(|&v| 3.0 * v).collect();
        let x3 = aggregate(&g, &norm, &scaled, &cfg);
        for (a, b) in x3.iter().zip(&x1) {
            assert!((a - 3.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn update_scores_hand_cases() {
        let g = graph_from_edges(1, 1, &[(0, 0)]);
        let cfg = DisentangleConfig {
            k: 1,
            iters_l: 1,
            layers_l: 1,
            dim: 2,
        };
        let mut raw = init_scores(&g, &cfg);
        // x = 0 leaves scores unchanged
        update_scores(&g, &mut raw, &[0.0, 0.0], &[1.0, 1.0], &cfg);
        assert!((raw.scores[0] - 1.0).abs() < 1e-15);
        // x = i = ones: increment = 2 tanh(1)
        update_scores(&g, &mut raw, &[1.0, 1.0], &[1.0, 1.0], &cfg);
        let expect = 1.0 + 2.0 * 1.0f64.tanh();
        assert!((raw.scores[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn update_scores_matches_scalar_loop_oracle() {
        let g = graph_from_edges(2, 3, &[(0, 0), (0, 2), (1, 1), (1, 2)]);
        let cfg = DisentangleConfig {
            k: 2,
            iters_l: 1,
            layers_l: 1,
            dim: 6,
        };
        let mut rng = Rng::new(77);
        let x: Vec<f64> = (0..2 * 6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let items: Vec<f64> = (0..3 * 6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut raw = init_scores(&g, &cfg);
        let mut oracle = raw.scores.clone();
        // independent scalar loop
        for (e, &(u, i)) in g.edges.iter().enumerate() {
            for j in 0..2 {
                let mut inc = 0.0;
                for s in 0..3 {
                    let xv = x[u as usize * 6 + j * 3 + s];
                    let iv = items[i as usize * 6 + j * 3 + s];
                    inc += xv * iv.tanh();
                }
                oracle[e * 2 + j] += inc;
            }
        }
        update_scores(&g, &mut raw, &x, &items, &cfg);
        for (a, b) in raw.scores.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn chunk_isolation_in_aggregation() {
        // zeroing intent-0 scores on all of u's edges leaves chunk 1 unchanged
        let g = graph_from_edges(1, 2, &[(0, 0), (0, 1)]);
        let cfg = DisentangleConfig {
            k: 2,
            iters_l: 1,
            layers_l: 1,
            dim: 4,
        };
        let mut rng = Rng::new(12);
        let items: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut raw = init_scores(&g, &cfg);
        let norm_a = normalize_scores(&g, &raw);
        let xa = aggregate(&g, &norm_a, &items, &cfg);
        for e in 0..2 {
            raw.scores[e * 2] = -30.0; // push intent 0 mass to ~0
        }
        let norm_b = normalize_scores(&g, &raw);
        let xb = aggregate(&g, &norm_b, &items, &cfg);
        // chunk 1 (second half of each row) must be identical
        for s in 2..4 {
            assert!((xa[s] - xb[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn minimal_forward_is_g_of_item_chunk() {
        // L = 1, l = 1, k = 1 on a single edge
        let g = graph_from_edges(1, 1, &[(0, 0)]);
        let cfg = DisentangleConfig {
            k: 1,
            iters_l: 1,
            layers_l: 1,
            dim: 2,
        };
        let user = vec![0.1, 0.2];
        let item = vec![0.5, -0.3];
        let lp = vec![LayerParams {
            w: vec![2.0, 0.0, 0.0, 2.0],
            b: vec![0.1, 0.1],
        }];
        let fwd = forward(&g, &user, &item, &lp, &cfg).unwrap();
        for r in 0..2 {
            let expect = (2.0 * item[r] + 0.1).tanh();
            assert!((fwd.user_repr[r] - expect).abs() < 1e-12);
            assert!((fwd.item_repr[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn default_config_runs_finite() {
        let cfg = DisentangleConfig::default(); // k=4, l=2, L=2, d=64
        let edges: Vec<(u32, u32)> = (0..6u32)
            .flat_map(|u| (0..4u32).map(move |i| (u, (u + i) % 8)))
            .collect();
        let g = graph_from_edges(6, 8, &edges);
        let mut rng = Rng::new(5);
        let user: Vec<f64> = (0..6 * 64).map(|_| rng.uniform(-0.1, 0.1)).collect();
        let item: Vec<f64> = (0..8 * 64).map(|_| rng.uniform(-0.1, 0.1)).collect();
        let lps: Vec<LayerParams> = (0..2).map(|_| LayerParams::identity(16)).collect();
        let fwd = forward(&g, &user, &item, &lps, &cfg).unwrap();
        assert!(fwd.user_repr.iter().all(|x| x.is_finite()));
        assert!(fwd.item_repr.iter().all(|x| x.is_finite()));
        assert!(fwd.edge_tilde.iter().all(|x| x.is_finite() && *x > 0.0));
    }

    #[test]
    fn isolated_nodes_keep_chunks() {
        // user 1 and item 1 are isolated
        let g = graph_from_edges(2, 2, &[(0, 0)]);
        let cfg = DisentangleConfig {
            k: 1,
            iters_l: 2,
            layers_l: 2,
            dim: 2,
        };
        let user = vec![0.1, 0.2, 0.7, -0.4];
        let item = vec![0.5, -0.3, 0.9, 0.8];
        let lps = vec![LayerParams::identity(2), LayerParams::identity(2)];
        let fwd = forward(&g, &user, &item, &lps, &cfg).unwrap();
        // isolated user: output = sum over layers of the carried chunk = 2x input
        assert!((fwd.user_repr[2] - 2.0 * 0.7).abs() < 1e-12);
        assert!((fwd.item_repr[2] - 2.0 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // loss = sum of user_repr elements + 2 * sum of item_repr elements
        let edges = [(0u32, 0u32), (0, 1), (1, 0), (2, 1), (2, 2)];
        let g = graph_from_edges(3, 3, &edges);
        let cfg = DisentangleConfig {
            k: 2,
            iters_l: 2,
            layers_l: 2,
            dim: 4,
        };
        let mut rng = Rng::new(31);
        let user: Vec<f64> = (0..3 * 4).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let item: Vec<f64> = (0..3 * 4).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let mut lps = Vec::new();
        for _ in 0..2 {
            let mut lp = LayerParams::identity(2);
            for w in lp.w.iter_mut() {
                *w += rng.uniform(-0.2, 0.2);
            }
            for b in lp.b.iter_mut() {
                *b = rng.uniform(-0.1, 0.1);
            }
            lps.push(lp);
        }

        let loss = |user: &[f64], item: &[f64], lps: &[LayerParams]| -> f64 {
            let fwd = forward(&g, user, item, lps, &cfg).unwrap();
            fwd.user_repr.iter().sum::<f64>() + 2.0 * fwd.item_repr.iter().sum::<f64>()
        };

        let fwd = forward(&g, &user, &item, &lps, &cfg).unwrap();
        let gu = vec![1.0; 3 * 4];
        let gi = vec![2.0; 3 * 4];
        let grads = backward(&g, &fwd, &lps, &gu, &gi);

        let h = 1e-5;
        let tol = 1e-5;
        let check = |analytic: f64, num: f64, what: &str| {
            let denom = analytic.abs().max(num.abs()).max(1e-6);
            assert!(
                ((analytic - num) / denom).abs() < tol,
                "{what}: analytic {analytic} vs numeric {num}"
            );
        };
        for p in 0..user.len() {
            let mut up = user.clone();
            up[p] += h;
            let mut um = user.clone();
            um[p] -= h;
            let num = (loss(&up, &item, &lps) - loss(&um, &item, &lps)) / (2.0 * h);
            check(grads.user_ids[p], num, "user_id");
        }
        for p in 0..item.len() {
            let mut ip = item.clone();
            ip[p] += h;
            let mut im = item.clone();
            im[p] -= h;
            let num = (loss(&user, &ip, &lps) - loss(&user, &im, &lps)) / (2.0 * h);
            check(grads.item_ids[p], num, "item_id");
        }
        for t in 0..2 {
            for p in 0..lps[t].w.len() {
                let mut lp1 = lps.clone();
                lp1[t].w[p] += h;
                let mut lp2 = lps.clone();
                lp2[t].w[p] -= h;
                let num = (loss(&user, &item, &lp1) - loss(&user, &item, &lp2)) / (2.0 * h);
                check(grads.layer_w[t][p], num, "layer_w");
            }
            for p in 0..lps[t].b.len() {
                let mut lp1 = lps.clone();
                lp1[t].b[p] += h;
                let mut lp2 = lps.clone();
                lp2[t].b[p] -= h;
                let num = (loss(&user, &item, &lp1) - loss(&user, &item, &lp2)) / (2.0 * h);
                check(grads.layer_b[t][p], num, "layer_b");
            }
        }
    }
}
