//! Prediction head and training: semantic intent fusion, score prediction,
//! pairwise ranking loss, the combined objective, and an Adam loop with
//! early stopping. All gradients are hand-derived; `bpr_gradients` is checked
//! against central finite differences in the test suites.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::hetsg::{fuse_embeddings, ContextBank, FusionParams, NodeMeans, SkipGramTrainer};
use crate::hin::{Hin, TypeId};
use crate::intents::{backward, forward, DisentangleConfig, Forward, IntentGraph, LayerParams};
use crate::rng::Rng;
use crate::vecmath::{dot, log_sigmoid, sigmoid};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("non-finite {component} loss at epoch {epoch}; state: {state}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        state: String,
    },
    #[error(transparent)]
    Intents(#[from] crate::intents::IntentsError),
}

/// Mixing coefficient between the ID-embedding match and the semantic term.
#[derive(Clone, Copy, Debug)]
pub struct PredictorParams {
    pub delta: f64,
}

impl PredictorParams {
    pub fn new(delta: f64) -> Self {
        assert!((0.0..=1.0).contains(&delta), "delta must be in [0, 1]");
        PredictorParams { delta }
    }
}

/// Trade-off weights of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveConfig {
    pub lambda_d: f64,
    pub lambda_theta: f64,
    pub lambda_z: f64,
    /// L2 strength used both inside the ranking loss and for the trailing
    /// regularizer.
    pub l2: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_d: 1.0,
            lambda_theta: 1.0,
            lambda_z: 1.0,
            l2: 1e-4,
        }
    }
}

/// (user row, positive item col, negative item col); (u, i) observed,
/// (u, j) unobserved.
#[derive(Clone, Copy, Debug)]
pub struct TrainingTriple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// All trainable parameters of the prediction model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub dcfg: DisentangleConfig,
    pub predictor: PredictorParams,
    /// m x d user ID embeddings.
    pub user_ids: Vec<f64>,
    /// n x d item ID embeddings.
    pub item_ids: Vec<f64>,
    pub layers: Vec<LayerParams>,
    /// Per-type fusion maps; only the user and item types are trained.
    pub fusion: FusionParams,
    /// Types whose fusion maps receive gradients.
    pub trained_fusion_types: Vec<TypeId>,
}

impl ModelState {
    pub fn init(
        hin: &Hin,
        m: usize,
        n: usize,
        dcfg: DisentangleConfig,
        delta: f64,
        seed: u64,
    ) -> Self {
        let d = dcfg.dim;
        let c = dcfg.chunk_len();
        let mut rng = Rng::stream(seed, &[0x1d5]);
        let xavier = |rows: usize, rng: &mut Rng| -> Vec<f64> {
            let a = (6.0 / (rows as f64 + d as f64)).sqrt();
            (0..rows * d).map(|_| rng.uniform(-a, a)).collect()
        };
        let user_ids = xavier(m, &mut rng);
        let item_ids = xavier(n, &mut rng);
        let mut layers = Vec::with_capacity(dcfg.layers_l);
        for _ in 0..dcfg.layers_l {
            let mut lp = LayerParams::identity(c);
            for w in lp.w.iter_mut() {
                *w += rng.uniform(-0.1, 0.1);
            }
            layers.push(lp);
        }
        let fusion = FusionParams::identity_init(hin, d, seed ^ 0xf00);
        let ik = hin.schema().interaction_kind().clone();
        ModelState {
            dcfg,
            predictor: PredictorParams::new(delta),
            user_ids,
            item_ids,
            layers,
            fusion,
            trained_fusion_types: vec![ik.source_type, ik.target_type],
        }
    }

    pub fn dim(&self) -> usize {
        self.dcfg.dim
    }

    pub fn user_id(&self, u: usize) -> &[f64] {
        &self.user_ids[u * self.dim()..(u + 1) * self.dim()]
    }

    pub fn item_id(&self, i: usize) -> &[f64] {
        &self.item_ids[i * self.dim()..(i + 1) * self.dim()]
    }

    /// Squared L2 norm of the trainable set.
    pub fn sq_norm(&self) -> f64 {
        let mut s = dot(&self.user_ids, &self.user_ids) + dot(&self.item_ids, &self.item_ids);
        for lp in &self.layers {
            s += dot(&lp.w, &lp.w) + dot(&lp.b, &lp.b);
        }
        for t in &self.trained_fusion_types {
            let (m, b) = &self.fusion.per_type[t];
            s += dot(m, m) + dot(b, b);
        }
        s
    }
}

/// Gradient (or moment) buffers mirroring the trainable set.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub user_ids: Vec<f64>,
    pub item_ids: Vec<f64>,
    pub layer_w: Vec<Vec<f64>>,
    pub layer_b: Vec<Vec<f64>>,
    pub fusion: BTreeMap<TypeId, (Vec<f64>, Vec<f64>)>,
}

impl ModelGrads {
    pub fn zeros_like(state: &ModelState) -> Self {
        ModelGrads {
            user_ids: vec![0.0; state.user_ids.len()],
            item_ids: vec![0.0; state.item_ids.len()],
            layer_w: state.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            layer_b: state.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            fusion: state
                .trained_fusion_types
                .iter()
                .map(|&t| {
                    let (m, b) = &state.fusion.per_type[&t];
                    (t, (vec![0.0; m.len()], vec![0.0; b.len()]))
                })
                .collect(),
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &ModelGrads) {
        let add = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        };
        add(&mut self.user_ids, &other.user_ids);
        add(&mut self.item_ids, &other.item_ids);
        for (d, s) in self.layer_w.iter_mut().zip(&other.layer_w) {
            add(d, s);
        }
        for (d, s) in self.layer_b.iter_mut().zip(&other.layer_b) {
            add(d, s);
        }
        for (t, (dm, db)) in self.fusion.iter_mut() {
            if let Some((sm, sb)) = other.fusion.get(t) {
                add(dm, sm);
                add(db, sb);
            }
        }
    }

    /// Add the gradient of l2 * ||theta||^2.
    pub fn add_l2(&mut self, l2: f64, state: &ModelState) {
        let reg = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += 2.0 * l2 * s;
            }
        };
        reg(&mut self.user_ids, &state.user_ids);
        reg(&mut self.item_ids, &state.item_ids);
        for (t, lp) in state.layers.iter().enumerate() {
            reg(&mut self.layer_w[t], &lp.w);
            reg(&mut self.layer_b[t], &lp.b);
        }
        for (t, (gm, gb)) in self.fusion.iter_mut() {
            let (m, b) = &state.fusion.per_type[t];
            reg(gm, m);
            reg(gb, b);
        }
    }
}

/// Semantic intent representation: e_t = u_t * c_i_t * (c_u . i_intent).
/// Bilinear in every argument; zero whenever c_u is orthogonal to i_intent.
pub fn fm_semantic_intent(
    u_intent: &[f64],
    i_intent: &[f64],
    c_u: &[f64],
    c_i: &[f64],
) -> Vec<f64> {
    assert!(
        u_intent.len() == i_intent.len()
            && u_intent.len() == c_u.len()
            && u_intent.len() == c_i.len(),
        "dimension mismatch"
    );
    let s = dot(c_u, i_intent);
    u_intent
        .iter()
        .zip(c_i)
        .map(|(&u, &ci)| u * ci * s)
        .collect()
}

/// Prediction score: delta * u.i + (1 - delta) * e.i.
pub fn predict(u_id: &[f64], i_id: &[f64], e: &[f64], p: &PredictorParams) -> f64 {
    p.delta * dot(u_id, i_id) + (1.0 - p.delta) * dot(e, i_id)
}

/// Pairwise ranking loss over one batch given the score differences, plus
/// the in-loss regularizer lambda * ||theta||^2.
pub fn bpr_loss(score_diffs: &[f64], l2: f64, theta_sq_norm: f64) -> f64 {
    assert!(!score_diffs.is_empty(), "empty batch");
    let sum: f64 = score_diffs.iter().map(|&d| -log_sigmoid(d)).sum();
    sum + l2 * theta_sq_norm
}

/// Components of the combined objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub debias: f64,
    pub skipgram: f64,
    pub bpr: f64,
    pub reg: f64,
}

/// L = lambda_d L_d + lambda_theta L_theta + lambda_z L_bpr + R(omega).
pub fn total_objective(c: &LossComponents, cfg: &ObjectiveConfig) -> f64 {
    cfg.lambda_d * c.debias + cfg.lambda_theta * c.skipgram + cfg.lambda_z * c.bpr + c.reg
}

/// Everything derived from the current parameters that prediction needs:
/// the full-graph intent representations and the fused context bank.
pub struct Derived {
    pub fwd: Forward,
    pub bank: ContextBank,
}

pub fn derive(
    state: &ModelState,
    graph: &IntentGraph,
    hin: &Hin,
    means: &NodeMeans,
) -> Result<Derived, TrainError> {
    let bank = fuse_embeddings(hin, means, &state.fusion);
    let fwd = forward(
        graph,
        &state.user_ids,
        &state.item_ids,
        &state.layers,
        &state.dcfg,
    )?;
    Ok(Derived { fwd, bank })
}

/// Score of one (user row, item col) pair through the semantic head.
/// Same quantity as `predict` over `fm_semantic_intent`, with the rank-1
/// structure exploited so no intermediate vector is materialized.
pub fn score_pair(state: &ModelState, der: &Derived, u: usize, i: usize) -> f64 {
    let d = state.dim();
    let uu = &der.fwd.user_repr[u * d..(u + 1) * d];
    let ii = &der.fwd.item_repr[i * d..(i + 1) * d];
    let cu = der.bank.user_vec(u);
    let ci = der.bank.item_vec(i);
    let uid = state.user_id(u);
    let iid = state.item_id(i);
    let s = dot(cu, ii);
    let mut id_match = 0.0;
    let mut e_match = 0.0;
    for r in 0..d {
        id_match += uid[r] * iid[r];
        e_match += uu[r] * ci[r] * iid[r];
    }
    state.predictor.delta * id_match + (1.0 - state.predictor.delta) * s * e_match
}

/// Ranking-loss objective of a batch, as a pure function of the parameters
/// (bank and representations are recomputed). Includes l2 * ||theta||^2.
pub fn bpr_objective(
    state: &ModelState,
    graph: &IntentGraph,
    hin: &Hin,
    means: &NodeMeans,
    triples: &[TrainingTriple],
    l2: f64,
) -> Result<f64, TrainError> {
    let der = derive(state, graph, hin, means)?;
    let diffs: Vec<f64> = triples
        .iter()
        .map(|t| {
            score_pair(state, &der, t.user as usize, t.pos as usize)
                - score_pair(state, &der, t.user as usize, t.neg as usize)
        })
        .collect();
    Ok(bpr_loss(&diffs, l2, state.sq_norm()))
}

/// Analytic gradient of `bpr_objective` for every trained parameter group.
/// Returns (loss, grads).
pub fn bpr_gradients(
    state: &ModelState,
    graph: &IntentGraph,
    hin: &Hin,
    means: &NodeMeans,
    triples: &[TrainingTriple],
    l2: f64,
) -> Result<(f64, ModelGrads), TrainError> {
    let der = derive(state, graph, hin, means)?;
    let d = state.dim();
    let delta = state.predictor.delta;
    let mut grads = ModelGrads::zeros_like(state);
    let mut g_uu = vec![0.0; graph.m * d]; // dL/d user_repr
    let mut g_ii = vec![0.0; graph.n * d]; // dL/d item_repr
    let mut g_cu = vec![0.0; graph.m * d]; // dL/d c_u
    let mut g_ci = vec![0.0; graph.n * d]; // dL/d c_i

    let mut loss = 0.0;
    for t in triples {
        let (u, i, j) = (t.user as usize, t.pos as usize, t.neg as usize);
        let y_i = score_pair(state, &der, u, i);
        let y_j = score_pair(state, &der, u, j);
        let diff = y_i - y_j;
        loss += -log_sigmoid(diff);
        let g = sigmoid(diff) - 1.0; // dL/dy_i; dL/dy_j = -g

        for (item, sign) in [(i, g), (j, -g)] {
            let uu = &der.fwd.user_repr[u * d..(u + 1) * d];
            let ii = &der.fwd.item_repr[item * d..(item + 1) * d];
            let cu = der.bank.user_vec(u);
            let ci = der.bank.item_vec(item);
            let uid = state.user_id(u);
            let iid = state.item_id(item);

            // y = delta u.i + (1-delta) e.i with e = (uu o ci) * (cu . ii)
            let s = dot(cu, ii);
            // direct ID paths
            for r in 0..d {
                grads.user_ids[u * d + r] += sign * delta * iid[r];
                let e_r = uu[r] * ci[r] * s;
                grads.item_ids[item * d + r] += sign * (delta * uid[r] + (1.0 - delta) * e_r);
            }
            // e path: dL/de = sign * (1-delta) * iid
            // e = P * s, P = uu o ci, s = cu . ii
            let mut ge_dot_p = 0.0;
            for r in 0..d {
                let ge = sign * (1.0 - delta) * iid[r];
                g_uu[u * d + r] += ge * ci[r] * s;
                g_ci[item * d + r] += ge * uu[r] * s;
                ge_dot_p += ge * uu[r] * ci[r];
            }
            for r in 0..d {
                g_cu[u * d + r] += ge_dot_p * ii[r];
                g_ii[item * d + r] += ge_dot_p * cu[r];
            }
        }
    }
    loss += l2 * state.sq_norm();

    // intent representations -> ID embeddings and layer maps
    let ig = backward(graph, &der.fwd, &state.layers, &g_uu, &g_ii);
    for (a, b) in grads.user_ids.iter_mut().zip(&ig.user_ids) {
        *a += b;
    }
    for (a, b) in grads.item_ids.iter_mut().zip(&ig.item_ids) {
        *a += b;
    }
    for (t, gw) in ig.layer_w.into_iter().enumerate() {
        for (a, b) in grads.layer_w[t].iter_mut().zip(&gw) {
            *a += b;
        }
    }
    for (t, gb) in ig.layer_b.into_iter().enumerate() {
        for (a, b) in grads.layer_b[t].iter_mut().zip(&gb) {
            *a += b;
        }
    }

    // context vectors -> fusion maps (c = M vbar + b for covered nodes)
    fold_context_grads(state, hin, means, &der.bank, &g_cu, &g_ci, &mut grads);

    grads.add_l2(l2, state);
    Ok((loss, grads))
}

/// Push dL/dc_u and dL/dc_i into the fusion maps of the user and item types.
/// Uncovered nodes have constant zero context vectors, so they contribute
/// nothing.
pub fn fold_context_grads(
    state: &ModelState,
    hin: &Hin,
    means: &NodeMeans,
    bank: &ContextBank,
    g_cu: &[f64],
    g_ci: &[f64],
    grads: &mut ModelGrads,
) {
    let d = state.dim();
    let ik = hin.schema().interaction_kind().clone();
    let fold = |t: TypeId, nodes: &[crate::hin::NodeId], g: &[f64], grads: &mut ModelGrads| {
        let Some((gm, gb)) = grads.fusion.get_mut(&t) else {
            return;
        };
        for (row, &v) in nodes.iter().enumerate() {
            if means.coverage(v) == 0 {
                continue;
            }
            let gc = &g[row * d..(row + 1) * d];
            let vbar = means.mean(v);
            for r in 0..d {
                if gc[r] == 0.0 {
                    continue;
                }
                gb[r] += gc[r];
                for s in 0..d {
                    gm[r * d + s] += gc[r] * vbar[s];
                }
            }
        }
    };
    fold(ik.source_type, &bank.users, g_cu, grads);
    fold(ik.target_type, &bank.items, g_ci, grads);
}

/// Adam with bias correction; one moment pair per parameter tensor.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ModelGrads,
    v: ModelGrads,
}

impl Adam {
    pub fn new(lr: f64, state: &ModelState) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ModelGrads::zeros_like(state),
            v: ModelGrads::zeros_like(state),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &ModelGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for r in 0..p.len() {
                m[r] = b1 * m[r] + (1.0 - b1) * g[r];
                v[r] = b2 * v[r] + (1.0 - b2) * g[r] * g[r];
                let mhat = m[r] / bc1;
                let vhat = v[r] / bc2;
                p[r] -= lr * mhat / (vhat.sqrt() + eps);
            }
        };
        update(
            &mut state.user_ids,
            &grads.user_ids,
            &mut self.m.user_ids,
            &mut self.v.user_ids,
        );
        update(
            &mut state.item_ids,
            &grads.item_ids,
            &mut self.m.item_ids,
            &mut self.v.item_ids,
        );
        for t in 0..state.layers.len() {
            update(
                &mut state.layers[t].w,
                &grads.layer_w[t],
                &mut self.m.layer_w[t],
                &mut self.v.layer_w[t],
            );
            update(
                &mut state.layers[t].b,
                &grads.layer_b[t],
                &mut self.m.layer_b[t],
                &mut self.v.layer_b[t],
            );
        }
        let trained: Vec<TypeId> = state.trained_fusion_types.clone();
        for t in trained {
            let (pm, pb) = state.fusion.per_type.get_mut(&t).unwrap();
            let (gm, gb) = &grads.fusion[&t];
            let (mm, mb) = self.m.fusion.get_mut(&t).unwrap();
            let (vm, vb) = self.v.fusion.get_mut(&t).unwrap();
            update(pm, gm, mm, vm);
            update(pb, gb, mb, vb);
        }
    }
}

/// Draw one unobserved item per positive, rejecting the user's train items.
pub fn sample_triples(
    train_sets: &[Vec<u32>],
    n_items: usize,
    seed: u64,
    epoch: u64,
) -> Vec<TrainingTriple> {
    let mut triples = Vec::new();
    let mut rng = Rng::stream(seed, &[0xb9, epoch]);
    for (u, items) in train_sets.iter().enumerate() {
        for &pos in items {
            let neg = loop {
                let j = rng.below(n_items) as u32;
                if items.binary_search(&j).is_err() {
                    break j;
                }
            };
            triples.push(TrainingTriple {
                user: u as u32,
                pos,
                neg,
            });
        }
    }
    triples
}

/// Extra per-epoch loss term: maps (state, derived, epoch) to a loss value
/// and its gradients; used by the intervention stage.
pub type DebiasFn<'a> = dyn FnMut(&ModelState, &Derived, usize) -> (f64, ModelGrads) + 'a;

/// One row of the loss trace CSV (`epoch,component,value`).
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub epoch: usize,
    pub component: String,
    pub value: f64,
}

pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Evaluate validation recall every this many epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Skip-gram pairs sampled per epoch to keep L_theta pressure.
    pub sg_pairs: usize,
    pub sg_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            max_epochs: 2000,
            eval_every: 10,
            patience: 50,
            sg_pairs: 2000,
            sg_lr: 0.01,
            seed: 0,
        }
    }
}

/// Stage-2/3 trainer: owns the model parameters and the skip-gram tables.
pub struct Trainer<'a> {
    pub hin: &'a Hin,
    pub graph: &'a IntentGraph,
    pub train_sets: &'a [Vec<u32>],
    pub val_sets: &'a [Vec<u32>],
    pub state: ModelState,
    pub sg: SkipGramTrainer<'a>,
    pub ocfg: ObjectiveConfig,
    pub tcfg: TrainConfig,
    pub trace: Vec<TraceRow>,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hin: &'a Hin,
        graph: &'a IntentGraph,
        train_sets: &'a [Vec<u32>],
        val_sets: &'a [Vec<u32>],
        state: ModelState,
        sg: SkipGramTrainer<'a>,
        ocfg: ObjectiveConfig,
        tcfg: TrainConfig,
    ) -> Self {
        let adam = Adam::new(tcfg.lr, &state);
        Trainer {
            hin,
            graph,
            train_sets,
            val_sets,
            state,
            sg,
            ocfg,
            tcfg,
            trace: Vec::new(),
            adam,
        }
    }

    pub fn node_means(&self) -> NodeMeans {
        crate::hetsg::node_means(self.hin, &self.sg.emb)
    }

    /// One sampled skip-gram pass scaled by lambda_theta; returns the mean
    /// pair loss (the L_theta estimate for the trace).
    fn skipgram_pass(&mut self, epoch: u64) -> f64 {
        if self.tcfg.sg_pairs == 0 || self.ocfg.lambda_theta == 0.0 {
            return 0.0;
        }
        self.sg
            .sampled_pass(self.tcfg.sg_pairs, self.tcfg.sg_lr * self.ocfg.lambda_theta, epoch)
    }

    /// Validation Recall@20, averaged over users with non-empty val sets.
    pub fn validation_recall(&self, der: &Derived) -> f64 {
        let n = self.graph.n;
        let mut total = 0.0;
        let mut counted = 0usize;
        for u in 0..self.graph.m {
            let val = &self.val_sets[u];
            if val.is_empty() {
                continue;
            }
            let train = &self.train_sets[u];
            let mut scored: Vec<(f64, u32)> = (0..n as u32)
                .filter(|c| train.binary_search(c).is_err())
                .map(|c| (score_pair(&self.state, der, u, c as usize), c))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let hits = scored
                .iter()
                .take(20)
                .filter(|(_, c)| val.binary_search(c).is_ok())
                .count();
            total += hits as f64 / val.len() as f64;
            counted += 1;
        }
        if counted == 0 {
            0.0
        } else {
            total / counted as f64
        }
    }

    /// Run the ranking stage: epochs of (skip-gram pass, full-batch BPR
    /// gradient, Adam step) with early stopping on validation Recall@20.
    /// `debias` optionally adds the stage-3 loss path each epoch.
    pub fn run(
        &mut self,
        epochs: usize,
        mut debias: Option<&mut DebiasFn<'_>>,
    ) -> Result<usize, TrainError> {
        let means0 = self.node_means();
        let mut best_recall = f64::NEG_INFINITY;
        let mut best_state: Option<ModelState> = None;
        let mut evals_since_best = 0usize;
        let mut ran = 0usize;

        for epoch in 0..epochs {
            ran = epoch + 1;
            let sg_loss = self.skipgram_pass(epoch as u64);
            let means = if self.tcfg.sg_pairs > 0 && self.ocfg.lambda_theta != 0.0 {
                self.node_means()
            } else {
                means0.clone()
            };
            let triples = sample_triples(
                self.train_sets,
                self.graph.n,
                self.tcfg.seed,
                epoch as u64,
            );
            let (bpr, mut grads) = bpr_gradients(
                &self.state,
                self.graph,
                self.hin,
                &means,
                &triples,
                self.ocfg.l2,
            )?;
            // scale the ranking term by lambda_z; reg gradient for R(omega)
            scale_grads(&mut grads, self.ocfg.lambda_z);
            grads.add_l2(self.ocfg.l2, &self.state);
            let reg = self.ocfg.l2 * self.state.sq_norm();

            let mut debias_loss = 0.0;
            if let Some(cb) = debias.as_mut() {
                let der = derive(&self.state, self.graph, self.hin, &means)?;
                let (ld, dgrads) = cb(&self.state, &der, epoch);
                debias_loss = ld;
                grads.scaled_add(self.ocfg.lambda_d, &dgrads);
            }

            let comps = LossComponents {
                debias: debias_loss,
                skipgram: sg_loss,
                bpr,
                reg,
            };
            let total = total_objective(&comps, &self.ocfg);
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    component: "total",
                    epoch,
                    state: self.diagnostic(),
                });
            }
            self.trace_push(epoch, "bpr", bpr);
            self.trace_push(epoch, "theta", sg_loss);
            if debias.is_some() {
                self.trace_push(epoch, "debias", debias_loss);
            }
            self.trace_push(epoch, "total", total);

            self.adam.step(&mut self.state, &grads);

            if (epoch + 1) % self.tcfg.eval_every == 0 {
                let der = derive(&self.state, self.graph, self.hin, &means)?;
                let recall = self.validation_recall(&der);
                self.trace_push(epoch, "val_recall@20", recall);
                if recall > best_recall {
                    best_recall = recall;
                    best_state = Some(self.state.clone());
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if evals_since_best >= self.tcfg.patience {
                        break;
                    }
                }
            }
        }
        if let Some(best) = best_state {
            self.state = best;
        }
        Ok(ran)
    }

    fn trace_push(&mut self, epoch: usize, component: &str, value: f64) {
        self.trace.push(TraceRow {
            epoch,
            component: component.to_string(),
            value,
        });
    }

    fn diagnostic(&self) -> String {
        format!(
            "|user_ids|^2={:.3e} |item_ids|^2={:.3e} theta^2={:.3e}",
            dot(&self.state.user_ids, &self.state.user_ids),
            dot(&self.state.item_ids, &self.state.item_ids),
            self.state.sq_norm()
        )
    }
}

fn scale_grads(g: &mut ModelGrads, alpha: f64) {
    if alpha == 1.0 {
        return;
    }
    crate::vecmath::scale(alpha, &mut g.user_ids);
    crate::vecmath::scale(alpha, &mut g.item_ids);
    for w in &mut g.layer_w {
        crate::vecmath::scale(alpha, w);
    }
    for b in &mut g.layer_b {
        crate::vecmath::scale(alpha, b);
    }
    for (m, b) in g.fusion.values_mut() {
        crate::vecmath::scale(alpha, m);
        crate::vecmath::scale(alpha, b);
    }
}
