//! Backdoor-adjustment debiasing. For each (user, item) pair the user intent
//! representation is intervened with every aspect-type context vector in
//! turn; aspects whose adjusted score beats the unadjusted one are gated in,
//! the rest contribute the multiplicative identity. The refined
//! representation drives a binary cross-entropy debias loss and, at
//! inference, the intervened score path.

use thiserror::Error;

use crate::hetsg::ContextBank;
use crate::intents::backward;
use crate::model::{derive, predict, Derived, ModelGrads, ModelState, TrainError};
use crate::rng::Rng;
use crate::vecmath::{log_sigmoid, sigmoid};

#[derive(Error, Debug)]
pub enum InterventionError {
    #[error("context bank has no aspects")]
    NoAspects,
    #[error("unknown aspect index {0}")]
    UnknownAspect(usize),
    #[error("non-finite refined representation involving aspects {0:?}")]
    NonFinite(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct InterventionConfig {
    /// Fine-tune iterations n.
    pub iterations_n: usize,
    /// Per-aspect prior; uniform 1/N.
    pub aspect_prior: f64,
}

impl InterventionConfig {
    pub fn uniform(n_aspects: usize, iterations_n: usize) -> Self {
        InterventionConfig {
            iterations_n,
            aspect_prior: if n_aspects == 0 { 0.0 } else { 1.0 / n_aspects as f64 },
        }
    }
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            iterations_n: 140,
            aspect_prior: 0.0,
        }
    }
}

/// Adjusted score under do(U = u o c_a) next to the null-intervention score.
#[derive(Clone, Copy, Debug)]
pub struct AdjustedPredictionPair {
    pub y_adjusted: f64,
    pub y_base: f64,
}

/// Frozen per-aspect context vectors used during stage 3 and at inference.
#[derive(Clone, Debug)]
pub struct AspectBank {
    pub dim: usize,
    pub names: Vec<String>,
    /// N x d.
    pub vecs: Vec<f64>,
}

impl AspectBank {
    pub fn snapshot(bank: &ContextBank) -> Self {
        AspectBank {
            dim: bank.dim,
            names: bank.aspect_names.clone(),
            vecs: bank.aspect_vecs.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn vec(&self, a: usize) -> &[f64] {
        &self.vecs[a * self.dim..(a + 1) * self.dim]
    }
}

/// Score the pair with the e-slot replaced by u_repr o c_a (adjusted) and by
/// u_repr alone (the null intervention).
pub fn adjusted_prediction(
    state: &ModelState,
    u_id: &[f64],
    i_id: &[f64],
    u_repr: &[f64],
    c_a: &[f64],
) -> AdjustedPredictionPair {
    let e_adj: Vec<f64> = u_repr.iter().zip(c_a).map(|(&u, &c)| u * c).collect();
    AdjustedPredictionPair {
        y_adjusted: predict(u_id, i_id, &e_adj, &state.predictor),
        y_base: predict(u_id, i_id, u_repr, &state.predictor),
    }
}

/// (1/N) sum over aspects of (adjusted - base) prediction scores.
pub fn backdoor_effect(
    state: &ModelState,
    aspects: &AspectBank,
    u_id: &[f64],
    i_id: &[f64],
    u_repr: &[f64],
) -> Result<f64, InterventionError> {
    if aspects.n() == 0 {
        return Err(InterventionError::NoAspects);
    }
    let mut total = 0.0;
    for a in 0..aspects.n() {
        let pair = adjusted_prediction(state, u_id, i_id, u_repr, aspects.vec(a));
        total += pair.y_adjusted - pair.y_base;
    }
    Ok(total / aspects.n() as f64)
}

/// Gate: include the aspect (mask = c_a) iff tanh(y_adj - y_base) > 0.
/// Ties resolve to exclusion (mask = all-ones).
pub fn indicator(pair: &AdjustedPredictionPair) -> bool {
    (pair.y_adjusted - pair.y_base).tanh() > 0.0
}

/// Per-aspect masks for one (user, item) evaluation: true = included.
pub fn aspect_masks(
    state: &ModelState,
    aspects: &AspectBank,
    u_id: &[f64],
    i_id: &[f64],
    u_repr: &[f64],
) -> Vec<bool> {
    (0..aspects.n())
        .map(|a| {
            let pair = adjusted_prediction(state, u_id, i_id, u_repr, aspects.vec(a));
            indicator(&pair)
        })
        .collect()
}

/// Refined representation: start from u_repr and multiply element-wise by
/// c_a for every included aspect. With no aspect included this is exactly
/// u_repr, matching the null intervention.
pub fn refined_repr(u_repr: &[f64], aspects: &AspectBank, included: &[bool]) -> Vec<f64> {
    let mut e = u_repr.to_vec();
    for (a, &inc) in included.iter().enumerate() {
        if inc {
            for (x, &c) in e.iter_mut().zip(aspects.vec(a)) {
                *x *= c;
            }
        }
    }
    e
}

/// Intervened score of one (user row, item col) pair: masks are recomputed
/// from the current parameters, then the refined representation fills the
/// e-slot of the predictor.
pub fn intervened_score(
    state: &ModelState,
    der: &Derived,
    aspects: &AspectBank,
    u: usize,
    i: usize,
) -> f64 {
    let d = state.dim();
    let u_repr = &der.fwd.user_repr[u * d..(u + 1) * d];
    let u_id = state.user_id(u);
    let i_id = state.item_id(i);
    let masks = aspect_masks(state, aspects, u_id, i_id, u_repr);
    let e = refined_repr(u_repr, aspects, &masks);
    predict(u_id, i_id, &e, &state.predictor)
}

/// Labelled pair for the debias loss: (user row, item col, binary target).
#[derive(Clone, Copy, Debug)]
pub struct DebiasPair {
    pub user: u32,
    pub item: u32,
    pub y: f64,
}

/// Observed positives plus one sampled unobserved negative per positive.
pub fn sample_debias_pairs(
    train_sets: &[Vec<u32>],
    n_items: usize,
    seed: u64,
    epoch: u64,
) -> Vec<DebiasPair> {
    let mut pairs = Vec::new();
    let mut rng = Rng::stream(seed, &[0xd0, epoch]);
    for (u, items) in train_sets.iter().enumerate() {
        for &pos in items {
            pairs.push(DebiasPair {
                user: u as u32,
                item: pos,
                y: 1.0,
            });
            let neg = loop {
                let j = rng.below(n_items) as u32;
                if items.binary_search(&j).is_err() {
                    break j;
                }
            };
            pairs.push(DebiasPair {
                user: u as u32,
                item: neg,
                y: 0.0,
            });
        }
    }
    pairs
}

/// Binary cross-entropy debias loss over the batch, pure in the parameters.
/// Masks are recomputed per pair; the aspect bank is frozen.
pub fn debias_objective(
    state: &ModelState,
    graph: &crate::intents::IntentGraph,
    hin: &crate::hin::Hin,
    means: &crate::hetsg::NodeMeans,
    aspects: &AspectBank,
    pairs: &[DebiasPair],
) -> Result<f64, TrainError> {
    let der = derive(state, graph, hin, means)?;
    Ok(debias_loss_with(state, &der, aspects, pairs).0)
}

/// Debias loss plus analytic gradients. The indicator gates are treated as
/// piecewise-constant: gradients flow through the selected branch only.
pub fn debias_gradients(
    state: &ModelState,
    graph: &crate::intents::IntentGraph,
    der: &Derived,
    aspects: &AspectBank,
    pairs: &[DebiasPair],
) -> (f64, ModelGrads) {
    let d = state.dim();
    let delta = state.predictor.delta;
    let mut grads = ModelGrads::zeros_like(state);
    let mut g_uu = vec![0.0; graph.m * d];
    let g_ii = vec![0.0; graph.n * d];

    let (loss, details) = debias_loss_with(state, der, aspects, pairs);
    for (pair, (g_f, mask_prod)) in pairs.iter().zip(&details.1) {
        let (u, i) = (pair.user as usize, pair.item as usize);
        let u_repr = &der.fwd.user_repr[u * d..(u + 1) * d];
        let u_id = state.user_id(u);
        let i_id = state.item_id(i);
        // f = delta u.i + (1-delta) (u_repr o G).i  with G the mask product
        for r in 0..d {
            grads.user_ids[u * d + r] += g_f * delta * i_id[r];
            grads.item_ids[i * d + r] +=
                g_f * (delta * u_id[r] + (1.0 - delta) * u_repr[r] * mask_prod[r]);
            g_uu[u * d + r] += g_f * (1.0 - delta) * mask_prod[r] * i_id[r];
        }
    }

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
    (loss, grads)
}

/// Shared loss computation: returns the loss and, per pair, dL/df together
/// with the element-wise product of the included aspect vectors.
#[allow(clippy::type_complexity)]
fn debias_loss_with(
    state: &ModelState,
    der: &Derived,
    aspects: &AspectBank,
    pairs: &[DebiasPair],
) -> (f64, (usize, Vec<(f64, Vec<f64>)>)) {
    let d = state.dim();
    let mut loss = 0.0;
    let mut details = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (u, i) = (pair.user as usize, pair.item as usize);
        let u_repr = &der.fwd.user_repr[u * d..(u + 1) * d];
        let u_id = state.user_id(u);
        let i_id = state.item_id(i);
        let masks = aspect_masks(state, aspects, u_id, i_id, u_repr);
        // product of included aspect vectors (identity when none included)
        let mut mask_prod = vec![1.0; d];
        for (a, &inc) in masks.iter().enumerate() {
            if inc {
                for (x, &c) in mask_prod.iter_mut().zip(aspects.vec(a)) {
                    *x *= c;
                }
            }
        }
        let e: Vec<f64> = u_repr.iter().zip(&mask_prod).map(|(&a, &b)| a * b).collect();
        let f = predict(u_id, i_id, &e, &state.predictor);
        let p = sigmoid(f);
        loss += -(pair.y * log_sigmoid(f) + (1.0 - pair.y) * log_sigmoid(-f));
        details.push((p - pair.y, mask_prod));
    }
    (loss, (pairs.len(), details))
}

/// One row of the intervention trace CSV.
#[derive(Clone, Debug)]
pub struct InterventionTraceRow {
    pub iteration: usize,
    pub aspect: String,
    pub included_fraction: f64,
    pub mean_effect: f64,
    pub debias_loss: f64,
}

/// Per-aspect inclusion fractions and the mean backdoor effect over a batch,
/// for the iteration/performance report.
pub fn intervention_trace(
    state: &ModelState,
    der: &Derived,
    aspects: &AspectBank,
    pairs: &[DebiasPair],
    iteration: usize,
    debias_loss: f64,
) -> Vec<InterventionTraceRow> {
    let d = state.dim();
    let mut included = vec![0usize; aspects.n()];
    let mut effect_sum = 0.0;
    for pair in pairs {
        let (u, i) = (pair.user as usize, pair.item as usize);
        let u_repr = &der.fwd.user_repr[u * d..(u + 1) * d];
        let u_id = state.user_id(u);
        let i_id = state.item_id(i);
        let masks = aspect_masks(state, aspects, u_id, i_id, u_repr);
        for (a, &inc) in masks.iter().enumerate() {
            if inc {
                included[a] += 1;
            }
        }
        effect_sum += backdoor_effect(state, aspects, u_id, i_id, u_repr).unwrap_or(0.0);
    }
    let n = pairs.len().max(1) as f64;
    (0..aspects.n())
        .map(|a| InterventionTraceRow {
            iteration,
            aspect: aspects.names[a].clone(),
            included_fraction: included[a] as f64 / n,
            mean_effect: effect_sum / n,
            debias_loss,
        })
        .collect()
}
