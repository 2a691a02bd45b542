//! Per-device building blocks of a round.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{FsAdmmError, HyperParams, MultiplierStore};
use crate::data::{Dataset, SharedSet};
use crate::linalg::Matrix;
use crate::nnmodel::{ModelState, Workspace};
use crate::rng::Rng;

/// Extra term mixed into each local SGD step.
#[derive(Debug, Clone, Copy)]
pub enum LocalRule<'a> {
    Plain,
    /// Adds `α‖w - anchor‖²` to the local objective.
    Proximal { alpha: f64, anchor: &'a [f64] },
    /// Heavy-ball: `v ← εv + g`, `w ← w - ηv`.
    Momentum { epsilon: f64 },
}

/// Gradient work done in one phase, for overhead accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradCount {
    pub steps: usize,
    pub samples: usize,
}

/// `local_steps` mini-batch steps of size `local_batch` at rate `η` on the
/// summed cross-entropy. Batches walk a per-round shuffle of the local
/// indices, reshuffling when exhausted.
pub fn local_sgd(
    model: &mut ModelState,
    local: &[usize],
    train: &Dataset,
    hp: &HyperParams,
    rule: LocalRule<'_>,
    velocity: &mut Vec<f64>,
    rng: &mut Rng,
) -> Result<GradCount, FsAdmmError> {
    if local.is_empty() {
        return Err(FsAdmmError::Config("device has no local data"));
    }
    let mut order = local.to_vec();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut ws = model.workspace();
    let mut grad = vec![0.0; model.num_params()];
    if matches!(rule, LocalRule::Momentum { .. }) && velocity.len() != grad.len() {
        velocity.clear();
        velocity.resize(grad.len(), 0.0);
    }
    let batch = hp.local_batch.min(order.len());
    let mut count = GradCount::default();
    for _ in 0..hp.local_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let s = order[cursor];
            cursor += 1;
            model.accumulate_ce_grad(train.input(s), train.label(s), &mut ws, &mut grad)?;
        }
        count.steps += 1;
        count.samples += batch;
        match rule {
            LocalRule::Plain => model.apply_step(&grad, hp.eta),
            LocalRule::Proximal { alpha, anchor } => {
                for ((g, w), a) in grad.iter_mut().zip(&model.params).zip(anchor) {
                    *g += 2.0 * alpha * (w - a);
                }
                model.apply_step(&grad, hp.eta);
            }
            LocalRule::Momentum { epsilon } => {
                for (v, g) in velocity.iter_mut().zip(&grad) {
                    *v = epsilon * *v + g;
                }
                model.apply_step(velocity, hp.eta);
            }
        }
    }
    Ok(count)
}

/// `f(x; w)` for every shared sample, as a `|D_s| × K` matrix.
pub fn shared_outputs(model: &ModelState, shared: &SharedSet) -> Result<Matrix, FsAdmmError> {
    let k = model.num_classes();
    let mut out = Matrix::zeros(shared.len(), k);
    let mut ws = model.workspace();
    for s in 0..shared.len() {
        model.forward_ws(shared.input(s), &mut ws)?;
        out.row_mut(s).copy_from_slice(ws.probs());
    }
    Ok(out)
}

/// `λ̂ ← (1 - ν) λ̂ + f(x; w̃_i) - mean_{j∈N_i} f(x; w̃_j)`, elementwise.
pub fn update_multiplier(
    store: &mut MultiplierStore,
    own: &Matrix,
    neighbor_mean: &Matrix,
    nu: f64,
) -> Result<(), FsAdmmError> {
    let shape = store.values.shape();
    if own.shape() != shape || neighbor_mean.shape() != shape {
        return Err(FsAdmmError::Shape);
    }
    let decay = 1.0 - nu;
    for ((l, &f), &m) in store
        .values
        .as_mut_slice()
        .iter_mut()
        .zip(own.as_slice())
        .zip(neighbor_mean.as_slice())
    {
        *l = decay * *l + (f - m);
    }
    Ok(())
}

/// Virtual target `z = mean_{j∈N_i} f(x; w̃_j) - λ̂`.
pub fn virtual_target(neighbor_mean: &Matrix, store: &MultiplierStore) -> Result<Matrix, FsAdmmError> {
    if neighbor_mean.shape() != store.values.shape() {
        return Err(FsAdmmError::Shape);
    }
    Ok(neighbor_mean.sub(&store.values))
}

/// One pass over the shared set in order, in mini-batches of `kd_batch`:
/// `w ← w - (ρ̂/2) ∇ Σ_batch ‖f(x; w) - z‖²`.
pub fn kd_aggregate(
    model: &mut ModelState,
    shared: &SharedSet,
    targets: &Matrix,
    hp: &HyperParams,
) -> Result<GradCount, FsAdmmError> {
    if targets.shape() != (shared.len(), model.num_classes()) {
        return Err(FsAdmmError::Shape);
    }
    let mut ws: Workspace = model.workspace();
    let mut grad = vec![0.0; model.num_params()];
    let mut count = GradCount::default();
    let mut start = 0;
    while start < shared.len() {
        let end = (start + hp.kd_batch).min(shared.len());
        grad.iter_mut().for_each(|g| *g = 0.0);
        for s in start..end {
            model.accumulate_distill_grad(shared.input(s), targets.row(s), &mut ws, &mut grad)?;
        }
        // grad is ∇ ½Σ‖·‖², so (ρ̂/2)·∇Σ‖·‖² is ρ̂·grad
        model.apply_step(&grad, hp.rho_hat);
        count.steps += 1;
        count.samples += end - start;
        start = end;
    }
    Ok(count)
}

/// `½ Σ_x ‖f(x; w) - z_x‖²` over the shared set.
pub fn shared_distill_loss(model: &ModelState, shared: &SharedSet, targets: &Matrix) -> Result<f64, FsAdmmError> {
    let outputs = shared_outputs(model, shared)?;
    Ok(0.5
        * outputs
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}
