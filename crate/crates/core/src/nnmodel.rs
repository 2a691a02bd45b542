//! The prediction function `f(x; w)`: a ReLU MLP with optional layer
//! normalization and a softmax head, stored as one flat parameter vector.
//!
//! Two objectives are differentiated by hand:
//!
//! - cross-entropy `-log p[label]` for local training, and
//! - the half-squared distillation error `½‖f(x; w) - z‖²` against an
//!   arbitrary `K`-vector target `z` (virtual targets may leave the simplex).
//!
//! Batch gradients are sums over samples, accumulated left to right.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::rng::{self, Stream};

/// Floor applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(&'static str),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite value in forward pass")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    input: usize,
    output: usize,
    weights: usize,
    bias: usize,
    /// Offsets of layer-norm gain and shift, hidden layers only.
    norm: Option<(usize, usize)>,
    hidden: bool,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self, ModelError> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
            normalization: Normalization::None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_layer_norm(mut self) -> Self {
        self.normalization = Normalization::LayerNorm;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec("at least two classes are required"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidSpec("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count `N_p`.
    pub fn num_params(&self) -> usize {
        let norm = matches!(self.normalization, Normalization::LayerNorm);
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &h in &self.hidden_dims {
            total += fan_in * h + h + if norm { 2 * h } else { 0 };
            fan_in = h;
        }
        total + fan_in * self.num_classes + self.num_classes
    }

    fn layout(&self) -> Vec<LayerLayout> {
        let norm = matches!(self.normalization, Normalization::LayerNorm);
        let mut out = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        let widths = self.hidden_dims.iter().map(|&h| (h, true)).chain([(self.num_classes, false)]);
        for (width, hidden) in widths {
            let weights = offset;
            let bias = weights + fan_in * width;
            offset = bias + width;
            let norm_offsets = if hidden && norm {
                let gain = offset;
                offset += 2 * width;
                Some((gain, gain + width))
            } else {
                None
            };
            out.push(LayerLayout {
                input: fan_in,
                output: width,
                weights,
                bias,
                norm: norm_offsets,
                hidden,
            });
            fan_in = width;
        }
        out
    }
}

/// Softmax output of the model, a point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Set when `p[label]` was below [`LOG_CLAMP`] and got clamped.
    pub clamped: bool,
}

/// `-log p[label]`, with `p[label]` floored at [`LOG_CLAMP`].
pub fn local_loss(p: &Prediction, label: usize) -> Result<CrossEntropy, ModelError> {
    let classes = p.probs.len();
    let prob = *p.probs.get(label).ok_or(ModelError::Label { label, classes })?;
    let clamped = prob < LOG_CLAMP;
    Ok(CrossEntropy {
        value: -math::ln(prob.max(LOG_CLAMP)),
        clamped,
    })
}

/// `½ Σ_k (p_k - z_k)²`.
pub fn distill_loss(p: &Prediction, target: &[f64]) -> f64 {
    0.5 * p
        .probs
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

/// Reusable buffers for forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    layout: Vec<LayerLayout>,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (post-ReLU for hidden layers, logits for the head).
    acts: Vec<Vec<f64>>,
    /// Pre-normalization affine outputs of hidden layers.
    pre: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    probs: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec) -> Self {
        let layout = spec.layout();
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(layout.iter().map(|l| vec![0.0; l.output]));
        let pre = layout.iter().map(|l| vec![0.0; l.output]).collect();
        let normed = layout.iter().map(|l| vec![0.0; l.output]).collect();
        let widest = layout.iter().map(|l| l.output.max(l.input)).max().unwrap_or(0);
        Self {
            inv_std: vec![0.0; layout.len()],
            probs: vec![0.0; spec.num_classes],
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
            layout,
            acts,
            pre,
            normed,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

impl ModelState {
    /// All-zero parameters: every input maps to the uniform distribution.
    pub fn zeros(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let params = vec![0.0; spec.num_params()];
        Ok(Self { spec, params })
    }

    /// He-normal weights (`N(0, 2/fan_in)`), zero biases, unit layer-norm gains.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut params = vec![0.0; spec.num_params()];
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        for layer in spec.layout() {
            let std = math::sqrt(2.0 / layer.input as f64);
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut params[layer.weights..layer.bias] {
                *w = normal.sample(&mut rng);
            }
            if let Some((gain, _)) = layer.norm {
                params[gain..gain + layer.output].iter_mut().for_each(|g| *g = 1.0);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self, ModelError> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(ModelError::Shape {
                expected: spec.num_params(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { spec, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.spec)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction, ModelError> {
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws)?;
        Ok(Prediction {
            probs: ws.probs.clone(),
        })
    }

    /// Forward pass into `ws`; the probabilities are left in `ws.probs()`.
    pub fn forward_ws(&self, x: &[f64], ws: &mut Workspace) -> Result<(), ModelError> {
        if x.len() != self.spec.input_dim {
            return Err(ModelError::Shape {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        ws.acts[0].copy_from_slice(x);
        let p = &self.params;
        for (l, layer) in ws.layout.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let pre = &mut ws.pre[l];
            for o in 0..layer.output {
                let row = &p[layer.weights + o * layer.input..layer.weights + (o + 1) * layer.input];
                pre[o] = p[layer.bias + o] + math::dot(row, input);
            }
            if !layer.hidden {
                out.copy_from_slice(pre);
                continue;
            }
            match layer.norm {
                Some((gain, shift)) => {
                    let width = layer.output as f64;
                    let mean = pre.iter().sum::<f64>() / width;
                    let var = pre.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / width;
                    let inv_std = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
                    ws.inv_std[l] = inv_std;
                    let normed = &mut ws.normed[l];
                    for o in 0..layer.output {
                        normed[o] = (pre[o] - mean) * inv_std;
                        out[o] = (p[gain + o] * normed[o] + p[shift + o]).max(0.0);
                    }
                }
                None => {
                    for o in 0..layer.output {
                        out[o] = pre[o].max(0.0);
                    }
                }
            }
        }
        let logits = ws.acts.last().expect("head layer");
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        softmax_into(logits, &mut ws.probs);
        Ok(())
    }

    /// `log p[label]` computed as a log-softmax (no clamping).
    pub fn log_prob(&self, x: &[f64], label: usize, ws: &mut Workspace) -> Result<f64, ModelError> {
        self.check_label(label)?;
        self.forward_ws(x, ws)?;
        let logits = ws.logits();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(logits.iter().map(|z| math::exp(z - max)).sum::<f64>());
        Ok(logits[label] - lse)
    }

    fn check_label(&self, label: usize) -> Result<(), ModelError> {
        if label >= self.spec.num_classes {
            return Err(ModelError::Label {
                label,
                classes: self.spec.num_classes,
            });
        }
        Ok(())
    }

    /// Adds the cross-entropy gradient of one sample to `grad`.
    pub fn accumulate_ce_grad(
        &self,
        x: &[f64],
        label: usize,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<(), ModelError> {
        self.check_label(label)?;
        self.forward_ws(x, ws)?;
        ws.delta.clear();
        ws.delta.extend_from_slice(&ws.probs);
        ws.delta[label] -= 1.0;
        self.backward(ws, grad);
        Ok(())
    }

    /// Adds the gradient of `½‖f(x; w) - target‖²` for one sample to `grad`.
    pub fn accumulate_distill_grad(
        &self,
        x: &[f64],
        target: &[f64],
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<(), ModelError> {
        if target.len() != self.spec.num_classes {
            return Err(ModelError::Shape {
                expected: self.spec.num_classes,
                got: target.len(),
            });
        }
        self.forward_ws(x, ws)?;
        // softmax Jacobian applied to the residual: p ⊙ (r - ⟨p, r⟩)
        let p = &ws.probs;
        let inner: f64 = p.iter().zip(target).map(|(pk, zk)| pk * (pk - zk)).sum();
        ws.delta.clear();
        ws.delta
            .extend(p.iter().zip(target).map(|(pk, zk)| pk * ((pk - zk) - inner)));
        self.backward(ws, grad);
        Ok(())
    }

    /// Backpropagates `ws.delta` (gradient w.r.t. the logits) and adds the
    /// parameter gradient to `grad`.
    fn backward(&self, ws: &mut Workspace, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let p = &self.params;
        for l in (0..ws.layout.len()).rev() {
            let layer = ws.layout[l];
            if layer.hidden {
                // ws.delta holds dL/d(post-activation); push it through ReLU and norm
                let out = &ws.acts[l + 1];
                for (d, &a) in ws.delta.iter_mut().zip(out.iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let Some((gain, shift)) = layer.norm {
                    let normed = &ws.normed[l];
                    let width = layer.output as f64;
                    let mut mean_d = 0.0;
                    let mut mean_dn = 0.0;
                    for o in 0..layer.output {
                        let dh = ws.delta[o];
                        grad[gain + o] += dh * normed[o];
                        grad[shift + o] += dh;
                        let dn = dh * p[gain + o];
                        ws.delta[o] = dn;
                        mean_d += dn;
                        mean_dn += dn * normed[o];
                    }
                    mean_d /= width;
                    mean_dn /= width;
                    let inv_std = ws.inv_std[l];
                    for o in 0..layer.output {
                        ws.delta[o] = inv_std * (ws.delta[o] - mean_d - normed[o] * mean_dn);
                    }
                }
            }
            let input = &ws.acts[l];
            ws.delta_prev.clear();
            ws.delta_prev.resize(layer.input, 0.0);
            for o in 0..layer.output {
                let d = ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[layer.bias + o] += d;
                let start = layer.weights + o * layer.input;
                let grow = &mut grad[start..start + layer.input];
                for (g, &a) in grow.iter_mut().zip(input.iter()) {
                    *g += d * a;
                }
                if l > 0 {
                    let wrow = &p[start..start + layer.input];
                    for (dp, &w) in ws.delta_prev.iter_mut().zip(wrow) {
                        *dp += d * w;
                    }
                }
            }
            core::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }

    /// Exact gradient of `Σ -log p(label | x)` over the batch.
    pub fn grad_local_loss(&self, batch: &[(&[f64], usize)]) -> Result<Vec<f64>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.params.len()];
        for &(x, label) in batch {
            self.accumulate_ce_grad(x, label, &mut ws, &mut grad)?;
        }
        Ok(grad)
    }

    /// Exact gradient of `½ Σ ‖f(x; w) - z‖²` over the batch.
    pub fn grad_distill_loss(&self, batch: &[(&[f64], &[f64])]) -> Result<Vec<f64>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.params.len()];
        for &(x, target) in batch {
            self.accumulate_distill_grad(x, target, &mut ws, &mut grad)?;
        }
        Ok(grad)
    }

    /// Summed cross-entropy over the batch (clamped log).
    pub fn total_local_loss(&self, batch: &[(&[f64], usize)]) -> Result<f64, ModelError> {
        let mut ws = self.workspace();
        let mut total = 0.0;
        for &(x, label) in batch {
            self.check_label(label)?;
            self.forward_ws(x, &mut ws)?;
            total -= math::ln(ws.probs[label].max(LOG_CLAMP));
        }
        Ok(total)
    }

    /// Summed `½‖f(x; w) - z‖²` over the batch.
    pub fn total_distill_loss(&self, batch: &[(&[f64], &[f64])]) -> Result<f64, ModelError> {
        let mut ws = self.workspace();
        let mut total = 0.0;
        for &(x, target) in batch {
            self.forward_ws(x, &mut ws)?;
            total += 0.5
                * ws.probs
                    .iter()
                    .zip(target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
        }
        Ok(total)
    }

    /// `w ← w - step · grad`.
    pub fn apply_step(&mut self, grad: &[f64], step: f64) {
        for (w, g) in self.params.iter_mut().zip(grad) {
            *w -= step * g;
        }
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = math::exp(z - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::new(4, vec![5], 3).unwrap()
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // 4*5 + 5 + 5*3 + 3
        assert_eq!(spec().num_params(), 43);
        // with layer norm: + 2*5
        assert_eq!(spec().with_layer_norm().num_params(), 53);
        let two = ModelSpec::new(3, vec![4, 2], 2).unwrap();
        assert_eq!(two.num_params(), 3 * 4 + 4 + 4 * 2 + 2 + 2 * 2 + 2);
        let m = ModelState::init(two.clone(), 1).unwrap();
        assert_eq!(m.params.len(), two.num_params());
    }

    #[test]
    fn zero_model_is_uniform() {
        let single = ModelSpec::new(3, vec![], 4).unwrap();
        let m = ModelState::zeros(single).unwrap();
        let p = m.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert!(p.probs.iter().all(|&q| q == 0.25));
    }

    #[test]
    fn invalid_specs() {
        assert!(ModelSpec::new(0, vec![], 3).is_err());
        assert!(ModelSpec::new(2, vec![], 1).is_err());
        assert!(ModelSpec::new(2, vec![0], 3).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelState::init(spec(), 9).unwrap();
        let b = ModelState::init(spec(), 9).unwrap();
        let c = ModelState::init(spec(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn shape_and_label_errors() {
        let m = ModelState::init(spec(), 1).unwrap();
        assert_eq!(
            m.forward(&[1.0]).unwrap_err(),
            ModelError::Shape { expected: 4, got: 1 }
        );
        let x = [0.0; 4];
        assert!(matches!(
            m.grad_local_loss(&[(&x, 3)]),
            Err(ModelError::Label { .. })
        ));
        assert_eq!(m.grad_local_loss(&[]).unwrap_err(), ModelError::EmptyBatch);
        let short = [0.0; 2];
        assert!(matches!(
            m.grad_distill_loss(&[(&x, &short)]),
            Err(ModelError::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let m = ModelState::init(spec(), 1).unwrap();
        assert_eq!(
            m.forward(&[f64::NAN, 0.0, 0.0, 0.0]).unwrap_err(),
            ModelError::NonFinite
        );
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Prediction { probs: vec![0.1; 10] };
        assert!((local_loss(&uniform, 3).unwrap().value - core::f64::consts::LN_10).abs() < 1e-12);
        let sure = Prediction { probs: vec![1.0, 0.0] };
        assert_eq!(local_loss(&sure, 0).unwrap().value, 0.0);
        let p = Prediction { probs: vec![0.7, 0.2, 0.1] };
        assert!((local_loss(&p, 0).unwrap().value - 0.356_674_943_938_732_4).abs() < 1e-12);
        let zero = local_loss(&sure, 1).unwrap();
        assert!(zero.clamped);
        assert!((zero.value - 27.631_021_115_928_547).abs() < 1e-9);
        assert!(local_loss(&p, 5).is_err());
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let m = ModelState::init(spec(), 3).unwrap();
        let x = [0.5, -0.2, 1.5, 0.3];
        let one = m.grad_local_loss(&[(&x, 1)]).unwrap();
        let two = m.grad_local_loss(&[(&x, 1), (&x, 1)]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn zero_output_layer_gradient_is_softmax_minus_onehot() {
        let mut m = ModelState::init(spec(), 4).unwrap();
        let layout = m.spec.layout();
        let head = layout[1];
        m.params[head.weights..head.bias + head.output]
            .iter_mut()
            .for_each(|w| *w = 0.0);
        let x = [1.0, 2.0, -1.0, 0.5];
        let g = m.grad_local_loss(&[(&x, 2)]).unwrap();
        // uniform output, so dlogits = 1/3 - onehot
        let expect = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0 - 1.0];
        for o in 0..3 {
            assert!((g[head.bias + o] - expect[o]).abs() < 1e-15);
        }
        // hidden layer receives no gradient through zero weights
        assert!(g[..head.weights].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distill_gradient_vanishes_at_own_output() {
        let m = ModelState::init(spec().with_layer_norm(), 5).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        let target = m.forward(&x).unwrap().probs;
        let g = m.grad_distill_loss(&[(&x, &target)]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
