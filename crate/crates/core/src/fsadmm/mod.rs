//! Function-space decentralized ADMM (the proposed round) and the baselines
//! it is compared against.
//!
//! A proposed round, per device `i`, in this order:
//!
//! 1. local SGD on the device's own data gives `w̃_i`;
//! 2. `f(x; w̃_i)` on the shared set is sent to every neighbor;
//! 3. the stored multiplier values are updated,
//!    `λ̂ ← (1-ν)λ̂ + f(x; w̃_i) - mean_{j∈N_i} f(x; w̃_j)`;
//! 4. the virtual target `z = mean_{j∈N_i} f(x; w̃_j) - λ̂` is formed;
//! 5. one distillation pass over the shared set pulls `w̃_i` toward `z`.
//!
//! Step 1 for all devices runs concurrently (rayon, with the `std` feature);
//! steps 3–5 run after the exchange barrier. Every device draws mini-batches
//! from its own stream seeded by `(seed, device, round)`, so the parallel and
//! serial paths give identical bits.

mod ops;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    kd_aggregate, local_sgd, shared_distill_loss, shared_outputs, update_multiplier, virtual_target, GradCount,
    LocalRule,
};

use crate::data::{Dataset, SharedSet};
use crate::graph::Topology;
use crate::linalg::Matrix;
use crate::math;
use crate::metrics::{self, Metrics};
use crate::nnmodel::{ModelError, ModelState};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FsAdmmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(&'static str),
    #[error("shape mismatch between multiplier, outputs and targets")]
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Local learning rate `η`.
    pub eta: f64,
    /// Distillation coefficient `ρ̂ = ηρ`; also the CMFD distillation rate.
    pub rho_hat: f64,
    /// Stabilization coefficient `ν ∈ [0, 1)`.
    pub nu: f64,
    pub local_batch: usize,
    pub local_steps: usize,
    pub kd_batch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 5e-3,
            rho_hat: 5e-3,
            nu: 0.01,
            local_batch: 20,
            local_steps: 10,
            kd_batch: 20,
        }
    }
}

impl HyperParams {
    /// Rates may be zero (degenerate checks); `ν` must lie in `[0, 1)`.
    pub fn validate(&self) -> Result<(), FsAdmmError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(FsAdmmError::Config("eta must be a non-negative finite number"));
        }
        if !(self.rho_hat >= 0.0 && self.rho_hat.is_finite()) {
            return Err(FsAdmmError::Config("rho_hat must be a non-negative finite number"));
        }
        if !(0.0..1.0).contains(&self.nu) {
            return Err(FsAdmmError::Config("nu must lie in [0, 1)"));
        }
        if self.local_batch == 0 || self.local_steps == 0 || self.kd_batch == 0 {
            return Err(FsAdmmError::Config("batch sizes and step counts must be positive"));
        }
        Ok(())
    }
}

/// Which round to run, with the baseline-specific coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Algorithm {
    /// Function-space ADMM with virtual targets.
    PropAlg,
    /// Distillation toward the plain neighbor-mean output.
    Cmfd,
    /// Local SGD then `w ← (1-β)w + β·mean_j w_j`.
    DecFedAvg { beta: f64 },
    /// DecFedAvg with a proximal pull `α‖w - mean_j w_j‖²` during local SGD.
    DecFedProx { alpha: f64, beta: f64 },
    /// DecFedAvg with heavy-ball momentum `ε` in local SGD. Reconstructed:
    /// only the idea (momentum plus parameter averaging) is pinned down.
    DFedAvgM { beta: f64, epsilon: f64 },
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::PropAlg => "propalg",
            Algorithm::Cmfd => "cmfd",
            Algorithm::DecFedAvg { .. } => "decfedavg",
            Algorithm::DecFedProx { .. } => "decfedprox",
            Algorithm::DFedAvgM { .. } => "dfedavgm",
        }
    }

    pub fn shares_outputs(&self) -> bool {
        matches!(self, Algorithm::PropAlg | Algorithm::Cmfd)
    }

    pub fn validate(&self) -> Result<(), FsAdmmError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        match *self {
            Algorithm::PropAlg | Algorithm::Cmfd => Ok(()),
            Algorithm::DecFedAvg { beta } if unit(beta) => Ok(()),
            Algorithm::DecFedProx { alpha, beta } if unit(beta) && alpha >= 0.0 && alpha.is_finite() => Ok(()),
            Algorithm::DFedAvgM { beta, epsilon } if unit(beta) && (0.0..1.0).contains(&epsilon) => Ok(()),
            _ => Err(FsAdmmError::Config("baseline coefficient out of range")),
        }
    }
}

/// Bytes per transmitted scalar, `Q_o` for outputs and `Q_p` for parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Quantization {
    pub output_bytes: u64,
    pub param_bytes: u64,
}

impl Default for Quantization {
    fn default() -> Self {
        Self {
            output_bytes: 8,
            param_bytes: 8,
        }
    }
}

/// Stored multiplier values `λ̂_i(x)`, one row per shared sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierStore {
    pub values: Matrix,
}

impl MultiplierStore {
    pub fn zeros(shared_len: usize, classes: usize) -> Self {
        Self {
            values: Matrix::zeros(shared_len, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub id: usize,
    pub model: ModelState,
    /// Indices into the training set held by this device.
    pub local: Vec<usize>,
    pub multiplier: MultiplierStore,
    /// Momentum buffer (DFedAvgM only), persisted across rounds.
    pub velocity: Vec<f64>,
}

/// A payload sent by one device to each of its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangePayload {
    Outputs(Matrix),
    Params(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeMsg {
    pub sender: usize,
    pub payload: ExchangePayload,
}

impl ExchangeMsg {
    /// `Q_o·K·|D_s|` for outputs, `Q_p·N_p` for parameters.
    pub fn byte_size(&self, q: Quantization) -> u64 {
        match &self.payload {
            ExchangePayload::Outputs(m) => q.output_bytes * m.as_slice().len() as u64,
            ExchangePayload::Params(p) => q.param_bytes * p.len() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounter {
    pub outputs: u64,
    pub params: u64,
}

impl ByteCounter {
    pub fn total(&self) -> u64 {
        self.outputs + self.params
    }

    pub fn add(&mut self, other: ByteCounter) {
        self.outputs += other.outputs;
        self.params += other.params;
    }
}

/// Delivers every message to each neighbor of its sender. Returns, per
/// device, the indices (into `msgs`) of the messages it received, and the
/// bytes that crossed links.
pub fn exchange(topology: &Topology, msgs: &[ExchangeMsg], q: Quantization) -> (Vec<Vec<usize>>, ByteCounter) {
    let mut inbox = vec![Vec::new(); topology.num_devices()];
    let mut bytes = ByteCounter::default();
    for (m, msg) in msgs.iter().enumerate() {
        let size = msg.byte_size(q);
        for &j in topology.neighbors(msg.sender) {
            inbox[j].push(m);
            match msg.payload {
                ExchangePayload::Outputs(_) => bytes.outputs += size,
                ExchangePayload::Params(_) => bytes.params += size,
            }
        }
    }
    for list in &mut inbox {
        list.sort_by_key(|&m| msgs[m].sender);
    }
    (inbox, bytes)
}

/// Per-device neighbor-mean outputs after an output exchange, plus bytes.
pub fn exchange_outputs(
    topology: &Topology,
    outputs: &[Matrix],
    q: Quantization,
) -> (Vec<Matrix>, ByteCounter) {
    let msgs: Vec<ExchangeMsg> = outputs
        .iter()
        .enumerate()
        .map(|(i, m)| ExchangeMsg {
            sender: i,
            payload: ExchangePayload::Outputs(m.clone()),
        })
        .collect();
    let (inbox, bytes) = exchange(topology, &msgs, q);
    let means = inbox
        .iter()
        .map(|received| {
            let first = match &msgs[received[0]].payload {
                ExchangePayload::Outputs(m) => m,
                ExchangePayload::Params(_) => unreachable!("outputs only"),
            };
            let mut mean = Matrix::zeros(first.rows(), first.cols());
            math::anchored_mean_into(
                mean.as_mut_slice(),
                received.iter().map(|&m| match &msgs[m].payload {
                    ExchangePayload::Outputs(o) => o.as_slice(),
                    ExchangePayload::Params(_) => unreachable!("outputs only"),
                }),
            );
            mean
        })
        .collect();
    (means, bytes)
}

/// Neighbor-mean parameter vectors after a parameter exchange, plus bytes.
pub fn exchange_params(topology: &Topology, params: &[&[f64]], q: Quantization) -> (Vec<Vec<f64>>, ByteCounter) {
    let msgs: Vec<ExchangeMsg> = params
        .iter()
        .enumerate()
        .map(|(i, p)| ExchangeMsg {
            sender: i,
            payload: ExchangePayload::Params(p.to_vec()),
        })
        .collect();
    let (inbox, bytes) = exchange(topology, &msgs, q);
    let means = inbox
        .iter()
        .map(|received| {
            let mut mean = vec![0.0; params[0].len()];
            math::anchored_mean_into(
                &mut mean,
                received.iter().map(|&m| match &msgs[m].payload {
                    ExchangePayload::Params(p) => p.as_slice(),
                    ExchangePayload::Outputs(_) => unreachable!("params only"),
                }),
            );
            mean
        })
        .collect();
    (means, bytes)
}

/// How the distillation target is built in a function-space round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRule {
    /// `z = mean - λ̂` with the multiplier update (the proposed method).
    VirtualTarget,
    /// `z = mean` (CMFD).
    NeighborMean,
    /// The proposed pipeline with `λ̂` reset to zero after every update.
    VirtualTargetZeroMultiplier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    /// `f(x; w̃_i)` on the shared set after local SGD (function-space rounds only).
    pub local_outputs: Vec<Matrix>,
    /// `f(x; w_i)` on the shared set at the start of the round, when recording is on.
    pub model_outputs: Option<Vec<Matrix>>,
    pub bytes: ByteCounter,
    pub local_grad: GradCount,
    pub kd_grad: GradCount,
}

/// The whole simulated network: topology, data, and every device's state.
#[derive(Debug, Clone)]
pub struct Federation {
    topology: Topology,
    train: Dataset,
    shared: SharedSet,
    devices: Vec<DeviceState>,
    hp: HyperParams,
    quantization: Quantization,
    seed: u64,
    shared_stream: bool,
    record_model_outputs: bool,
    round: usize,
    cumulative: ByteCounter,
}

impl Federation {
    /// Synchronized start: every device gets `init` and `λ̂ = 0`.
    pub fn new(
        topology: Topology,
        train: Dataset,
        shared: SharedSet,
        local: Vec<Vec<usize>>,
        init: ModelState,
        hp: HyperParams,
        seed: u64,
    ) -> Result<Self, FsAdmmError> {
        hp.validate()?;
        if topology.num_devices() < 2 {
            return Err(FsAdmmError::Config("at least two devices are required"));
        }
        if local.len() != topology.num_devices() {
            return Err(FsAdmmError::Config("one local index list per device is required"));
        }
        if local.iter().any(|l| l.is_empty()) {
            return Err(FsAdmmError::Config("every device needs local data"));
        }
        if local.iter().flatten().any(|&s| s >= train.len()) {
            return Err(FsAdmmError::Config("local index out of range"));
        }
        if init.spec.input_dim != train.dim() || shared.dim() != train.dim() {
            return Err(FsAdmmError::Config("model input and data dimensions differ"));
        }
        if init.num_classes() != train.num_classes() {
            return Err(FsAdmmError::Config("model and data class counts differ"));
        }
        if shared.is_empty() {
            return Err(FsAdmmError::Config("shared set is empty"));
        }
        let k = init.num_classes();
        let devices = local
            .into_iter()
            .enumerate()
            .map(|(id, local)| DeviceState {
                id,
                model: init.clone(),
                local,
                multiplier: MultiplierStore::zeros(shared.len(), k),
                velocity: Vec::new(),
            })
            .collect();
        Ok(Self {
            topology,
            train,
            shared,
            devices,
            hp,
            quantization: Quantization::default(),
            seed,
            shared_stream: false,
            record_model_outputs: false,
            round: 0,
            cumulative: ByteCounter::default(),
        })
    }

    pub fn with_quantization(mut self, q: Quantization) -> Self {
        self.quantization = q;
        self
    }

    /// All devices draw from the same mini-batch stream (symmetry checks).
    pub fn with_shared_stream(mut self, shared: bool) -> Self {
        self.shared_stream = shared;
        self
    }

    /// Also record `f(x; w_i)` at the start of each round in the trace.
    pub fn with_model_outputs(mut self, record: bool) -> Self {
        self.record_model_outputs = record;
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn shared(&self) -> &SharedSet {
        &self.shared
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn devices_mut(&mut self) -> &mut [DeviceState] {
        &mut self.devices
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hp
    }

    pub fn quantization(&self) -> Quantization {
        self.quantization
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn cumulative_bytes(&self) -> ByteCounter {
        self.cumulative
    }

    fn device_rng(&self, device: usize, round: usize) -> Rng {
        let dev = if self.shared_stream { u64::MAX } else { device as u64 };
        rng::stream(self.seed, Stream::LocalSgd, &[dev, round as u64])
    }

    pub fn run_round(&mut self, algorithm: Algorithm) -> Result<RoundTrace, FsAdmmError> {
        algorithm.validate()?;
        let trace = match algorithm {
            Algorithm::PropAlg => self.function_space_round(TargetRule::VirtualTarget)?,
            Algorithm::Cmfd => self.function_space_round(TargetRule::NeighborMean)?,
            Algorithm::DecFedAvg { beta } => self.parameter_round(beta, ParamLocal::Plain)?,
            Algorithm::DecFedProx { alpha, beta } => self.parameter_round(beta, ParamLocal::Proximal(alpha))?,
            Algorithm::DFedAvgM { beta, epsilon } => self.parameter_round(beta, ParamLocal::Momentum(epsilon))?,
        };
        Ok(trace)
    }

    pub fn propalg_round(&mut self) -> Result<RoundTrace, FsAdmmError> {
        self.function_space_round(TargetRule::VirtualTarget)
    }

    pub fn cmfd_round(&mut self) -> Result<RoundTrace, FsAdmmError> {
        self.function_space_round(TargetRule::NeighborMean)
    }

    fn start_outputs(&self) -> Result<Option<Vec<Matrix>>, FsAdmmError> {
        if !self.record_model_outputs {
            return Ok(None);
        }
        let shared = &self.shared;
        let outs = par_map(&self.devices, |_, d| shared_outputs(&d.model, shared))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(outs))
    }

    /// Local SGD → output exchange → multiplier update → target → distillation.
    pub fn function_space_round(&mut self, rule: TargetRule) -> Result<RoundTrace, FsAdmmError> {
        let round = self.round;
        let model_outputs = self.start_outputs()?;
        let rngs: Vec<Rng> = (0..self.devices.len()).map(|i| self.device_rng(i, round)).collect();
        let (train, shared, hp) = (&self.train, &self.shared, self.hp);

        let step1 = par_map_mut(&mut self.devices, |i, dev| {
            let mut rng = rngs[i].clone();
            let count = local_sgd(
                &mut dev.model,
                &dev.local,
                train,
                &hp,
                LocalRule::Plain,
                &mut dev.velocity,
                &mut rng,
            )?;
            Ok::<_, FsAdmmError>((count, shared_outputs(&dev.model, shared)?))
        });
        let mut local_grad = GradCount::default();
        let mut local_outputs = Vec::with_capacity(step1.len());
        for r in step1 {
            let (count, out) = r?;
            local_grad = count;
            local_outputs.push(out);
        }

        let (means, bytes) = exchange_outputs(&self.topology, &local_outputs, self.quantization);

        let own = &local_outputs;
        let step2 = par_map_mut(&mut self.devices, |i, dev| {
            let target = match rule {
                TargetRule::NeighborMean => means[i].clone(),
                TargetRule::VirtualTarget => {
                    update_multiplier(&mut dev.multiplier, &own[i], &means[i], hp.nu)?;
                    virtual_target(&means[i], &dev.multiplier)?
                }
                TargetRule::VirtualTargetZeroMultiplier => {
                    update_multiplier(&mut dev.multiplier, &own[i], &means[i], hp.nu)?;
                    dev.multiplier.values.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
                    virtual_target(&means[i], &dev.multiplier)?
                }
            };
            kd_aggregate(&mut dev.model, shared, &target, &hp)
        });
        let mut kd_grad = GradCount::default();
        for r in step2 {
            kd_grad = r?;
        }

        self.round += 1;
        self.cumulative.add(bytes);
        Ok(RoundTrace {
            round,
            local_outputs,
            model_outputs,
            bytes,
            local_grad,
            kd_grad,
        })
    }

    fn parameter_round(&mut self, beta: f64, local_rule: ParamLocal) -> Result<RoundTrace, FsAdmmError> {
        let round = self.round;
        let model_outputs = self.start_outputs()?;
        let rngs: Vec<Rng> = (0..self.devices.len()).map(|i| self.device_rng(i, round)).collect();
        let (train, hp, q) = (&self.train, self.hp, self.quantization);
        let mut bytes = ByteCounter::default();

        // proximal anchor: neighbor mean of the parameters at round start
        let anchors = if let ParamLocal::Proximal(_) = local_rule {
            let params: Vec<&[f64]> = self.devices.iter().map(|d| d.model.params.as_slice()).collect();
            let (means, b) = exchange_params(&self.topology, &params, q);
            bytes.add(b);
            means
        } else {
            Vec::new()
        };

        let step1 = par_map_mut(&mut self.devices, |i, dev| {
            let mut rng = rngs[i].clone();
            let rule = match local_rule {
                ParamLocal::Plain => LocalRule::Plain,
                ParamLocal::Proximal(alpha) => LocalRule::Proximal {
                    alpha,
                    anchor: &anchors[i],
                },
                ParamLocal::Momentum(epsilon) => LocalRule::Momentum { epsilon },
            };
            local_sgd(&mut dev.model, &dev.local, train, &hp, rule, &mut dev.velocity, &mut rng)
        });
        let mut local_grad = GradCount::default();
        for r in step1 {
            local_grad = r?;
        }

        let params: Vec<&[f64]> = self.devices.iter().map(|d| d.model.params.as_slice()).collect();
        let (means, b) = exchange_params(&self.topology, &params, q);
        bytes.add(b);
        for (dev, mean) in self.devices.iter_mut().zip(&means) {
            for (w, m) in dev.model.params.iter_mut().zip(mean) {
                *w = (1.0 - beta) * *w + beta * m;
            }
        }

        self.round += 1;
        self.cumulative.add(bytes);
        Ok(RoundTrace {
            round,
            local_outputs: Vec::new(),
            model_outputs,
            bytes,
            local_grad,
            kd_grad: GradCount::default(),
        })
    }

    /// Current outputs of every device on the shared set.
    pub fn current_outputs(&self) -> Result<Vec<Matrix>, FsAdmmError> {
        let shared = &self.shared;
        par_map(&self.devices, |_, d| shared_outputs(&d.model, shared))
            .into_iter()
            .collect()
    }

    /// Test accuracy of every device plus consensus on the shared set.
    pub fn evaluate(&self, test: &Dataset) -> Result<Metrics, FsAdmmError> {
        let accs = par_map(&self.devices, |_, d| metrics::accuracy(&d.model, test))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let outputs = self.current_outputs()?;
        Ok(Metrics::from_parts(accs, metrics::consensus_distance(&outputs), self.cumulative))
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamLocal {
    Plain,
    Proximal(f64),
    Momentum(f64),
}

#[cfg(feature = "std")]
fn par_map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "std"))]
fn par_map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    F: Fn(usize, &mut T) -> R,
{
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "std")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "std"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_nu_update_is_plain_accumulation() {
        let mut store = MultiplierStore::zeros(2, 2);
        let own = Matrix::from_vec(2, 2, vec![0.6, 0.4, 0.2, 0.8]);
        let mean = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        update_multiplier(&mut store, &own, &mean, 0.0).unwrap();
        update_multiplier(&mut store, &own, &mean, 0.0).unwrap();
        let expect = [0.2, -0.2, -0.6, 0.6];
        for (a, b) in store.values.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_residual_decays_multiplier() {
        let mut store = MultiplierStore {
            values: Matrix::from_vec(1, 2, vec![1.0, -2.0]),
        };
        let same = Matrix::from_vec(1, 2, vec![0.3, 0.7]);
        update_multiplier(&mut store, &same, &same, 0.25).unwrap();
        assert_eq!(store.values.as_slice(), &[0.75, -1.5]);
    }

    #[test]
    fn constant_residual_converges_to_residual_over_nu() {
        let mut store = MultiplierStore::zeros(1, 1);
        let own = Matrix::from_vec(1, 1, vec![0.3]);
        let mean = Matrix::from_vec(1, 1, vec![0.1]);
        for _ in 0..5000 {
            update_multiplier(&mut store, &own, &mean, 0.01).unwrap();
        }
        let fixed = (0.3 - 0.1) / 0.01;
        // geometric series: λ_t = r (1 - (1-ν)^t) / ν
        let expect = 0.2 * (1.0 - libm::pow(0.99, 5000.0)) / 0.01;
        assert!((store.values[(0, 0)] - expect).abs() < 1e-9);
        assert!((store.values[(0, 0)] - fixed).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = MultiplierStore::zeros(2, 2);
        let bad = Matrix::zeros(1, 2);
        assert_eq!(
            update_multiplier(&mut store, &bad, &bad, 0.0),
            Err(FsAdmmError::Shape)
        );
        assert_eq!(virtual_target(&bad, &store).unwrap_err(), FsAdmmError::Shape);
    }

    #[test]
    fn zero_multiplier_target_is_neighbor_mean() {
        let store = MultiplierStore::zeros(1, 3);
        let mean = Matrix::from_vec(1, 3, vec![0.2, 0.3, 0.5]);
        assert_eq!(virtual_target(&mean, &store).unwrap(), mean);
    }

    #[test]
    fn virtual_target_may_leave_the_simplex() {
        let store = MultiplierStore {
            values: Matrix::from_vec(1, 2, vec![5.0, -5.0]),
        };
        let mean = Matrix::from_vec(1, 2, vec![0.5, 0.5]);
        let z = virtual_target(&mean, &store).unwrap();
        assert_eq!(z.as_slice(), &[-4.5, 5.5]);
    }

    #[test]
    fn hyperparameter_validation() {
        let mut hp = HyperParams::default();
        assert!(hp.validate().is_ok());
        hp.nu = 1.0;
        assert!(hp.validate().is_err());
        hp.nu = 0.0;
        hp.kd_batch = 0;
        assert!(hp.validate().is_err());
        assert!(Algorithm::DecFedAvg { beta: 1.5 }.validate().is_err());
        assert!(Algorithm::DFedAvgM { beta: 0.5, epsilon: 1.0 }.validate().is_err());
    }

    #[test]
    fn star_exchange_counts_messages() {
        let t = Topology::star(4).unwrap();
        let outs: Vec<Matrix> = (0..4).map(|i| Matrix::from_vec(1, 1, vec![i as f64])).collect();
        let msgs: Vec<ExchangeMsg> = outs
            .iter()
            .enumerate()
            .map(|(i, m)| ExchangeMsg {
                sender: i,
                payload: ExchangePayload::Outputs(m.clone()),
            })
            .collect();
        let (inbox, bytes) = exchange(&t, &msgs, Quantization::default());
        assert_eq!(inbox[0].len(), 3);
        assert!(inbox[1..].iter().all(|l| l.len() == 1));
        assert_eq!(bytes.outputs, 6 * 8);
        let (means, _) = exchange_outputs(&t, &outs, Quantization::default());
        assert_eq!(means[0].as_slice(), &[2.0]);
        assert_eq!(means[3].as_slice(), &[0.0]);
    }
}
