//! Experiment orchestration: setup from a config, the round loop, metrics,
//! persistence, sweeps and byte/overhead accounting.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use fsdadmm_core::cost;
use fsdadmm_core::data::{
    make_synthetic, partition_dirichlet, partition_iid, partition_k_class, sample_shared, Dataset, Partition,
    SharedSet,
};
use fsdadmm_core::fsadmm::{Algorithm, ByteCounter, FsAdmmError, GradCount};
use fsdadmm_core::graph::GraphError;
use fsdadmm_core::metrics::Metrics;
use fsdadmm_core::nnmodel::{ModelError, ModelSpec, ModelState};
use fsdadmm_core::rng::{self, Stream};
use fsdadmm_core::{Federation, Topology};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AlgorithmName, ConfigError, DatasetConfig, ExperimentConfig, PartitionConfig, TopologyConfig};
use crate::formats::{self, FormatError, PartitionManifest};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("topology: {0}")]
    Graph(#[from] GraphError),
    #[error("data: {0}")]
    Data(#[from] fsdadmm_core::data::DataError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("round: {0}")]
    Round(#[from] FsAdmmError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl EngineError {
    /// Whether the failure is the config's fault rather than a runtime one.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            EngineError::Config(_) | EngineError::Graph(_) | EngineError::Data(_)
        )
    }
}

/// Everything a run needs before the first round.
#[derive(Debug, Clone)]
pub struct Setup {
    pub topology: Topology,
    pub train: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
    /// `None` for replicated local data, which is not a disjoint partition.
    pub partition: Option<Partition>,
    pub local: Vec<Vec<usize>>,
    pub shared: SharedSet,
    pub init: ModelState,
}

impl Setup {
    pub fn manifest(&self) -> PartitionManifest {
        match &self.partition {
            Some(p) => PartitionManifest::new(p, &self.train),
            None => {
                // replicated: manifest over a single shared copy per device
                let mut m = PartitionManifest {
                    num_classes: self.train.num_classes(),
                    devices: Vec::new(),
                };
                for (device, idx) in self.local.iter().enumerate() {
                    let single = Partition::new(vec![idx.clone()], self.train.len()).expect("valid indices");
                    let mut entry = PartitionManifest::new(&single, &self.train).devices.remove(0);
                    entry.device = device;
                    m.devices.push(entry);
                }
                m
            }
        }
    }
}

pub fn build_topology(cfg: &ExperimentConfig) -> Result<Topology, EngineError> {
    Ok(match &cfg.topology {
        TopologyConfig::Ring { n } => Topology::ring(*n)?,
        TopologyConfig::Star { n } => Topology::star(*n)?,
        TopologyConfig::Random { n, edges } => Topology::random_connected(*n, *edges, cfg.seed)?,
        TopologyConfig::File { path } => formats::read_edge_list(&fs::read_to_string(path)?)?,
    })
}

/// Builds topology, data, partition, shared set and the common initial model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup, EngineError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let topology = build_topology(cfg)?;
    let n = topology.num_devices();

    let (train, test, pool) = match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => {
            let s = make_synthetic(spec, seed)?;
            (s.train, s.test, s.pool)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            pool_size,
            num_classes,
        } => {
            let full = formats::read_idx_dataset(train_images, train_labels, *num_classes)?;
            let test = formats::read_idx_dataset(test_images, test_labels, *num_classes)?;
            if *pool_size >= full.len() {
                return Err(ConfigError::Invalid(vec![crate::config::FieldError {
                    path: "dataset.pool_size".into(),
                    message: "must be smaller than the training set".into(),
                }])
                .into());
            }
            let split = full.len() - pool_size;
            let train = full.subset(&(0..split).collect::<Vec<_>>())?;
            let pool = full.subset(&(split..full.len()).collect::<Vec<_>>())?;
            (train, test, pool)
        }
    };

    let partition = match cfg.partition {
        PartitionConfig::KClass { classes_per_device } => Some(partition_k_class(&train, n, classes_per_device, seed)?),
        PartitionConfig::Dirichlet { alpha } => Some(partition_dirichlet(&train, n, alpha, seed)?),
        PartitionConfig::Iid => Some(partition_iid(&train, n, seed)?),
        PartitionConfig::Replicated { .. } => None,
    };
    let local = match (&partition, cfg.partition.clone()) {
        (Some(p), _) => p.assignment().to_vec(),
        (None, PartitionConfig::Replicated { samples_per_device }) => {
            if samples_per_device > train.len() {
                return Err(ConfigError::Invalid(vec![crate::config::FieldError {
                    path: "partition.samples_per_device".into(),
                    message: format!("exceeds the {} training samples", train.len()),
                }])
                .into());
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::stream(seed, Stream::Partition, &[u64::MAX]));
            let mut idx = order[..samples_per_device].to_vec();
            idx.sort_unstable();
            vec![idx; n]
        }
        (None, _) => unreachable!("only replicated data has no partition"),
    };

    let shared = sample_shared(&pool, cfg.shared.size, cfg.shared.mode, seed)?;
    let mut spec = ModelSpec::new(train.dim(), cfg.model.hidden.clone(), train.num_classes())?;
    if cfg.model.layer_norm {
        spec = spec.with_layer_norm();
    }
    let init = ModelState::init(spec, seed)?;
    Ok(Setup {
        topology,
        train,
        test,
        pool,
        partition,
        local,
        shared,
        init,
    })
}

pub fn build_federation(cfg: &ExperimentConfig, setup: &Setup) -> Result<Federation, EngineError> {
    let replicated = matches!(cfg.partition, PartitionConfig::Replicated { .. });
    Ok(Federation::new(
        setup.topology.clone(),
        setup.train.clone(),
        setup.shared.clone(),
        setup.local.clone(),
        setup.init.clone(),
        cfg.hyper,
        cfg.seed,
    )?
    .with_quantization(cfg.quantization)
    .with_shared_stream(replicated))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub algorithm: String,
    pub avg_acc: f64,
    pub acc_gap: f64,
    pub consensus_dist: f64,
    pub cum_bytes_outputs: u64,
    pub cum_bytes_params: u64,
    pub per_device_acc: Vec<f64>,
}

impl EvalRecord {
    fn new(round: usize, algorithm: AlgorithmName, m: &Metrics) -> Self {
        Self {
            round,
            algorithm: algorithm.to_string(),
            avg_acc: m.avg_acc,
            acc_gap: m.acc_gap,
            consensus_dist: m.consensus_dist,
            cum_bytes_outputs: m.cum_bytes_outputs,
            cum_bytes_params: m.cum_bytes_params,
            per_device_acc: m.per_device_acc.clone(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<EvalRecord>,
    pub final_metrics: Metrics,
    pub federation: Federation,
    pub setup: Setup,
    /// Gradient work of the last round, per device.
    pub local_grad: GradCount,
    pub kd_grad: GradCount,
    pub round_bytes: Vec<ByteCounter>,
}

impl RunOutcome {
    pub fn final_record(&self) -> &EvalRecord {
        self.records.last().expect("at least one evaluation")
    }
}

/// Runs without touching the filesystem. `on_eval` sees each record as it is
/// produced.
pub fn run_with(
    cfg: &ExperimentConfig,
    mut on_eval: impl FnMut(&EvalRecord) -> Result<(), EngineError>,
) -> Result<RunOutcome, EngineError> {
    let setup = prepare(cfg)?;
    let mut fed = build_federation(cfg, &setup)?;
    let algorithm: Algorithm = cfg.algorithm_value();
    let mut records = Vec::new();
    let mut round_bytes = Vec::with_capacity(cfg.rounds);
    let mut local_grad = GradCount::default();
    let mut kd_grad = GradCount::default();
    let mut last = None;
    for t in 1..=cfg.rounds {
        let trace = fed.run_round(algorithm)?;
        round_bytes.push(trace.bytes);
        local_grad = trace.local_grad;
        kd_grad = trace.kd_grad;
        if t % cfg.eval_every == 0 || t == cfg.rounds {
            let m = fed.evaluate(&setup.test)?;
            let rec = EvalRecord::new(t, cfg.algorithm, &m);
            on_eval(&rec)?;
            records.push(rec);
            last = Some(m);
        }
    }
    Ok(RunOutcome {
        records,
        final_metrics: last.expect("rounds ≥ 1"),
        federation: fed,
        setup,
        local_grad,
        kd_grad,
        round_bytes,
    })
}

pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunOutcome, EngineError> {
    run_with(cfg, |_| Ok(()))
}

/// Runs and writes into `out`:
///
/// - `config.toml`: the resolved config
/// - `metrics.jsonl`: one record per evaluation
/// - `topology.edges`: the edge list
/// - `partition.json`: per-device indices, label histograms, KL from uniform
/// - `models/device_<i>.bin`: final models
/// - `summary.json`: final record plus gradient and byte totals
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome, EngineError> {
    cfg.validate()?;
    fs::create_dir_all(out.join("models"))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let mut log = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
    let outcome = run_with(cfg, |rec| {
        writeln!(log, "{}", formats::to_json(rec)?)?;
        Ok(())
    })?;
    log.flush()?;
    fs::write(out.join("topology.edges"), formats::write_edge_list(&outcome.setup.topology))?;
    fs::write(out.join("partition.json"), formats::to_json(&outcome.setup.manifest())?)?;
    for dev in outcome.federation.devices() {
        formats::write_model(&out.join("models").join(format!("device_{:03}.bin", dev.id)), &dev.model)?;
    }
    let summary = Summary {
        final_record: outcome.final_record().clone(),
        rounds: cfg.rounds,
        local_steps: cfg.hyper.local_steps,
        local_grad_steps_per_round: outcome.local_grad.steps,
        kd_grad_steps_per_round: outcome.kd_grad.steps,
        total_bytes: outcome.federation.cumulative_bytes().total(),
    };
    fs::write(out.join("summary.json"), formats::to_json(&summary)?)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub final_record: EvalRecord,
    pub rounds: usize,
    pub local_steps: usize,
    pub local_grad_steps_per_round: usize,
    pub kd_grad_steps_per_round: usize,
    pub total_bytes: u64,
}

/// Hyperparameter grid. Every cell reuses the base seed, so cells differ only
/// in the swept values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub etas: Vec<f64>,
    pub rho_hats: Vec<f64>,
    pub nus: Vec<f64>,
}

impl SweepGrid {
    /// 3 × 3 log-spaced grid over `η ∈ [1e-4, 1e-2]`, `ρ̂ ∈ [1e-3, 1e-2]`.
    pub fn default_for(base: &ExperimentConfig) -> Self {
        Self {
            etas: vec![1e-4, 1e-3, 1e-2],
            rho_hats: vec![1e-3, 10f64.powf(-2.5), 1e-2],
            nus: vec![base.hyper.nu],
        }
    }

    pub fn len(&self) -> usize {
        self.etas.len() * self.rho_hats.len() * self.nus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in `(ν, η, ρ̂)` lexicographic order.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &nu in &self.nus {
            for &eta in &self.etas {
                for &rho_hat in &self.rho_hats {
                    out.push((nu, eta, rho_hat));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub nu: f64,
    pub eta: f64,
    pub rho_hat: f64,
    pub avg_acc: f64,
    pub acc_gap: f64,
    pub consensus_dist: f64,
}

/// One run per cell, in parallel; results come back in [`SweepGrid::cells`] order.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>, EngineError> {
    base.validate()?;
    grid.cells()
        .into_par_iter()
        .map(|(nu, eta, rho_hat)| {
            let mut cfg = base.clone();
            cfg.hyper.nu = nu;
            cfg.hyper.eta = eta;
            cfg.hyper.rho_hat = rho_hat;
            cfg.eval_every = cfg.rounds;
            let m = run_in_memory(&cfg)?.final_metrics;
            Ok(SweepCell {
                nu,
                eta,
                rho_hat,
                avg_acc: m.avg_acc,
                acc_gap: m.acc_gap,
                consensus_dist: m.consensus_dist,
            })
        })
        .collect()
}

pub fn sweep_csv(cells: &[SweepCell]) -> Result<String, EngineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["nu", "eta", "rho_hat", "avg_acc", "acc_gap", "consensus_dist"])?;
    for c in cells {
        w.write_record(
            [c.nu, c.eta, c.rho_hat, c.avg_acc, c.acc_gap, c.consensus_dist]
                .iter()
                .map(|v| formats::fmt_f64(*v)),
        )?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("CSV of ASCII numbers"))
}

/// Closed-form versus measured communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub algorithm: String,
    pub num_params: u64,
    pub num_classes: u64,
    pub shared_size: u64,
    /// `Q_p · N_p`
    pub param_payload_bytes: u64,
    /// `Q_o · K · |D_s|`
    pub output_payload_bytes: u64,
    /// Directed neighbor links used per exchange, `2|E|`.
    pub links: u64,
    pub rounds: usize,
    pub closed_form_per_round: u64,
    pub closed_form_total: u64,
    pub measured_total: u64,
    pub matches: bool,
}

/// Bytes one round of `cfg.algorithm` sends, from the closed form.
pub fn closed_form_round_bytes(cfg: &ExperimentConfig, topology: &Topology, num_params: u64, num_classes: u64) -> u64 {
    let q = cfg.quantization;
    let links = cost::link_uses(topology);
    match cfg.algorithm {
        AlgorithmName::PropAlg | AlgorithmName::Cmfd => {
            links * cost::output_payload_bytes(num_classes, cfg.shared.size as u64, q.output_bytes)
        }
        AlgorithmName::DecFedAvg | AlgorithmName::DFedAvgM => {
            links * cost::parameter_payload_bytes(num_params, q.param_bytes)
        }
        // anchor exchange plus averaging exchange
        AlgorithmName::DecFedProx => 2 * links * cost::parameter_payload_bytes(num_params, q.param_bytes),
    }
}

/// Runs `cfg` and compares the measured byte total with the closed form.
pub fn cost_report(cfg: &ExperimentConfig) -> Result<CostReport, EngineError> {
    let mut cfg = cfg.clone();
    cfg.eval_every = cfg.rounds;
    let outcome = run_in_memory(&cfg)?;
    let np = outcome.setup.init.num_params() as u64;
    let k = outcome.setup.train.num_classes() as u64;
    let topology = &outcome.setup.topology;
    let per_round = closed_form_round_bytes(&cfg, topology, np, k);
    let measured_total = outcome.federation.cumulative_bytes().total();
    let closed_form_total = per_round * cfg.rounds as u64;
    let q = cfg.quantization;
    Ok(CostReport {
        algorithm: cfg.algorithm.to_string(),
        num_params: np,
        num_classes: k,
        shared_size: cfg.shared.size as u64,
        param_payload_bytes: cost::parameter_payload_bytes(np, q.param_bytes),
        output_payload_bytes: cost::output_payload_bytes(k, cfg.shared.size as u64, q.output_bytes),
        links: cost::link_uses(topology),
        rounds: cfg.rounds,
        closed_form_per_round: per_round,
        closed_form_total,
        measured_total,
        matches: closed_form_total == measured_total,
    })
}

/// Gradient mini-batch steps of the distillation pass over those of the local
/// pass, measured on one function-space round (the config's algorithm if it
/// shares outputs, otherwise the proposed one).
pub fn kd_overhead_ratio(cfg: &ExperimentConfig) -> Result<f64, EngineError> {
    let mut cfg = cfg.clone();
    if !cfg.algorithm.uses_outputs() {
        cfg.set_algorithm(AlgorithmName::PropAlg);
    }
    cfg.rounds = 1;
    cfg.eval_every = 1;
    let outcome = run_in_memory(&cfg)?;
    Ok(outcome.kd_grad.steps as f64 / outcome.local_grad.steps as f64)
}
