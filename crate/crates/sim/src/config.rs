//! Experiment configuration (TOML) and its validation.
//!
//! Every table is optional; omitted keys take the desk-scale defaults. See
//! `configs/default.toml` for a fully spelled-out example.

use std::fmt;
use std::path::{Path, PathBuf};

use fsdadmm_core::data::{SharedMode, SyntheticSpec};
use fsdadmm_core::fsadmm::{Algorithm, HyperParams, Quantization};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmName {
    PropAlg,
    Cmfd,
    DecFedAvg,
    DecFedProx,
    DFedAvgM,
}

impl AlgorithmName {
    pub const ALL: [AlgorithmName; 5] = [
        AlgorithmName::PropAlg,
        AlgorithmName::Cmfd,
        AlgorithmName::DecFedAvg,
        AlgorithmName::DecFedProx,
        AlgorithmName::DFedAvgM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmName::PropAlg => "propalg",
            AlgorithmName::Cmfd => "cmfd",
            AlgorithmName::DecFedAvg => "decfedavg",
            AlgorithmName::DecFedProx => "decfedprox",
            AlgorithmName::DFedAvgM => "dfedavgm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    /// Baseline coefficients this algorithm needs, as `[beta, alpha, epsilon]`.
    fn required(self) -> [bool; 3] {
        match self {
            AlgorithmName::PropAlg | AlgorithmName::Cmfd => [false, false, false],
            AlgorithmName::DecFedAvg => [true, false, false],
            AlgorithmName::DecFedProx => [true, true, false],
            AlgorithmName::DFedAvgM => [true, false, true],
        }
    }
}

impl fmt::Display for AlgorithmName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologyConfig {
    Ring { n: usize },
    Star { n: usize },
    /// Uniformly random connected graph with exactly `edges` edges.
    Random { n: usize, edges: usize },
    /// Edge-list file (see `formats::read_edge_list`).
    File { path: PathBuf },
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig::Ring { n: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// MNIST-style IDX files. The last `pool_size` training images form the
    /// unlabeled pool the shared set is drawn from.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        pool_size: usize,
        #[serde(default = "default_idx_classes")]
        num_classes: usize,
    },
}

fn default_idx_classes() -> usize {
    10
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Each device holds exactly `classes_per_device` classes.
    KClass { classes_per_device: usize },
    Dirichlet { alpha: f64 },
    Iid,
    /// Every device gets the same `samples_per_device` training samples, and
    /// all devices share one mini-batch stream.
    Replicated { samples_per_device: usize },
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::KClass { classes_per_device: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedConfig {
    pub size: usize,
    pub mode: SharedMode,
}

impl Default for SharedConfig {
    fn default() -> Self {
        Self {
            size: 200,
            mode: SharedMode::Iid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            layer_norm: false,
        }
    }
}

/// Baseline coefficients. Each must be set exactly when the algorithm uses it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Mixing weight of the neighbor-mean parameters.
    pub beta: Option<f64>,
    /// Proximal coefficient.
    pub alpha: Option<f64>,
    /// Heavy-ball momentum.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmName,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub shared: SharedConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub quantization: Quantization,
}

fn default_rounds() -> usize {
    300
}

fn default_eval_every() -> usize {
    50
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new(AlgorithmName::PropAlg)
    }
}

/// One problem with a config, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ExperimentConfig {
    /// Desk-scale defaults for `algorithm`, with the baseline coefficients it
    /// needs (`β = 1`, `α = 0.01`, `ε = 0.5`).
    pub fn new(algorithm: AlgorithmName) -> Self {
        let mut cfg = Self {
            algorithm,
            rounds: default_rounds(),
            seed: 0,
            eval_every: default_eval_every(),
            out: None,
            topology: TopologyConfig::default(),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            shared: SharedConfig::default(),
            model: ModelConfig::default(),
            hyper: HyperParams::default(),
            baseline: BaselineConfig::default(),
            quantization: Quantization::default(),
        };
        cfg.set_algorithm(algorithm);
        cfg
    }

    /// Switches algorithm, filling in or dropping baseline coefficients so the
    /// config stays valid.
    pub fn set_algorithm(&mut self, algorithm: AlgorithmName) {
        let [beta, alpha, epsilon] = algorithm.required();
        let b = &mut self.baseline;
        b.beta = beta.then(|| b.beta.unwrap_or(1.0));
        b.alpha = alpha.then(|| b.alpha.unwrap_or(0.01));
        b.epsilon = epsilon.then(|| b.epsilon.unwrap_or(0.5));
        self.algorithm = algorithm;
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn num_devices(&self) -> Option<usize> {
        match self.topology {
            TopologyConfig::Ring { n } | TopologyConfig::Star { n } | TopologyConfig::Random { n, .. } => Some(n),
            TopologyConfig::File { .. } => None,
        }
    }

    /// The core algorithm value. Only meaningful after [`validate`](Self::validate).
    pub fn algorithm_value(&self) -> Algorithm {
        let b = self.baseline;
        match self.algorithm {
            AlgorithmName::PropAlg => Algorithm::PropAlg,
            AlgorithmName::Cmfd => Algorithm::Cmfd,
            AlgorithmName::DecFedAvg => Algorithm::DecFedAvg {
                beta: b.beta.unwrap_or(1.0),
            },
            AlgorithmName::DecFedProx => Algorithm::DecFedProx {
                alpha: b.alpha.unwrap_or(0.0),
                beta: b.beta.unwrap_or(1.0),
            },
            AlgorithmName::DFedAvgM => Algorithm::DFedAvgM {
                beta: b.beta.unwrap_or(1.0),
                epsilon: b.epsilon.unwrap_or(0.0),
            },
        }
    }

    /// Collects every problem, each with its key path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |path: &str, message: &str| {
            errs.push(FieldError {
                path: path.to_string(),
                message: message.to_string(),
            })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();

        if self.rounds == 0 {
            bad("rounds", "must be at least 1");
        }
        if self.eval_every == 0 {
            bad("eval_every", "must be at least 1");
        }

        match &self.topology {
            TopologyConfig::Ring { n } if *n < 3 => bad("topology.n", "a ring needs at least 3 devices"),
            TopologyConfig::Star { n } if *n < 2 => bad("topology.n", "a star needs at least 2 devices"),
            TopologyConfig::Random { n, edges } => {
                if *n < 2 {
                    bad("topology.n", "at least 2 devices are required");
                } else if *edges < n - 1 || *edges > n * (n - 1) / 2 {
                    bad("topology.edges", "must lie in [n - 1, n(n - 1)/2] for a connected simple graph");
                }
            }
            _ => {}
        }

        let classes = match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                if s.num_classes < 2 {
                    bad("dataset.num_classes", "at least 2 classes are required");
                }
                if s.train_per_class == 0 {
                    bad("dataset.train_per_class", "must be positive");
                }
                if s.test_per_class == 0 {
                    bad("dataset.test_per_class", "must be positive");
                }
                if s.input_dim == 0 {
                    bad("dataset.input_dim", "must be positive");
                }
                if !positive(s.separation) {
                    bad("dataset.separation", "must be positive and finite");
                }
                if s.pool_per_class * s.num_classes < self.shared.size {
                    bad("shared.size", "larger than the synthetic pool (pool_per_class × num_classes)");
                }
                Some(s.num_classes)
            }
            DatasetConfig::Idx {
                pool_size, num_classes, ..
            } => {
                if *pool_size < self.shared.size {
                    bad("dataset.pool_size", "must be at least shared.size");
                }
                if *num_classes < 2 {
                    bad("dataset.num_classes", "at least 2 classes are required");
                }
                Some(*num_classes)
            }
        };

        match self.partition {
            PartitionConfig::KClass { classes_per_device } => {
                if classes_per_device == 0 {
                    bad("partition.classes_per_device", "must be positive");
                }
                if let Some(k) = classes {
                    if classes_per_device > k {
                        bad("partition.classes_per_device", "exceeds the number of classes");
                    }
                    if let Some(n) = self.num_devices() {
                        if n * classes_per_device < k {
                            bad("partition.classes_per_device", "some class would be held by no device");
                        }
                    }
                }
            }
            PartitionConfig::Dirichlet { alpha } if !positive(alpha) => {
                bad("partition.alpha", "must be positive and finite")
            }
            PartitionConfig::Replicated { samples_per_device: 0 } => {
                bad("partition.samples_per_device", "must be positive")
            }
            _ => {}
        }

        if self.shared.size == 0 {
            bad("shared.size", "must be positive");
        }
        if let SharedMode::Dirichlet { alpha } = self.shared.mode {
            if !positive(alpha) {
                bad("shared.mode.alpha", "must be positive and finite");
            }
        }

        if self.model.hidden.contains(&0) {
            bad("model.hidden", "layer widths must be positive");
        }

        let h = &self.hyper;
        if !positive(h.eta) {
            bad("hyper.eta", "must be positive and finite");
        }
        if self.algorithm.uses_outputs() && !positive(h.rho_hat) {
            bad("hyper.rho_hat", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&h.nu) {
            bad("hyper.nu", "must lie in [0, 1)");
        }
        if h.local_batch == 0 {
            bad("hyper.local_batch", "must be positive");
        }
        if h.local_steps == 0 {
            bad("hyper.local_steps", "must be positive");
        }
        if h.kd_batch == 0 {
            bad("hyper.kd_batch", "must be positive");
        }

        let q = self.quantization;
        if q.output_bytes == 0 {
            bad("quantization.output_bytes", "must be positive");
        }
        if q.param_bytes == 0 {
            bad("quantization.param_bytes", "must be positive");
        }

        let required = self.algorithm.required();
        let b = self.baseline;
        let present = [b.beta, b.alpha, b.epsilon];
        let names = ["baseline.beta", "baseline.alpha", "baseline.epsilon"];
        for k in 0..3 {
            match (required[k], present[k]) {
                (true, None) => bad(names[k], &format!("required by algorithm {}", self.algorithm)),
                (false, Some(_)) => bad(names[k], &format!("not used by algorithm {}", self.algorithm)),
                _ => {}
            }
        }
        if let Some(beta) = b.beta {
            if !(0.0..=1.0).contains(&beta) {
                bad("baseline.beta", "must lie in [0, 1]");
            }
        }
        if let Some(alpha) = b.alpha {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                bad("baseline.alpha", "must be non-negative and finite");
            }
        }
        if let Some(eps) = b.epsilon {
            if !(0.0..1.0).contains(&eps) {
                bad("baseline.epsilon", "must lie in [0, 1)");
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

impl AlgorithmName {
    pub fn uses_outputs(self) -> bool {
        matches!(self, AlgorithmName::PropAlg | AlgorithmName::Cmfd)
    }
}
