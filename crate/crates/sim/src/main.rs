use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fsdadmm::config::{AlgorithmName, ConfigError, ExperimentConfig};
use fsdadmm::engine::{self, EngineError, SweepGrid};
use fsdadmm::formats;
use fsdadmm::verify;
use fsdadmm_core::dynamics::InjectedFault;

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "FSDADMM_OUT";
const DEFAULT_OUT: &str = "fsdadmm-out";

#[derive(Parser)]
#[command(name = "fsdadmm", version, about = "Function-space decentralized ADMM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Global seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to the config's `out`, then $FSDADMM_OUT, then ./fsdadmm-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, edge list, partition and models.
    Run {
        /// TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Algorithm override.
        #[arg(long, value_enum)]
        algo: Option<Algo>,
        /// Number of rounds override.
        #[arg(long)]
        rounds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid sweep over (eta, rho_hat[, nu]); writes sweep.csv.
    Sweep {
        /// TOML base config (defaults if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        /// Comma-separated distillation rates.
        #[arg(long, value_delimiter = ',')]
        rho_hats: Option<Vec<f64>>,
        /// Comma-separated stabilization coefficients.
        #[arg(long, value_delimiter = ',')]
        nus: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Check the linear output-dynamics decomposition on random instances.
    VerifyDynamics {
        /// Number of random instances.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Deliberately corrupt the decomposition (negative control).
        #[arg(long, value_enum, hide = true, default_value_t = Fault::None)]
        inject_fault: Fault,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form versus measured communication bytes.
    Cost {
        /// TOML experiment config (defaults if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rounds to measure (overrides the config).
        #[arg(long)]
        rounds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-device sample counts, label histograms and KL from uniform.
    PartitionStats {
        /// TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Propalg,
    Cmfd,
    Decfedavg,
    Decfedprox,
    Dfedavgm,
}

impl From<Algo> for AlgorithmName {
    fn from(a: Algo) -> Self {
        match a {
            Algo::Propalg => AlgorithmName::PropAlg,
            Algo::Cmfd => AlgorithmName::Cmfd,
            Algo::Decfedavg => AlgorithmName::DecFedAvg,
            Algo::Decfedprox => AlgorithmName::DecFedProx,
            Algo::Dfedavgm => AlgorithmName::DFedAvgM,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    None,
    IntegralSign,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        if e.is_config_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<formats::FormatError> for Failure {
    fn from(e: formats::FormatError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(config: Option<&Path>, common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Run {
            config,
            algo,
            rounds,
            common,
        } => {
            let mut cfg = load(Some(&config), &common)?;
            if let Some(a) = algo {
                cfg.set_algorithm(a.into());
            }
            if let Some(t) = rounds {
                cfg.rounds = t;
            }
            cfg.validate()?;
            let out = out_dir(&common, Some(&cfg));
            let outcome = engine::run_experiment(&cfg, &out)?;
            let rec = outcome.final_record();
            println!("algorithm {} rounds {}", cfg.algorithm, rec.round);
            println!("avg_acc {}", formats::fmt_f64(rec.avg_acc));
            println!("acc_gap {}", formats::fmt_f64(rec.acc_gap));
            println!("output {}", out.display());
        }
        Command::Sweep {
            config,
            etas,
            rho_hats,
            nus,
            common,
        } => {
            let cfg = load(config.as_deref(), &common)?;
            cfg.validate()?;
            let mut grid = SweepGrid::default_for(&cfg);
            if let Some(v) = etas {
                grid.etas = v;
            }
            if let Some(v) = rho_hats {
                grid.rho_hats = v;
            }
            if let Some(v) = nus {
                grid.nus = v;
            }
            if grid.is_empty() {
                return Err(Failure::Usage("sweep grid is empty".into()));
            }
            let cells = engine::sweep(&cfg, &grid)?;
            let csv = engine::sweep_csv(&cells).map_err(|e| Failure::Runtime(e.to_string()))?;
            let out = out_dir(&common, Some(&cfg));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::VerifyDynamics {
            instances,
            inject_fault,
            common,
        } => {
            if instances == 0 {
                return Err(Failure::Usage("--instances must be at least 1".into()));
            }
            let fault = match inject_fault {
                Fault::None => InjectedFault::None,
                Fault::IntegralSign => InjectedFault::IntegralSign,
            };
            let report = verify::verify_dynamics(instances, common.seed.unwrap_or(0), fault);
            let out = out_dir(&common, None);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("verify_dynamics.json"), formats::to_json(&report)?)?;
            println!("instances {}", report.instances.len());
            println!(
                "worst_decomposition_residual {}",
                formats::fmt_f64(report.worst_decomposition_residual)
            );
            println!("worst_identity_residual {}", formats::fmt_f64(report.worst_identity_residual));
            println!("{}", if report.passed { "PASS" } else { "FAIL" });
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Cost { config, rounds, common } => {
            let mut cfg = load(config.as_deref(), &common)?;
            if let Some(t) = rounds {
                cfg.rounds = t;
            }
            cfg.validate()?;
            let report = engine::cost_report(&cfg)?;
            let ratio = engine::kd_overhead_ratio(&cfg)?;
            let out = out_dir(&common, Some(&cfg));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("cost.json"), formats::to_json(&report)?)?;
            println!("algorithm {}", report.algorithm);
            println!("num_params {}", report.num_params);
            println!("param_payload_bytes {}", report.param_payload_bytes);
            println!("output_payload_bytes {}", report.output_payload_bytes);
            println!("links {}", report.links);
            println!("closed_form_total {}", report.closed_form_total);
            println!("measured_total {}", report.measured_total);
            println!("kd_overhead_ratio {}", formats::fmt_f64(ratio));
            if !report.matches {
                eprintln!("error: measured bytes differ from the closed form");
                return Ok(ExitCode::from(1));
            }
        }
        Command::PartitionStats { config, common } => {
            let cfg = load(Some(&config), &common)?;
            let setup = engine::prepare(&cfg)?;
            let manifest = setup.manifest();
            let out = out_dir(&common, Some(&cfg));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("partition.json"), formats::to_json(&manifest)?)?;
            print!("{}", manifest.table());
        }
    }
    Ok(ExitCode::SUCCESS)
}
