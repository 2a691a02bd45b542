//! Randomized oracle suite for the linear output dynamics.

use fsdadmm_core::dynamics::{
    edgewise_indirect, relative_residual, simulate_linear, update_terms, verify_chain, IdentityCheck, InjectedFault, NoiseSchedule,
    IDENTITY_TOL,
};
use fsdadmm_core::rng::{self, Stream};
use fsdadmm_core::Topology;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Tolerance for the edgewise formula against the matrix product, relative
/// to `1 + max |·|` like the other identity checks.
pub const EDGEWISE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub index: usize,
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub rounds: usize,
    pub rho: f64,
    pub nu: f64,
    pub synchronized_start: bool,
}

/// A random linear-dynamics problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: InstanceParams,
    pub topology: Topology,
    pub schedule: NoiseSchedule,
    pub y0: Vec<f64>,
    pub lambda0: Vec<f64>,
}

/// `n ∈ 3..=8`, `T ∈ 5..=50`, `ρ ∈ (0, 1]`, `ν ∈ [0, 0.5]`, a random connected
/// graph, Gaussian drift and noise. Every other instance starts synchronized.
pub fn random_instance(seed: u64, index: usize) -> Instance {
    let mut r = rng::stream(seed, Stream::Verify, &[index as u64]);
    let n = r.random_range(3..=8usize);
    let max_edges = n * (n - 1) / 2;
    let m = r.random_range(n - 1..=max_edges);
    let topology = Topology::random_connected(n, m, r.random()).expect("feasible edge count");
    let rounds = r.random_range(5..=50usize);
    let rho = 1.0 - r.random::<f64>();
    let nu = 0.5 * r.random::<f64>();
    let drift_std = r.random_range(0.0..0.2);
    let noise_std = r.random_range(0.0..0.1);
    let schedule = NoiseSchedule::random(n, rounds, drift_std, noise_std, &mut r);
    let synchronized_start = index % 2 == 0;
    let (y0, lambda0) = if synchronized_start {
        (vec![r.random::<f64>(); n], vec![0.0; n])
    } else {
        (
            (0..n).map(|_| r.random::<f64>()).collect(),
            (0..n).map(|_| r.random_range(-0.1..0.1)).collect(),
        )
    };
    Instance {
        params: InstanceParams {
            index,
            n,
            edges: topology.edges().to_vec(),
            rounds,
            rho,
            nu,
            synchronized_start,
        },
        topology,
        schedule,
        y0,
        lambda0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub params: InstanceParams,
    /// Worst relative residual of the term split over all rounds.
    pub decomposition_max_residual: f64,
    pub identities: Vec<IdentityCheck>,
    /// `‖γ⁰‖∞`; zero here only when `d¹ = 0` and `λ⁰ = 0`.
    pub gamma0_max_abs: f64,
    /// Worst relative residual of the edgewise formula against `L_e Bᵀỹ`
    /// over every round's `ỹ`.
    pub edgewise_max_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub tolerance: f64,
    pub edgewise_tolerance: f64,
    pub fault: InjectedFault,
    pub instances: Vec<InstanceReport>,
    pub worst_decomposition_residual: f64,
    pub worst_identity_residual: f64,
    pub passed: bool,
}

pub fn check_instance(inst: &Instance, fault: InjectedFault) -> InstanceReport {
    let traj = simulate_linear(
        &inst.topology,
        &inst.schedule,
        inst.params.rho,
        inst.params.nu,
        &inst.y0,
        &inst.lambda0,
    )
    .expect("instance dimensions are consistent");
    let terms = update_terms(&traj, &inst.schedule, fault).expect("schedule covers the trajectory");
    let decomposition_max_residual = terms.iter().map(|t| t.residual).fold(0.0, f64::max);
    let chain = verify_chain(&traj, &inst.schedule).expect("schedule covers the trajectory");
    let ops = traj.operators();
    let mut edgewise_max_residual: f64 = 0.0;
    for st in &traj.states {
        let formula = edgewise_indirect(&inst.topology, &st.y_tilde).expect("length n");
        let product = ops.edge_coupling.matvec(&st.d_tilde);
        edgewise_max_residual = edgewise_max_residual.max(relative_residual(&formula, &product));
    }
    let passed = decomposition_max_residual <= IDENTITY_TOL
        && chain.max_residual <= IDENTITY_TOL
        && edgewise_max_residual <= EDGEWISE_TOL;
    InstanceReport {
        params: inst.params.clone(),
        decomposition_max_residual,
        identities: chain.identities,
        gamma0_max_abs: chain.gamma0_max_abs,
        edgewise_max_residual,
        passed,
    }
}

/// Checks `instances` random problems derived from `seed`.
pub fn verify_dynamics(instances: usize, seed: u64, fault: InjectedFault) -> VerificationReport {
    let reports: Vec<InstanceReport> = (0..instances)
        .into_par_iter()
        .map(|i| check_instance(&random_instance(seed, i), fault))
        .collect();
    let worst_decomposition_residual = reports
        .iter()
        .map(|r| r.decomposition_max_residual)
        .fold(0.0, f64::max);
    let worst_identity_residual = reports
        .iter()
        .flat_map(|r| r.identities.iter().map(|c| c.max_residual))
        .fold(0.0, f64::max);
    VerificationReport {
        seed,
        tolerance: IDENTITY_TOL,
        edgewise_tolerance: EDGEWISE_TOL,
        fault,
        passed: !reports.is_empty() && reports.iter().all(|r| r.passed),
        instances: reports,
        worst_decomposition_residual,
        worst_identity_residual,
    }
}
