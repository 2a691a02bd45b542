//! Linear model of how one output channel (one shared sample, one class)
//! evolves across devices, and its reading as PI control.
//!
//! Per round `t ≥ 1`, with `B` the incidence matrix and `L_e = Bᵀ D⁻¹ B`:
//!
//! ```text
//! ỹᵗ     = yᵗ + Δ̄yᵗ + δ₁ᵗ                       (local SGD: drift + noise)
//! λᵗ     = (1 - ν) λᵗ⁻¹ + ½ D⁻¹ B d̃ᵗ            (d̃ᵗ = Bᵀỹᵗ)
//! yᵗ⁺¹   = ỹᵗ - ρ (D⁻¹ L ỹᵗ + λᵗ + δ₂ᵗ)         (distillation)
//! ```
//!
//! The edge update `uᵗ = dᵗ⁺¹ - dᵗ` then splits into SGD drift, two
//! proportional terms (`-νdᵗ`, `-ρ L_e d̃ᵗ`), a momentum term (accumulated
//! drift), an integral term (accumulated `-L_e d̃`), noise, and an initial
//! offset `γ⁰ = ν d¹ - ρ(1-ν) Bᵀλ⁰` that vanishes under a synchronized start.
//!
//! In oracle mode the verifier chooses the drift and noise, so every term is
//! known and the split can be checked exactly. Live runs only expose `y` and
//! `ỹ`; see [`extract_live_channels`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsadmm::RoundTrace;
use crate::graph::{GraphOperators, Topology};
use crate::math;
use crate::nnmodel::{ModelError, ModelState};
use crate::rng::Rng;

/// Relative tolerance for the algebraic identities at 64-bit.
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("update decomposition violated at round {round}: relative residual {residual:e}")]
    Decomposition { round: usize, residual: f64 },
    #[error("trace error: {0}")]
    Trace(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-round drift and noise vectors, indexed from round 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Expected SGD drift `Δ̄yᵗ`.
    pub drift: Vec<Vec<f64>>,
    /// SGD noise `δ₁ᵗ`.
    pub delta1: Vec<Vec<f64>>,
    /// Distillation noise `δ₂ᵗ`.
    pub delta2: Vec<Vec<f64>>,
}

impl NoiseSchedule {
    pub fn zeros(n: usize, rounds: usize) -> Self {
        Self {
            drift: vec![vec![0.0; n]; rounds],
            delta1: vec![vec![0.0; n]; rounds],
            delta2: vec![vec![0.0; n]; rounds],
        }
    }

    /// Gaussian drift and noise with the given standard deviations.
    pub fn random(n: usize, rounds: usize, drift_std: f64, noise_std: f64, rng: &mut Rng) -> Self {
        let mut draw = |std: f64| -> Vec<Vec<f64>> {
            if std == 0.0 {
                return vec![vec![0.0; n]; rounds];
            }
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..rounds)
                .map(|_| (0..n).map(|_| dist.sample(rng)).collect())
                .collect()
        };
        let drift = draw(drift_std);
        let delta1 = draw(noise_std);
        let delta2 = draw(noise_std);
        Self { drift, delta1, delta2 }
    }

    pub fn rounds(&self) -> usize {
        self.drift.len()
    }

    fn check(&self, n: usize) -> Result<(), DynamicsError> {
        for v in self.drift.iter().chain(&self.delta1).chain(&self.delta2) {
            if v.len() != n {
                return Err(DynamicsError::Shape { expected: n, got: v.len() });
            }
        }
        if self.delta1.len() != self.drift.len() || self.delta2.len() != self.drift.len() {
            return Err(DynamicsError::Shape {
                expected: self.drift.len(),
                got: self.delta1.len().min(self.delta2.len()),
            });
        }
        Ok(())
    }
}

/// Network-wide state of one channel at round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsState {
    pub y: Vec<f64>,
    pub y_tilde: Vec<f64>,
    /// `Bᵀ y`
    pub d: Vec<f64>,
    /// `Bᵀ ỹ`
    pub d_tilde: Vec<f64>,
    /// `λᵗ` after this round's update.
    pub lambda: Vec<f64>,
    /// `γᵗ = ũᵗ + ν d̃ᵗ + ρ(1-ν)/2 · L_e d̃ᵗ + ρ(1-ν) Bᵀδ₂ᵗ` with `ũᵗ = dᵗ⁺¹ - d̃ᵗ`.
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rho: f64,
    pub nu: f64,
    pub lambda0: Vec<f64>,
    /// `states[t - 1]` is round `t`.
    pub states: Vec<DynamicsState>,
    pub y_final: Vec<f64>,
    pub d_final: Vec<f64>,
    ops: GraphOperators,
}

impl Trajectory {
    pub fn rounds(&self) -> usize {
        self.states.len()
    }

    pub fn operators(&self) -> &GraphOperators {
        &self.ops
    }

    /// `dᵗ` for `t = 1..=T+1`.
    pub fn d(&self, t: usize) -> &[f64] {
        if t == self.states.len() + 1 {
            &self.d_final
        } else {
            &self.states[t - 1].d
        }
    }

    /// `γ⁰ = ν d¹ - ρ(1-ν) Bᵀλ⁰`.
    pub fn gamma0(&self) -> Vec<f64> {
        let b_lambda = self.ops.edge_differences(&self.lambda0);
        self.states[0]
            .d
            .iter()
            .zip(&b_lambda)
            .map(|(d, bl)| self.nu * d - self.rho * (1.0 - self.nu) * bl)
            .collect()
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn scaled(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

/// Relative discrepancy `‖a - b‖∞ / (1 + max(‖a‖∞, ‖b‖∞))`.
pub fn relative_residual(a: &[f64], b: &[f64]) -> f64 {
    let diff = math::max_abs(&sub(a, b));
    diff / (1.0 + math::max_abs(a).max(math::max_abs(b)))
}

/// Runs the exact recurrences for `schedule.rounds()` rounds from `y¹ = y0`.
pub fn simulate_linear(
    topology: &Topology,
    schedule: &NoiseSchedule,
    rho: f64,
    nu: f64,
    y0: &[f64],
    lambda0: &[f64],
) -> Result<Trajectory, DynamicsError> {
    let ops = topology.operators();
    let n = ops.num_devices();
    for v in [y0, lambda0] {
        if v.len() != n {
            return Err(DynamicsError::Shape { expected: n, got: v.len() });
        }
    }
    schedule.check(n)?;
    let half_dinv_b = ops.degree_inv.matmul(&ops.incidence).scale(0.5);
    let dinv_l = ops.degree_inv.matmul(&ops.laplacian);

    let mut y = y0.to_vec();
    let mut lambda = lambda0.to_vec();
    let mut states: Vec<DynamicsState> = Vec::with_capacity(schedule.rounds());
    for t in 0..schedule.rounds() {
        let y_tilde = add(&add(&y, &schedule.drift[t]), &schedule.delta1[t]);
        let d = ops.edge_differences(&y);
        let d_tilde = ops.edge_differences(&y_tilde);
        let pull = half_dinv_b.matvec(&d_tilde);
        lambda = add(&scaled(1.0 - nu, &lambda), &pull);
        let consensus = dinv_l.matvec(&y_tilde);
        let y_next: Vec<f64> = (0..n)
            .map(|i| y_tilde[i] - rho * (consensus[i] + lambda[i] + schedule.delta2[t][i]))
            .collect();
        states.push(DynamicsState {
            y,
            y_tilde,
            d,
            d_tilde,
            lambda: lambda.clone(),
            gamma: Vec::new(),
        });
        y = y_next;
    }
    let d_final = ops.edge_differences(&y);
    let mut traj = Trajectory {
        rho,
        nu,
        lambda0: lambda0.to_vec(),
        states,
        y_final: y,
        d_final,
        ops,
    };
    for t in 1..=traj.rounds() {
        let gamma = gamma_by_definition(&traj, schedule, t);
        traj.states[t - 1].gamma = gamma;
    }
    Ok(traj)
}

fn gamma_by_definition(traj: &Trajectory, schedule: &NoiseSchedule, t: usize) -> Vec<f64> {
    let (rho, nu) = (traj.rho, traj.nu);
    let st = &traj.states[t - 1];
    let u_tilde = sub(traj.d(t + 1), &st.d_tilde);
    let le_dt = traj.ops.edge_coupling.matvec(&st.d_tilde);
    let b_delta2 = traj.ops.edge_differences(&schedule.delta2[t - 1]);
    let mut gamma = u_tilde;
    axpy(&mut gamma, nu, &st.d_tilde);
    axpy(&mut gamma, rho * (1.0 - nu) / 2.0, &le_dt);
    axpy(&mut gamma, rho * (1.0 - nu), &b_delta2);
    gamma
}

/// The split of `uᵗ` for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTerms {
    pub round: usize,
    /// `uᵗ = dᵗ⁺¹ - dᵗ` from the trajectory.
    pub update: Vec<f64>,
    /// `BᵀΔ̄yᵗ`
    pub sgd: Vec<f64>,
    /// `ν(0 - dᵗ)`
    pub proportional_direct: Vec<f64>,
    /// `ρ(0 - L_e d̃ᵗ)`
    pub proportional_indirect: Vec<f64>,
    /// `ν Σ_{τ<t} BᵀΔ̄y^τ`
    pub momentum: Vec<f64>,
    /// `ρ(1+ν)/2 · Σ_{τ<t} (0 - L_e d̃^τ)`
    pub integral: Vec<f64>,
    /// `Bᵀ(δ₁ᵗ - ρδ₂ᵗ + ν Σ_{τ<t}(δ₁^τ - ρδ₂^τ))`
    pub noise: Vec<f64>,
    /// `γ⁰`, zero under a synchronized start.
    pub initial: Vec<f64>,
    pub residual: f64,
}

impl UpdateTerms {
    pub fn sum(&self) -> Vec<f64> {
        let mut s = self.sgd.clone();
        for part in [
            &self.proportional_direct,
            &self.proportional_indirect,
            &self.momentum,
            &self.integral,
            &self.noise,
            &self.initial,
        ] {
            axpy(&mut s, 1.0, part);
        }
        s
    }
}

/// A deliberately wrong decomposition, for negative-control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectedFault {
    #[default]
    None,
    /// Flip the sign of the integral term.
    IntegralSign,
}

/// Computes every term of the split for every round and checks that the
/// terms add up to `uᵗ` within [`IDENTITY_TOL`] (relative).
pub fn decompose_update(traj: &Trajectory, schedule: &NoiseSchedule) -> Result<Vec<UpdateTerms>, DynamicsError> {
    decompose_update_with(traj, schedule, InjectedFault::None)
}

pub fn decompose_update_with(
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    fault: InjectedFault,
) -> Result<Vec<UpdateTerms>, DynamicsError> {
    let terms = update_terms(traj, schedule, fault)?;
    for t in &terms {
        // negated so a NaN residual fails
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(t.residual <= IDENTITY_TOL) {
            return Err(DynamicsError::Decomposition {
                round: t.round,
                residual: t.residual,
            });
        }
    }
    Ok(terms)
}

/// The split without the tolerance check.
pub fn update_terms(
    traj: &Trajectory,
    schedule: &NoiseSchedule,
    fault: InjectedFault,
) -> Result<Vec<UpdateTerms>, DynamicsError> {
    let ops = &traj.ops;
    let m = ops.num_directed_edges();
    schedule.check(ops.num_devices())?;
    if schedule.rounds() < traj.rounds() {
        return Err(DynamicsError::Shape {
            expected: traj.rounds(),
            got: schedule.rounds(),
        });
    }
    let (rho, nu) = (traj.rho, traj.nu);
    let initial = traj.gamma0();
    let integral_sign = match fault {
        InjectedFault::None => 1.0,
        InjectedFault::IntegralSign => -1.0,
    };
    // running sums over τ < t
    let mut drift_acc = vec![0.0; m];
    let mut coupling_acc = vec![0.0; m];
    let mut noise_acc = vec![0.0; m];
    let mut out = Vec::with_capacity(traj.rounds());
    for t in 1..=traj.rounds() {
        let st = &traj.states[t - 1];
        let update = sub(traj.d(t + 1), &st.d);
        let sgd = ops.edge_differences(&schedule.drift[t - 1]);
        let le_dt = ops.edge_coupling.matvec(&st.d_tilde);
        let b_d1 = ops.edge_differences(&schedule.delta1[t - 1]);
        let b_d2 = ops.edge_differences(&schedule.delta2[t - 1]);
        let current_noise: Vec<f64> = b_d1.iter().zip(&b_d2).map(|(a, b)| a - rho * b).collect();

        let proportional_direct = scaled(-nu, &st.d);
        let proportional_indirect = scaled(-rho, &le_dt);
        let momentum = scaled(nu, &drift_acc);
        let integral = scaled(-integral_sign * rho * (1.0 + nu) / 2.0, &coupling_acc);
        let mut noise = current_noise.clone();
        axpy(&mut noise, nu, &noise_acc);

        let mut terms = UpdateTerms {
            round: t,
            update,
            sgd,
            proportional_direct,
            proportional_indirect,
            momentum,
            integral,
            noise,
            initial: initial.clone(),
            residual: 0.0,
        };
        terms.residual = relative_residual(&terms.sum(), &terms.update);

        axpy(&mut drift_acc, 1.0, &terms.sgd);
        axpy(&mut coupling_acc, 1.0, &le_dt);
        axpy(&mut noise_acc, 1.0, &current_noise);
        out.push(terms);
    }
    Ok(out)
}

/// Max relative residual of one intermediate identity over all rounds where
/// it applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_residual: f64,
    pub rounds_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub identities: Vec<IdentityCheck>,
    /// `‖γ⁰‖∞`.
    pub gamma0_max_abs: f64,
    /// Whether `y¹` is constant across devices and `λ⁰ = 0`.
    pub synchronized_start: bool,
    pub max_residual: f64,
}

impl ChainReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_residual <= tol
    }
}

/// Numerically checks each step of the derivation of the update split:
///
/// - `update_gap_definition`: `ũᵗ = -ρ(½ L_e d̃ᵗ + Bᵀλᵗ + Bᵀδ₂ᵗ)`
/// - `update_gap_substituted`: `ũᵗ = -ρ L_e d̃ᵗ - ρ(1-ν)Bᵀλᵗ⁻¹ - ρBᵀδ₂ᵗ`
/// - `multiplier_backsubstitution` (t ≥ 2): `-ρBᵀλᵗ⁻¹ = ũᵗ⁻¹ + ρ/2 L_e d̃ᵗ⁻¹ + ρBᵀδ₂ᵗ⁻¹`
/// - `update_gap_recursive` (t ≥ 2): `ũᵗ = (1-ν)ũᵗ⁻¹ + ρL_e(-d̃ᵗ + (1-ν)/2 d̃ᵗ⁻¹) + ρBᵀ(-δ₂ᵗ + (1-ν)δ₂ᵗ⁻¹)`
/// - `update_gap_gamma_form`: `ũᵗ = -νdᵗ - ρL_e d̃ᵗ - ρBᵀδ₂ᵗ + γᵗ⁻¹`
/// - `gamma_increment`: `γᵗ - γᵗ⁻¹ = νBᵀΔyᵗ - ρ(1+ν)/2 L_e d̃ᵗ - ρνBᵀδ₂ᵗ`
/// - `gamma_telescoped`: `γᵗ⁻¹ = γ⁰ + νΣBᵀΔy^τ - ρ(1+ν)/2 ΣL_e d̃^τ - ρνBᵀΣδ₂^τ`
/// - `update_assembly`: `uᵗ = ũᵗ + d̃ᵗ - dᵗ`
///
/// `γ⁰` is the closed form `ν d¹ - ρ(1-ν)Bᵀλ⁰`; `γᵗ` for `t ≥ 1` comes from
/// its definition in terms of the trajectory.
pub fn verify_chain(traj: &Trajectory, schedule: &NoiseSchedule) -> Result<ChainReport, DynamicsError> {
    schedule.check(traj.ops.num_devices())?;
    let ops = &traj.ops;
    let (rho, nu) = (traj.rho, traj.nu);
    let m = ops.num_directed_edges();
    let gamma0 = traj.gamma0();
    let names = [
        "update_gap_definition",
        "update_gap_substituted",
        "multiplier_backsubstitution",
        "update_gap_recursive",
        "update_gap_gamma_form",
        "gamma_increment",
        "gamma_telescoped",
        "update_assembly",
    ];
    let mut worst = [0.0f64; 8];
    let mut counts = [0usize; 8];
    let mut note = |k: usize, lhs: &[f64], rhs: &[f64]| {
        worst[k] = worst[k].max(relative_residual(lhs, rhs));
        counts[k] += 1;
    };

    let gamma_at = |t: usize| -> &[f64] {
        if t == 0 {
            &gamma0
        } else {
            &traj.states[t - 1].gamma
        }
    };
    let mut drift_acc = vec![0.0; m];
    let mut coupling_acc = vec![0.0; m];
    let mut delta2_acc = vec![0.0; m];
    let mut prev: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None; // (ũ, L_e d̃, Bᵀδ₂) of t-1
    for t in 1..=traj.rounds() {
        let st = &traj.states[t - 1];
        let lambda_prev: &[f64] = if t == 1 { &traj.lambda0 } else { &traj.states[t - 2].lambda };
        let u_tilde = sub(traj.d(t + 1), &st.d_tilde);
        let le_dt = ops.edge_coupling.matvec(&st.d_tilde);
        let b_lambda = ops.edge_differences(&st.lambda);
        let b_lambda_prev = ops.edge_differences(lambda_prev);
        let b_d2 = ops.edge_differences(&schedule.delta2[t - 1]);
        let delta_y = add(&schedule.drift[t - 1], &schedule.delta1[t - 1]);
        let b_dy = ops.edge_differences(&delta_y);

        // ũᵗ from its defining form
        let mut rhs = scaled(-rho / 2.0, &le_dt);
        axpy(&mut rhs, -rho, &b_lambda);
        axpy(&mut rhs, -rho, &b_d2);
        note(0, &u_tilde, &rhs);

        let mut rhs = scaled(-rho, &le_dt);
        axpy(&mut rhs, -rho * (1.0 - nu), &b_lambda_prev);
        axpy(&mut rhs, -rho, &b_d2);
        note(1, &u_tilde, &rhs);

        if let Some((u_prev, le_prev, b_d2_prev)) = &prev {
            let lhs = scaled(-rho, &b_lambda_prev);
            let mut rhs = u_prev.clone();
            axpy(&mut rhs, rho / 2.0, le_prev);
            axpy(&mut rhs, rho, b_d2_prev);
            note(2, &lhs, &rhs);

            let mut rhs = scaled(1.0 - nu, u_prev);
            axpy(&mut rhs, -rho, &le_dt);
            axpy(&mut rhs, rho * (1.0 - nu) / 2.0, le_prev);
            axpy(&mut rhs, -rho, &b_d2);
            axpy(&mut rhs, rho * (1.0 - nu), b_d2_prev);
            note(3, &u_tilde, &rhs);
        }

        let mut rhs = scaled(-nu, &st.d);
        axpy(&mut rhs, -rho, &le_dt);
        axpy(&mut rhs, -rho, &b_d2);
        axpy(&mut rhs, 1.0, gamma_at(t - 1));
        note(4, &u_tilde, &rhs);

        let lhs = sub(gamma_at(t), gamma_at(t - 1));
        let mut rhs = scaled(nu, &b_dy);
        axpy(&mut rhs, -rho * (1.0 + nu) / 2.0, &le_dt);
        axpy(&mut rhs, -rho * nu, &b_d2);
        note(5, &lhs, &rhs);

        let mut rhs = gamma0.clone();
        axpy(&mut rhs, nu, &drift_acc);
        axpy(&mut rhs, -rho * (1.0 + nu) / 2.0, &coupling_acc);
        axpy(&mut rhs, -rho * nu, &delta2_acc);
        note(6, gamma_at(t - 1), &rhs);

        let update = sub(traj.d(t + 1), &st.d);
        let assembled = add(&u_tilde, &sub(&st.d_tilde, &st.d));
        note(7, &update, &assembled);

        axpy(&mut drift_acc, 1.0, &b_dy);
        axpy(&mut coupling_acc, 1.0, &le_dt);
        axpy(&mut delta2_acc, 1.0, &b_d2);
        prev = Some((u_tilde, le_dt, b_d2));
    }

    let identities: Vec<IdentityCheck> = names
        .iter()
        .zip(worst.iter().zip(&counts))
        .map(|(name, (&max_residual, &rounds_checked))| IdentityCheck {
            name: String::from(*name),
            max_residual,
            rounds_checked,
        })
        .collect();
    let y1 = &traj.states[0].y;
    let synchronized_start = y1.iter().all(|&v| v == y1[0]) && traj.lambda0.iter().all(|&v| v == 0.0);
    Ok(ChainReport {
        max_residual: worst.iter().copied().fold(0.0, f64::max),
        identities,
        gamma0_max_abs: math::max_abs(&gamma0),
        synchronized_start,
    })
}

/// Per directed edge `(s, e)`:
/// `2[(ỹ_s - mean_{N_s} ỹ) - (ỹ_e - mean_{N_e} ỹ)]`, computed with loops.
/// Equals `L_e Bᵀ ỹ`.
pub fn edgewise_indirect(topology: &Topology, y_tilde: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    let n = topology.num_devices();
    if y_tilde.len() != n {
        return Err(DynamicsError::Shape { expected: n, got: y_tilde.len() });
    }
    let deviation: Vec<f64> = (0..n)
        .map(|i| y_tilde[i] - topology.neighbor_mean(i, y_tilde))
        .collect();
    Ok(topology
        .directed_edges()
        .iter()
        .map(|&(s, e)| 2.0 * (deviation[s] - deviation[e]))
        .collect())
}

/// First-order loss-change probe for one SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossProbe {
    pub measured: f64,
    pub predicted: f64,
    /// `-η‖∂l/∂w|_x‖²` (zero when the probe is not in the local data).
    pub self_term: f64,
    /// `-η Σ_{x'} ∂l/∂w|_x · ∂l/∂w|_{x'}` over the other local samples.
    pub cross_term: f64,
    pub relative_error: f64,
}

impl LossProbe {
    pub fn abs_residual(&self) -> f64 {
        math::abs(self.measured - self.predicted)
    }
}

/// Takes one full-batch gradient step `w' = w - η ∇ Σ_{local} l` and compares
/// the measured change of `l(f(x; w), label)` at the probe with the
/// first-order prediction from per-sample gradient inner products.
/// `probe_index` marks the probe as a member of `local`.
pub fn probe_loss_update(
    model: &ModelState,
    local: &[(&[f64], usize)],
    probe: (&[f64], usize),
    probe_index: Option<usize>,
    eta: f64,
) -> Result<LossProbe, DynamicsError> {
    if local.is_empty() {
        return Err(DynamicsError::Trace("empty local data"));
    }
    let np = model.num_params();
    let mut ws = model.workspace();
    let mut probe_grad = vec![0.0; np];
    model.accumulate_ce_grad(probe.0, probe.1, &mut ws, &mut probe_grad)?;
    let mut total = vec![0.0; np];
    let mut self_term = 0.0;
    let mut cross_term = 0.0;
    let mut g = vec![0.0; np];
    for (k, &(x, label)) in local.iter().enumerate() {
        g.iter_mut().for_each(|v| *v = 0.0);
        model.accumulate_ce_grad(x, label, &mut ws, &mut g)?;
        let inner = -eta * math::dot(&probe_grad, &g);
        if Some(k) == probe_index {
            self_term += inner;
        } else {
            cross_term += inner;
        }
        axpy(&mut total, 1.0, &g);
    }
    let before = -model.log_prob(probe.0, probe.1, &mut ws)?;
    let mut stepped = model.clone();
    stepped.apply_step(&total, eta);
    let after = -stepped.log_prob(probe.0, probe.1, &mut ws)?;
    let measured = after - before;
    let predicted = self_term + cross_term;
    Ok(LossProbe {
        measured,
        predicted,
        self_term,
        cross_term,
        relative_error: math::abs(measured - predicted) / math::abs(predicted),
    })
}

/// One channel reconstructed from a live run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveChannelState {
    pub round: usize,
    pub y: Vec<f64>,
    pub y_tilde: Vec<f64>,
    pub d: Vec<f64>,
    pub d_tilde: Vec<f64>,
    /// Stored multiplier values replayed from the outputs (`λ⁰ = 0`).
    pub lambda: Vec<f64>,
    /// `ν(0 - dᵗ)`
    pub proportional_direct: Vec<f64>,
    /// `ρ(0 - L_e d̃ᵗ)`
    pub proportional_indirect: Vec<f64>,
}

/// Pulls the `(sample, class)` channel out of round traces that recorded both
/// start-of-round and post-local outputs. No decomposition is asserted here:
/// drift and noise are not observable in a live run.
pub fn extract_live_channels(
    traces: &[RoundTrace],
    topology: &Topology,
    rho: f64,
    nu: f64,
    sample: usize,
    class: usize,
) -> Result<Vec<LiveChannelState>, DynamicsError> {
    let first = traces.first().ok_or(DynamicsError::Trace("no rounds recorded"))?;
    if first.round != 0 {
        return Err(DynamicsError::Trace("traces must start at round 0 to replay the multiplier"));
    }
    let ops = topology.operators();
    let n = topology.num_devices();
    let dinv_l = ops.degree_inv.matmul(&ops.laplacian);
    let mut lambda = vec![0.0; n];
    let mut out = Vec::with_capacity(traces.len());
    for (expected, trace) in traces.iter().enumerate() {
        if trace.round != expected {
            return Err(DynamicsError::Trace("rounds must be consecutive"));
        }
        let model_outputs = trace
            .model_outputs
            .as_ref()
            .ok_or(DynamicsError::Trace("start-of-round outputs were not recorded"))?;
        if trace.local_outputs.len() != n || model_outputs.len() != n {
            return Err(DynamicsError::Trace("outputs missing for some device"));
        }
        let (rows, cols) = trace.local_outputs[0].shape();
        if sample >= rows {
            return Err(DynamicsError::Trace("shared-sample index out of range"));
        }
        if class >= cols {
            return Err(DynamicsError::Trace("class index out of range"));
        }
        let y: Vec<f64> = model_outputs.iter().map(|m| m[(sample, class)]).collect();
        let y_tilde: Vec<f64> = trace.local_outputs.iter().map(|m| m[(sample, class)]).collect();
        let d = ops.edge_differences(&y);
        let d_tilde = ops.edge_differences(&y_tilde);
        lambda = add(&scaled(1.0 - nu, &lambda), &dinv_l.matvec(&y_tilde));
        let le_dt = ops.edge_coupling.matvec(&d_tilde);
        out.push(LiveChannelState {
            round: trace.round,
            proportional_direct: scaled(-nu, &d),
            proportional_indirect: scaled(-rho, &le_dt),
            y,
            y_tilde,
            d,
            d_tilde,
            lambda: lambda.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn fixed_point_from_constant_start() {
        let t = Topology::ring(5).unwrap();
        let sched = NoiseSchedule::zeros(5, 10);
        let traj = simulate_linear(&t, &sched, 0.3, 0.01, &[0.4; 5], &[0.0; 5]).unwrap();
        for st in &traj.states {
            assert_eq!(st.y, vec![0.4; 5]);
        }
        let terms = decompose_update(&traj, &sched).unwrap();
        for term in terms {
            assert!(term.sum().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn first_multiplier_is_half_dinv_b_dtilde() {
        let t = Topology::star(4).unwrap();
        let mut sched = NoiseSchedule::zeros(4, 1);
        sched.drift[0] = vec![0.1, -0.2, 0.3, 0.0];
        let traj = simulate_linear(&t, &sched, 0.5, 0.0, &[0.0; 4], &[0.0; 4]).unwrap();
        let ops = t.operators();
        let expect = ops
            .degree_inv
            .matmul(&ops.incidence)
            .scale(0.5)
            .matvec(&traj.states[0].d_tilde);
        assert_eq!(traj.states[0].lambda, expect);
    }

    #[test]
    fn zero_nu_drops_momentum_and_direct_proportional() {
        let t = Topology::random_connected(6, 8, 3).unwrap();
        let mut rng = stream(1, Stream::Probe, &[]);
        let sched = NoiseSchedule::random(6, 12, 0.1, 0.05, &mut rng);
        let traj = simulate_linear(&t, &sched, 0.4, 0.0, &[0.2; 6], &[0.0; 6]).unwrap();
        for term in decompose_update(&traj, &sched).unwrap() {
            assert!(term.momentum.iter().all(|&v| v == 0.0));
            assert!(term.proportional_direct.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let t = Topology::ring(3).unwrap();
        let sched = NoiseSchedule::zeros(3, 2);
        assert!(matches!(
            simulate_linear(&t, &sched, 0.1, 0.0, &[0.0; 2], &[0.0; 3]),
            Err(DynamicsError::Shape { .. })
        ));
        let bad = NoiseSchedule::zeros(4, 2);
        assert!(simulate_linear(&t, &bad, 0.1, 0.0, &[0.0; 3], &[0.0; 3]).is_err());
        assert!(edgewise_indirect(&t, &[0.0; 4]).is_err());
    }
}
