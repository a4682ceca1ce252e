//! Safety gating of parameter updates: a proposed parameter vector is applied
//! to the controller only if it keeps the closed loop asymptotically stable
//! and does not increase the Lyapunov value at the state where the swap would
//! happen. Rejections never touch the belief covariance, they only veto the
//! controller-facing parameters.
//!
//! For linear closed loops (state feedback, Riccati gain, PID, dynamic output
//! feedback on the double integrator) the check is exact: the autonomous
//! closed-loop matrix is assembled, a quadratic Lyapunov function is solved
//! from `A^T M A - M = -I`, and condition checks run on it. Architectures
//! without a linear closed loop fall back to a documented rollout surrogate.

use crate::controllers::{
    double_integrator_matrices, lqr_gain, Architecture, ControlError, Controller, GainCache,
};
use crate::numerics::{cholesky_lower, discrete_lyapunov, weighted_sq_norm};
use crate::plants::{step, PlantModel};
use nalgebra::{DMatrix, DVector};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum SafetyError {
    /// Architecture has no linear closed-loop form.
    NotSupported,
    /// Parameters are infeasible for the architecture.
    InfeasibleParameters,
    /// The closed loop is not asymptotically stable.
    Unstable,
    DimensionMismatch,
}

impl fmt::Display for SafetyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SafetyError::NotSupported => write!(f, "no linear closed-loop form"),
            SafetyError::InfeasibleParameters => write!(f, "infeasible parameters"),
            SafetyError::Unstable => write!(f, "closed loop is unstable"),
            SafetyError::DimensionMismatch => write!(f, "dimension mismatch"),
        }
    }
}

impl std::error::Error for SafetyError {}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetySettings {
    pub enabled: bool,
    /// Accepted eigenvalue interval for the Lyapunov matrix; operationalizes
    /// the uniform class-K envelope over all accepted parameters.
    pub eigen_interval: (f64, f64),
    /// Horizon of the rollout fallback for nonlinear architectures.
    pub rollout_horizon: usize,
    /// Required norm contraction over the rollout horizon.
    pub contraction: f64,
}

impl Default for SafetySettings {
    fn default() -> Self {
        SafetySettings {
            enabled: true,
            eigen_interval: (1e-3, 1e3),
            rollout_horizon: 200,
            contraction: 0.5,
        }
    }
}

/// `V(x) = x^T M x` with symmetric positive-definite `M`.
#[derive(Debug, Clone)]
pub struct QuadraticLyapunov {
    pub m: DMatrix<f64>,
}

impl QuadraticLyapunov {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        weighted_sq_norm(x, &self.m).expect("dimension checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictReason {
    Ok,
    LyapunovIncrease,
    UnstableClosedLoop,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SafetyVerdict {
    pub accepted: bool,
    pub reason: VerdictReason,
}

impl SafetyVerdict {
    fn accept() -> Self {
        SafetyVerdict {
            accepted: true,
            reason: VerdictReason::Ok,
        }
    }

    fn reject(reason: VerdictReason) -> Self {
        debug_assert!(reason != VerdictReason::Ok);
        SafetyVerdict {
            accepted: false,
            reason,
        }
    }
}

/// Autonomous closed-loop matrix of a linear architecture on the double
/// integrator, in error coordinates. Output feedback augments the plant with
/// the observer estimate; PID augments it with the controller memory.
pub fn closed_loop_matrix(
    controller: &Controller,
    theta: &DVector<f64>,
    plant: &PlantModel,
    cache: &mut GainCache,
) -> Result<DMatrix<f64>, SafetyError> {
    let ts = plant.sample_period();
    if theta.len() != controller.n_params() {
        return Err(SafetyError::DimensionMismatch);
    }
    match controller.architecture() {
        Architecture::StateFeedback => {
            let (a, b) = double_integrator_matrices(ts);
            let gain = DMatrix::from_row_slice(1, 2, &[theta[0], theta[1]]);
            Ok(&a + &b * gain)
        }
        Architecture::Optimal => {
            let gain = lqr_gain(ts, theta, cache).map_err(|e| match e {
                ControlError::InfeasibleParameters => SafetyError::InfeasibleParameters,
                _ => SafetyError::DimensionMismatch,
            })?;
            let (a, b) = double_integrator_matrices(ts);
            Ok(&a + &b * gain)
        }
        Architecture::OutputFeedback => {
            let (t1, t2, t3, t4) = (theta[0], theta[1], theta[2], theta[3]);
            // State (e, v, e_hat, v_hat) with e_hat = p_hat - p_ref.
            Ok(DMatrix::from_row_slice(
                4,
                4,
                &[
                    1.0, ts, 0.0, 0.0,
                    0.0, 1.0, ts * t1, ts * t2,
                    -t3, 0.0, 1.0 + t3, ts,
                    -t4, 0.0, t4 + ts * t1, 1.0 + ts * t2,
                ],
            ))
        }
        Architecture::Pid => {
            let (kp, ki, kd) = (theta[0], theta[1], theta[2]);
            let (ca, cb, cc) = (kp + ki + kd, ki - kp - 2.0 * kd, kd);
            // State (e, v, u_prev, e_prev, e_prev2).
            Ok(DMatrix::from_row_slice(
                5,
                5,
                &[
                    1.0, ts, 0.0, 0.0, 0.0,
                    ts * ca, 1.0, ts, ts * cb, ts * cc,
                    ca, 0.0, 1.0, cb, cc,
                    1.0, 0.0, 0.0, 0.0, 0.0,
                    0.0, 0.0, 0.0, 1.0, 0.0,
                ],
            ))
        }
        _ => Err(SafetyError::NotSupported),
    }
}

/// Quadratic Lyapunov function for a Schur-stable closed loop, from the
/// discrete Lyapunov equation `A^T M A - M = -I`.
pub fn lyapunov_for(a_cl: &DMatrix<f64>) -> Result<QuadraticLyapunov, SafetyError> {
    let n = a_cl.nrows();
    let m = discrete_lyapunov(a_cl, &DMatrix::identity(n, n))
        .map_err(|_| SafetyError::Unstable)?;
    Ok(QuadraticLyapunov { m })
}

fn eigen_interval_ok(m: &DMatrix<f64>, interval: (f64, f64)) -> bool {
    let n = m.nrows();
    let identity = DMatrix::identity(n, n);
    // lambda_min(M) > lo  <=>  M - lo I is PD; lambda_max(M) < hi likewise.
    let above = cholesky_lower(&(m - &identity * interval.0)).is_ok();
    let below = cholesky_lower(&(&identity * interval.1 - m)).is_ok();
    above && below
}

/// Everything the gate needs to evaluate a proposal at the state where the
/// new parameters would take effect.
pub struct SafetyContext<'a> {
    pub controller: &'a Controller,
    pub plant: &'a PlantModel,
    pub settings: &'a SafetySettings,
    /// Observation at the swap point.
    pub obs: DVector<f64>,
    /// Controller internal state at the swap point.
    pub controller_state: DVector<f64>,
    /// Reference active at the swap point.
    pub reference: DVector<f64>,
}

impl SafetyContext<'_> {
    /// Error-coordinate vector matching the closed-loop matrix of the
    /// architecture (plant error plus any controller augmentation).
    fn augmented_state(&self) -> DVector<f64> {
        let e = self.obs[0] - self.reference[0];
        let v = self.obs[1];
        match self.controller.architecture() {
            Architecture::OutputFeedback => DVector::from_vec(vec![
                e,
                v,
                self.controller_state[0] - self.reference[0],
                self.controller_state[1],
            ]),
            Architecture::Pid => DVector::from_vec(vec![
                e,
                v,
                self.controller_state[0],
                self.controller_state[1],
                self.controller_state[2],
            ]),
            _ => DVector::from_vec(vec![e, v]),
        }
    }

    /// Plant error vector used by the rollout surrogate `V(x) = ||x||^2`.
    fn plant_error(&self, obs: &DVector<f64>) -> DVector<f64> {
        match self.controller.architecture() {
            Architecture::LaneStateFeedback | Architecture::LaneOptimal => DVector::from_vec(vec![
                obs[1] - self.reference[0],
                obs[2],
                obs[3] - self.reference[1],
                obs[4],
            ]),
            Architecture::BicycleOptimal => DVector::from_vec(vec![
                obs[1] - self.reference[1],
                obs[2] - self.reference[2],
                obs[3] - self.reference[3],
                obs[4] - self.reference[4],
            ]),
            _ => DVector::from_vec(vec![obs[0] - self.reference[0], obs[1]]),
        }
    }
}

/// Rollout surrogate for architectures without a linear closed-loop form:
/// simulate the noise-free nominal loop under the candidate parameters and
/// require a one-step decrease of the squared error norm plus an overall
/// contraction across the horizon.
fn rollout_check(
    theta: &DVector<f64>,
    ctx: &SafetyContext<'_>,
    cache: &mut GainCache,
) -> SafetyVerdict {
    let mut x = ctx.obs.clone();
    let mut z = ctx.controller_state.clone();
    let start_err = ctx.plant_error(&x).norm();
    let zero_w = DVector::zeros(ctx.plant.state_dim());
    let mut first_step_err = None;
    for _ in 0..ctx.settings.rollout_horizon {
        let (u, z_next) = match ctx
            .controller
            .control(cache, &x, &z, &ctx.reference, theta)
        {
            Ok(pair) => pair,
            Err(_) => return SafetyVerdict::reject(VerdictReason::Infeasible),
        };
        x = match step(ctx.plant, &x, &u, &zero_w) {
            Ok(next) => next,
            Err(_) => return SafetyVerdict::reject(VerdictReason::UnstableClosedLoop),
        };
        z = z_next;
        if first_step_err.is_none() {
            first_step_err = Some(ctx.plant_error(&x).norm());
        }
    }
    let end_err = ctx.plant_error(&x).norm();
    if start_err <= 1e-9 {
        // Already at the target: accept as long as the loop stays there.
        return if end_err <= 1e-6 {
            SafetyVerdict::accept()
        } else {
            SafetyVerdict::reject(VerdictReason::UnstableClosedLoop)
        };
    }
    let one_step_ok = first_step_err.map_or(false, |e| e <= start_err);
    let contraction_ok = end_err <= ctx.settings.contraction * start_err;
    if one_step_ok && contraction_ok {
        SafetyVerdict::accept()
    } else if contraction_ok {
        SafetyVerdict::reject(VerdictReason::LyapunovIncrease)
    } else {
        SafetyVerdict::reject(VerdictReason::UnstableClosedLoop)
    }
}

/// The update gate: a proposal is accepted only if its closed loop is
/// asymptotically stable (with a Lyapunov matrix inside the configured
/// eigenvalue envelope) and the Lyapunov value at the swap state does not
/// increase. Identical parameters are trivially accepted.
pub fn safety_gate(
    theta_old: &DVector<f64>,
    theta_new: &DVector<f64>,
    ctx: &SafetyContext<'_>,
    cache: &mut GainCache,
) -> SafetyVerdict {
    if theta_old == theta_new {
        return SafetyVerdict::accept();
    }
    let a_new = match closed_loop_matrix(ctx.controller, theta_new, ctx.plant, cache) {
        Ok(a) => a,
        Err(SafetyError::NotSupported) => return rollout_check(theta_new, ctx, cache),
        Err(SafetyError::InfeasibleParameters) => {
            return SafetyVerdict::reject(VerdictReason::Infeasible)
        }
        Err(_) => return SafetyVerdict::reject(VerdictReason::Infeasible),
    };
    let lyap_new = match lyapunov_for(&a_new) {
        Ok(l) => l,
        Err(_) => return SafetyVerdict::reject(VerdictReason::UnstableClosedLoop),
    };
    if !eigen_interval_ok(&lyap_new.m, ctx.settings.eigen_interval) {
        return SafetyVerdict::reject(VerdictReason::Infeasible);
    }
    let x = ctx.augmented_state();
    let v_new = lyap_new.value(&x);
    let v_old = closed_loop_matrix(ctx.controller, theta_old, ctx.plant, cache)
        .ok()
        .and_then(|a_old| lyapunov_for(&a_old).ok())
        .map(|l| l.value(&x));
    match v_old {
        // No Lyapunov function for the old parameters: any certified new one
        // is an improvement.
        None => SafetyVerdict::accept(),
        Some(v_old) if v_new <= v_old => SafetyVerdict::accept(),
        Some(_) => SafetyVerdict::reject(VerdictReason::LyapunovIncrease),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::spectral_radius;

    fn di_plant() -> PlantModel {
        PlantModel::double_integrator(0.1)
    }

    fn ctx_as<'a>(
        controller: &'a Controller,
        plant: &'a PlantModel,
        settings: &'a SafetySettings,
        obs: Vec<f64>,
        z: Vec<f64>,
        p_ref: f64,
    ) -> SafetyContext<'a> {
        SafetyContext {
            controller,
            plant,
            settings,
            obs: DVector::from_vec(obs),
            controller_state: DVector::from_vec(z),
            reference: DVector::from_vec(vec![p_ref]),
        }
    }

    #[test]
    fn open_loop_is_not_asymptotically_stable() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::StateFeedback, &plant).unwrap();
        let mut cache = GainCache::new();
        let a = closed_loop_matrix(&controller, &DVector::zeros(2), &plant, &mut cache).unwrap();
        let (a_ol, _) = double_integrator_matrices(0.1);
        assert_eq!(a, a_ol);
        assert!(lyapunov_for(&a).is_err());
    }

    #[test]
    fn stabilizing_gain_has_subunit_spectral_radius() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::StateFeedback, &plant).unwrap();
        let mut cache = GainCache::new();
        let theta = DVector::from_vec(vec![-2.0, -3.0]);
        let a = closed_loop_matrix(&controller, &theta, &plant, &mut cache).unwrap();
        assert!(spectral_radius(&a, 4000) < 1.0);
        assert!(lyapunov_for(&a).is_ok());
    }

    #[test]
    fn output_feedback_matrix_matches_simulation() {
        // The assembled 4x4 matrix must generate exactly the trajectory of
        // the actual controller/plant loop in error coordinates.
        let plant = di_plant();
        let controller = Controller::new(Architecture::OutputFeedback, &plant).unwrap();
        let mut cache = GainCache::new();
        let theta = DVector::from_vec(vec![-1.0, -2.0, -0.4, -0.6]);
        let a = closed_loop_matrix(&controller, &theta, &plant, &mut cache).unwrap();
        assert_eq!(a.shape(), (4, 4));

        let p_ref = 0.7;
        let reference = DVector::from_vec(vec![p_ref]);
        let mut obs = DVector::from_vec(vec![1.0, -0.3]);
        let mut z = DVector::from_vec(vec![0.4, 0.2]);
        let mut aug = DVector::from_vec(vec![obs[0] - p_ref, obs[1], z[0] - p_ref, z[1]]);
        for _ in 0..40 {
            let (u, z_next) = controller
                .control(&mut cache, &obs, &z, &reference, &theta)
                .unwrap();
            obs = step(&plant, &obs, &u, &DVector::zeros(2)).unwrap();
            z = z_next;
            aug = &a * aug;
            let actual =
                DVector::from_vec(vec![obs[0] - p_ref, obs[1], z[0] - p_ref, z[1]]);
            assert!((&aug - &actual).abs().max() < 1e-11);
        }
    }

    #[test]
    fn pid_matrix_matches_simulation() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::Pid, &plant).unwrap();
        let mut cache = GainCache::new();
        let theta = DVector::from_vec(vec![-0.9, -0.03, -0.4]);
        let a = closed_loop_matrix(&controller, &theta, &plant, &mut cache).unwrap();
        assert_eq!(a.shape(), (5, 5));

        let p_ref = -0.2;
        let reference = DVector::from_vec(vec![p_ref]);
        let mut obs = DVector::from_vec(vec![0.5, 0.1]);
        let mut z = DVector::zeros(3);
        let mut aug = DVector::from_vec(vec![obs[0] - p_ref, obs[1], z[0], z[1], z[2]]);
        for _ in 0..40 {
            let (u, z_next) = controller
                .control(&mut cache, &obs, &z, &reference, &theta)
                .unwrap();
            obs = step(&plant, &obs, &u, &DVector::zeros(2)).unwrap();
            z = z_next;
            aug = &a * aug;
            let actual = DVector::from_vec(vec![obs[0] - p_ref, obs[1], z[0], z[1], z[2]]);
            assert!((&aug - &actual).abs().max() < 1e-11);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let zero = DMatrix::zeros(2, 2);
        let l = lyapunov_for(&zero).unwrap();
        assert!((l.m - DMatrix::identity(2, 2)).abs().max() < 1e-12);

        let half = DMatrix::from_row_slice(1, 1, &[0.5]);
        let l = lyapunov_for(&half).unwrap();
        assert!((l.m[(0, 0)] - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn lyapunov_residual_and_decrease_on_random_stable_loops() {
        let mut state = 77_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(11);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..20 {
            let n = 2 + (next().abs() * 3.0) as usize;
            let raw = DMatrix::from_fn(n, n, |_, _| next());
            let rho = spectral_radius(&raw, 3000);
            if rho <= 0.0 {
                continue;
            }
            let a = raw * (0.8 / rho);
            let l = match lyapunov_for(&a) {
                Ok(l) => l,
                Err(_) => continue, // normalization is approximate
            };
            let residual =
                (a.transpose() * &l.m * &a - &l.m + DMatrix::identity(n, n)).abs().max();
            assert!(residual <= 1e-9, "residual {residual}");

            // V decreases along simulated trajectories.
            let mut x = DVector::from_fn(n, |_, _| next());
            let mut v = l.value(&x);
            for _ in 0..20 {
                x = &a * x;
                let v_next = l.value(&x);
                assert!(v_next <= v + 1e-12);
                v = v_next;
            }
        }
    }

    #[test]
    fn gate_accepts_identical_parameters() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::StateFeedback, &plant).unwrap();
        let settings = SafetySettings::default();
        let ctx = ctx_as(&controller, &plant, &settings, vec![1.0, 0.0], vec![], 0.0);
        let mut cache = GainCache::new();
        let theta = DVector::from_vec(vec![123.0, 456.0]); // even absurd ones
        let verdict = safety_gate(&theta, &theta, &ctx, &mut cache);
        assert!(verdict.accepted);
        assert_eq!(verdict.reason, VerdictReason::Ok);
    }

    #[test]
    fn gate_rejects_unstable_proposal() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::StateFeedback, &plant).unwrap();
        let settings = SafetySettings::default();
        let ctx = ctx_as(&controller, &plant, &settings, vec![1.0, 0.0], vec![], 0.0);
        let mut cache = GainCache::new();
        let stable = DVector::from_vec(vec![-2.0, -3.0]);
        let unstable = DVector::from_vec(vec![2.0, 1.0]);
        let verdict = safety_gate(&stable, &unstable, &ctx, &mut cache);
        assert!(!verdict.accepted);
        assert_eq!(verdict.reason, VerdictReason::UnstableClosedLoop);
    }

    #[test]
    fn gate_accepts_at_origin_for_stable_proposal() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::StateFeedback, &plant).unwrap();
        let settings = SafetySettings::default();
        let ctx = ctx_as(&controller, &plant, &settings, vec![0.0, 0.0], vec![], 0.0);
        let mut cache = GainCache::new();
        let a = DVector::from_vec(vec![-2.0, -3.0]);
        let b = DVector::from_vec(vec![-1.0, -1.5]);
        let verdict = safety_gate(&a, &b, &ctx, &mut cache);
        assert!(verdict.accepted);
    }

    #[test]
    fn gate_rejects_lyapunov_increase() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::StateFeedback, &plant).unwrap();
        let settings = SafetySettings::default();
        let mut cache = GainCache::new();
        // Find a state where the candidate's Lyapunov value is higher.
        let a = DVector::from_vec(vec![-2.0, -3.0]);
        let b = DVector::from_vec(vec![-0.05, -0.4]);
        let la = lyapunov_for(
            &closed_loop_matrix(&controller, &a, &plant, &mut cache).unwrap(),
        )
        .unwrap();
        let lb = lyapunov_for(
            &closed_loop_matrix(&controller, &b, &plant, &mut cache).unwrap(),
        )
        .unwrap();
        let mut rejected = false;
        for e in [-2.0, -1.0, 0.5, 1.0, 2.0] {
            for v in [-1.0, 0.0, 1.0] {
                let x = DVector::from_vec(vec![e, v]);
                if lb.value(&x) > la.value(&x) {
                    let ctx =
                        ctx_as(&controller, &plant, &settings, vec![e, v], vec![], 0.0);
                    let verdict = safety_gate(&a, &b, &ctx, &mut cache);
                    assert!(!verdict.accepted);
                    assert_eq!(verdict.reason, VerdictReason::LyapunovIncrease);
                    rejected = true;
                }
            }
        }
        assert!(rejected, "test states never exposed an increase");
    }

    #[test]
    fn rollout_gate_accepts_contracting_sliding_mode() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::SlidingMode, &plant).unwrap();
        let settings = SafetySettings::default();
        let ctx = ctx_as(&controller, &plant, &settings, vec![1.0, 0.0], vec![], 0.0);
        let mut cache = GainCache::new();
        let old = DVector::from_vec(vec![1.0, 0.5]);
        let new = DVector::from_vec(vec![1.2, 0.6]);
        let verdict = safety_gate(&old, &new, &ctx, &mut cache);
        assert!(verdict.accepted, "reason: {:?}", verdict.reason);
    }

    #[test]
    fn rollout_gate_rejects_runaway_parameters() {
        let plant = di_plant();
        let controller = Controller::new(Architecture::SlidingMode, &plant).unwrap();
        let settings = SafetySettings::default();
        let ctx = ctx_as(&controller, &plant, &settings, vec![1.0, 0.0], vec![], 0.0);
        let mut cache = GainCache::new();
        let old = DVector::from_vec(vec![1.0, 0.5]);
        // Negative surface slope destabilizes the reaching dynamics.
        let new = DVector::from_vec(vec![-5.0, 0.0]);
        let verdict = safety_gate(&old, &new, &ctx, &mut cache);
        assert!(!verdict.accepted);
    }
}
