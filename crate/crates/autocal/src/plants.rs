//! Discrete-time simulation models and disturbance injection.
//!
//! Every plant is an immutable description of a map `x_{k+1} = f(x_k, u_k) + w_k`;
//! stepping is a pure function of `(x, u, w)`. The process-noise term doubles
//! as the model-mismatch channel: given logged states the realized `w_k` is
//! recovered exactly as `x_{k+1} - f(x_k, u_k)` and can be replayed later.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;

/// States above this magnitude are treated as a diverged simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub enum PlantError {
    /// Simulation produced NaN/inf or left the representable envelope.
    NonFiniteState,
    DimensionMismatch,
}

impl fmt::Display for PlantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlantError::NonFiniteState => write!(f, "plant state diverged"),
            PlantError::DimensionMismatch => write!(f, "dimension mismatch"),
        }
    }
}

impl std::error::Error for PlantError {}

/// Double integrator with acceleration input; disturbance enters the velocity
/// channel scaled by the sampling period.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleIntegrator {
    pub ts: f64,
}

/// Kinematic single-track model with state `(p_x, p_y, yaw, speed, steer)` and
/// inputs `(accel, steer rate)`, integrated by explicit Euler.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicBicycle {
    pub ts: f64,
    pub lf: f64,
    pub lr: f64,
}

/// Dynamic single-track model with linear tires, used as a deliberately
/// mismatched stand-in for a high-fidelity vehicle. Internal state is
/// `(p_x, p_y, yaw, v_x, v_y, yaw rate, steer)`; observers see the kinematic
/// projection `(p_x, p_y, yaw, v_x, steer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicBicycle {
    pub ts: f64,
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub cornering_front: f64,
    pub cornering_rear: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantModel {
    DoubleIntegrator(DoubleIntegrator),
    KinematicBicycle(KinematicBicycle),
    DynamicBicycle(DynamicBicycle),
}

impl PlantModel {
    pub fn double_integrator(ts: f64) -> Self {
        assert!(ts > 0.0);
        PlantModel::DoubleIntegrator(DoubleIntegrator { ts })
    }

    pub fn kinematic_bicycle(ts: f64, lf: f64, lr: f64) -> Self {
        assert!(ts > 0.0 && lf > 0.0 && lr > 0.0);
        PlantModel::KinematicBicycle(KinematicBicycle { ts, lf, lr })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            PlantModel::DoubleIntegrator(_) => 2,
            PlantModel::KinematicBicycle(_) => 5,
            PlantModel::DynamicBicycle(_) => 7,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            PlantModel::DoubleIntegrator(_) => 1,
            PlantModel::KinematicBicycle(_) | PlantModel::DynamicBicycle(_) => 2,
        }
    }

    /// Dimension of the controller-facing observation.
    pub fn observed_dim(&self) -> usize {
        match self {
            PlantModel::DoubleIntegrator(_) => 2,
            PlantModel::KinematicBicycle(_) | PlantModel::DynamicBicycle(_) => 5,
        }
    }

    pub fn sample_period(&self) -> f64 {
        match self {
            PlantModel::DoubleIntegrator(p) => p.ts,
            PlantModel::KinematicBicycle(p) => p.ts,
            PlantModel::DynamicBicycle(p) => p.ts,
        }
    }

    /// Controller-facing projection of the full plant state.
    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            PlantModel::DynamicBicycle(_) => {
                DVector::from_vec(vec![x[0], x[1], x[2], x[3], x[6]])
            }
            _ => x.clone(),
        }
    }

    /// Lifts an observed (kinematic) state into this plant's internal state.
    pub fn lift_observation(&self, obs: &DVector<f64>) -> DVector<f64> {
        match self {
            PlantModel::DynamicBicycle(_) => {
                DVector::from_vec(vec![obs[0], obs[1], obs[2], obs[3], 0.0, 0.0, obs[4]])
            }
            _ => obs.clone(),
        }
    }

    /// Per-unit-sample additive state increment for a scalar disturbance, or
    /// `None` when the plant has no scalar disturbance channel.
    pub fn scalar_disturbance_channel(&self) -> Option<DVector<f64>> {
        match self {
            PlantModel::DoubleIntegrator(p) => {
                Some(DVector::from_vec(vec![0.0, p.ts]))
            }
            _ => None,
        }
    }

    /// Nominal next state `f(x, u)` without process noise.
    pub fn nominal_next(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            PlantModel::DoubleIntegrator(p) => {
                debug_assert_eq!(x.len(), 2);
                debug_assert_eq!(u.len(), 1);
                DVector::from_vec(vec![x[0] + p.ts * x[1], x[1] + p.ts * u[0]])
            }
            PlantModel::KinematicBicycle(p) => {
                debug_assert_eq!(x.len(), 5);
                debug_assert_eq!(u.len(), 2);
                let wheelbase = p.lf + p.lr;
                let (yaw, speed, steer) = (x[2], x[3], x[4]);
                let slip = (p.lr * steer.tan() / wheelbase).atan();
                let course = yaw + slip;
                DVector::from_vec(vec![
                    x[0] + p.ts * speed * course.cos() / slip.cos(),
                    x[1] + p.ts * speed * course.sin() / slip.cos(),
                    x[2] + p.ts * speed * steer.tan() / wheelbase,
                    x[3] + p.ts * u[0],
                    x[4] + p.ts * u[1],
                ])
            }
            PlantModel::DynamicBicycle(p) => {
                debug_assert_eq!(x.len(), 7);
                debug_assert_eq!(u.len(), 2);
                let (yaw, vx, vy, yaw_rate, steer) = (x[2], x[3], x[4], x[5], x[6]);
                let slip_front = steer - (vy + p.lf * yaw_rate).atan2(vx);
                let slip_rear = -(vy - p.lr * yaw_rate).atan2(vx);
                let force_front = p.cornering_front * slip_front;
                let force_rear = p.cornering_rear * slip_rear;
                DVector::from_vec(vec![
                    x[0] + p.ts * (vx * yaw.cos() - vy * yaw.sin()),
                    x[1] + p.ts * (vx * yaw.sin() + vy * yaw.cos()),
                    x[2] + p.ts * yaw_rate,
                    x[3] + p.ts * (u[0] + yaw_rate * vy),
                    x[4] + p.ts * ((force_front * steer.cos() + force_rear) / p.mass - yaw_rate * vx),
                    x[5] + p.ts * (p.lf * force_front * steer.cos() - p.lr * force_rear) / p.yaw_inertia,
                    x[6] + p.ts * u[1],
                ])
            }
        }
    }

    /// Linearization `(A, B)` of the observed kinematic dynamics around
    /// straight driving at longitudinal speed `speed`, discretized at the
    /// plant's sampling period. Only defined for the bicycle models, over the
    /// reduced state `(p_y, yaw, speed, steer)`.
    pub fn lateral_linearization(&self, speed: f64) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let (ts, lf, lr) = match self {
            PlantModel::KinematicBicycle(p) => (p.ts, p.lf, p.lr),
            PlantModel::DynamicBicycle(p) => (p.ts, p.lf, p.lr),
            PlantModel::DoubleIntegrator(_) => return None,
        };
        let wheelbase = lf + lr;
        let mut a = DMatrix::identity(4, 4);
        a[(0, 1)] = ts * speed;
        a[(0, 3)] = ts * speed * lr / wheelbase;
        a[(1, 3)] = ts * speed / wheelbase;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = ts;
        b[(3, 1)] = ts;
        Some((a, b))
    }
}

/// One simulation step `f(x, u) + w`.
pub fn step(
    plant: &PlantModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, PlantError> {
    if x.len() != plant.state_dim() || u.len() != plant.input_dim() || w.len() != plant.state_dim()
    {
        return Err(PlantError::DimensionMismatch);
    }
    let next = plant.nominal_next(x, u) + w;
    if next.iter().all(|v| v.is_finite() && v.abs() < DIVERGENCE_LIMIT) {
        Ok(next)
    } else {
        Err(PlantError::NonFiniteState)
    }
}

/// Realized process noise of a logged transition: `w = x_next - f(x, u)`.
///
/// When `plant` differs from the system that produced the log, the result is
/// the model-mismatch residual, and replaying it through `step` reproduces the
/// logged trajectory.
pub fn recover_process_noise(
    plant: &PlantModel,
    x_next: &DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, PlantError> {
    if x.len() != plant.state_dim() || x_next.len() != plant.state_dim() {
        return Err(PlantError::DimensionMismatch);
    }
    if u.len() != plant.input_dim() {
        return Err(PlantError::DimensionMismatch);
    }
    Ok(x_next - plant.nominal_next(x, u))
}

/// Scalar disturbance description; realized per episode as a deterministic
/// stream derived from `(seed, episode)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceKind {
    None,
    Constant(f64),
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceModel {
    pub kind: DisturbanceKind,
    pub seed: u64,
}

impl DisturbanceModel {
    pub fn none() -> Self {
        DisturbanceModel {
            kind: DisturbanceKind::None,
            seed: 0,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, DisturbanceKind::None)
    }

    /// Per-episode stream; never shared between episodes.
    pub fn stream(&self, episode: u64) -> DisturbanceStream {
        let mixed = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(episode.wrapping_mul(0xd1b5_4a32_d192_ed03));
        DisturbanceStream {
            kind: self.kind.clone(),
            rng: ChaCha8Rng::seed_from_u64(mixed),
        }
    }
}

pub struct DisturbanceStream {
    kind: DisturbanceKind,
    rng: ChaCha8Rng,
}

impl DisturbanceStream {
    pub fn next_sample(&mut self) -> f64 {
        match self.kind {
            DisturbanceKind::None => 0.0,
            DisturbanceKind::Constant(v) => v,
            DisturbanceKind::Gaussian(std) => {
                let normal = Normal::new(0.0, std).expect("std must be non-negative");
                normal.sample(&mut self.rng)
            }
        }
    }
}

/// Builds the additive state-space noise for a scalar disturbance sample.
pub fn disturbance_state_term(plant: &PlantModel, sample: f64) -> DVector<f64> {
    match plant.scalar_disturbance_channel() {
        Some(channel) => channel * sample,
        None => DVector::zeros(plant.state_dim()),
    }
}

/// Convenience: zero noise vector for a plant.
pub fn zero_noise(plant: &PlantModel) -> DVector<f64> {
    DVector::zeros(plant.state_dim())
}
