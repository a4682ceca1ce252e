//! Parametric control laws with a uniform interface: given the observed
//! state, the controller's internal state `z` and a parameter vector, produce
//! the input and the next internal state.
//!
//! All laws are pure in `(obs, z, reference, theta)`; gain synthesis for the
//! Riccati-based laws goes through an explicit [`GainCache`] owned by the
//! caller, so controller values stay freely shareable across threads.

use crate::numerics::{dare_solve, DareProblem, NumericsError};
use crate::plants::PlantModel;
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum ControlError {
    /// Parameter vector length does not match the architecture layout.
    LengthMismatch { expected: usize, got: usize },
    /// Parameters violate the architecture's feasibility set (e.g. the cost
    /// weights of a Riccati-based law are not positive definite).
    InfeasibleParameters,
    /// Architecture is registered but has no control-law constructor.
    NotSupported,
    /// Observation, internal state or reference has the wrong shape.
    DimensionMismatch,
}

impl fmt::Display for ControlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlError::LengthMismatch { expected, got } => {
                write!(f, "parameter length mismatch: expected {expected}, got {got}")
            }
            ControlError::InfeasibleParameters => write!(f, "infeasible control parameters"),
            ControlError::NotSupported => write!(f, "architecture has no control law"),
            ControlError::DimensionMismatch => write!(f, "dimension mismatch"),
        }
    }
}

impl std::error::Error for ControlError {}

/// The supported controller architectures.
///
/// The first seven act on the double integrator; the lane and bicycle
/// variants act on the single-track vehicle models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    StateFeedback,
    Optimal,
    Pid,
    SlidingMode,
    OutputFeedback,
    NeuralNetwork,
    HInfinity,
    LaneStateFeedback,
    LaneOptimal,
    BicycleOptimal,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::StateFeedback => "state_feedback",
            Architecture::Optimal => "optimal",
            Architecture::Pid => "pid",
            Architecture::SlidingMode => "sliding_mode",
            Architecture::OutputFeedback => "output_feedback",
            Architecture::NeuralNetwork => "neural_network",
            Architecture::HInfinity => "h_infinity",
            Architecture::LaneStateFeedback => "lane_state_feedback",
            Architecture::LaneOptimal => "lane_optimal",
            Architecture::BicycleOptimal => "bicycle_optimal",
        }
    }

    pub fn from_name(name: &str) -> Option<Architecture> {
        match name {
            "state_feedback" => Some(Architecture::StateFeedback),
            "optimal" => Some(Architecture::Optimal),
            "pid" => Some(Architecture::Pid),
            "sliding_mode" => Some(Architecture::SlidingMode),
            "output_feedback" => Some(Architecture::OutputFeedback),
            "neural_network" => Some(Architecture::NeuralNetwork),
            "h_infinity" => Some(Architecture::HInfinity),
            "lane_state_feedback" => Some(Architecture::LaneStateFeedback),
            "lane_optimal" => Some(Architecture::LaneOptimal),
            "bicycle_optimal" => Some(Architecture::BicycleOptimal),
            _ => None,
        }
    }
}

/// Named parameter slot inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: &'static str,
    pub len: usize,
}

/// Fixed packing order of an architecture's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub architecture: Architecture,
    pub slots: Vec<ParamSlot>,
}

impl ParamLayout {
    pub fn of(architecture: Architecture) -> ParamLayout {
        let slot = |name, len| ParamSlot { name, len };
        let slots = match architecture {
            Architecture::StateFeedback => vec![slot("position_gain", 1), slot("velocity_gain", 1)],
            Architecture::Optimal => vec![slot("state_weights", 3), slot("input_weight", 1)],
            Architecture::Pid => vec![
                slot("proportional", 1),
                slot("integral", 1),
                slot("derivative", 1),
            ],
            Architecture::SlidingMode => vec![slot("surface_slope", 1), slot("switching_gain", 1)],
            Architecture::OutputFeedback => vec![slot("feedback_gain", 2), slot("observer_gain", 2)],
            // Input layer 2->10 (30), hidden layer 10->10 (110), output 10->1 (11).
            Architecture::NeuralNetwork => vec![
                slot("input_weights", 20),
                slot("input_bias", 10),
                slot("hidden_weights", 100),
                slot("hidden_bias", 10),
                slot("output_weights", 10),
                slot("output_bias", 1),
            ],
            Architecture::HInfinity => vec![slot("pre_filter", 4), slot("post_filter", 4)],
            Architecture::LaneStateFeedback => vec![slot("gains", 3)],
            Architecture::LaneOptimal => vec![slot("lateral_weight", 1), slot("heading_weight", 1)],
            Architecture::BicycleOptimal => vec![slot("state_weights", 4), slot("input_weights", 2)],
        };
        ParamLayout {
            architecture,
            slots,
        }
    }

    pub fn n_params(&self) -> usize {
        self.slots.iter().map(|s| s.len).sum()
    }
}

/// Splits a flat parameter vector into the layout's named slots.
pub fn unpack_params(
    layout: &ParamLayout,
    flat: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, ControlError> {
    if flat.len() != layout.n_params() {
        return Err(ControlError::LengthMismatch {
            expected: layout.n_params(),
            got: flat.len(),
        });
    }
    let mut out = Vec::with_capacity(layout.slots.len());
    let mut offset = 0;
    for s in &layout.slots {
        out.push(DVector::from_iterator(
            s.len,
            flat.iter().skip(offset).take(s.len).copied(),
        ));
        offset += s.len;
    }
    Ok(out)
}

/// Concatenates slot values back into a flat parameter vector.
pub fn pack_params(
    layout: &ParamLayout,
    slots: &[DVector<f64>],
) -> Result<DVector<f64>, ControlError> {
    if slots.len() != layout.slots.len() {
        return Err(ControlError::LengthMismatch {
            expected: layout.slots.len(),
            got: slots.len(),
        });
    }
    let mut flat = Vec::with_capacity(layout.n_params());
    for (spec, values) in layout.slots.iter().zip(slots) {
        if values.len() != spec.len {
            return Err(ControlError::LengthMismatch {
                expected: spec.len,
                got: values.len(),
            });
        }
        flat.extend(values.iter().copied());
    }
    Ok(DVector::from_vec(flat))
}

/// Cache of synthesized gains keyed by the exact parameter bits (plus any
/// context such as the linearization velocity). Gains are recomputed only
/// when the key changes.
#[derive(Default)]
pub struct GainCache {
    map: HashMap<Vec<u64>, CachedGain>,
}

#[derive(Clone)]
enum CachedGain {
    Gain(DMatrix<f64>),
    Infeasible,
}

impl GainCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn lookup_or_insert<F>(&mut self, key: Vec<u64>, synth: F) -> Result<DMatrix<f64>, ControlError>
    where
        F: FnOnce() -> Result<DMatrix<f64>, ControlError>,
    {
        if self.map.len() > 8192 {
            self.map.clear();
        }
        if let Some(hit) = self.map.get(&key) {
            return match hit {
                CachedGain::Gain(g) => Ok(g.clone()),
                CachedGain::Infeasible => Err(ControlError::InfeasibleParameters),
            };
        }
        match synth() {
            Ok(g) => {
                self.map.insert(key, CachedGain::Gain(g.clone()));
                Ok(g)
            }
            Err(ControlError::InfeasibleParameters) => {
                self.map.insert(key, CachedGain::Infeasible);
                Err(ControlError::InfeasibleParameters)
            }
            Err(e) => Err(e),
        }
    }
}

fn key_of(parts: &[f64]) -> Vec<u64> {
    parts.iter().map(|v| v.to_bits()).collect()
}

/// `u = theta_1 e + theta_2 v`.
pub fn state_feedback(e: f64, v: f64, theta: &DVector<f64>) -> Result<f64, ControlError> {
    if theta.len() != 2 {
        return Err(ControlError::LengthMismatch {
            expected: 2,
            got: theta.len(),
        });
    }
    Ok(theta[0] * e + theta[1] * v)
}

/// Double-integrator system matrices at sampling period `ts`.
pub fn double_integrator_matrices(ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_row_slice(2, 2, &[1.0, ts, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, ts]),
    )
}

/// Feedback gain of the calibrated-cost optimal controller, so that
/// `u = gain * [e; v]` stabilizes the loop. The stage cost is
/// `[e v] [[t1, t2], [t2, t3]] [e; v] + t4 u^2`; infeasible weights (state
/// weight not PSD, input weight not positive, or a non-convergent Riccati
/// iteration) are reported instead of crashing so sigma-point evaluation can
/// substitute a penalty.
pub fn lqr_gain(
    ts: f64,
    theta: &DVector<f64>,
    cache: &mut GainCache,
) -> Result<DMatrix<f64>, ControlError> {
    if theta.len() != 4 {
        return Err(ControlError::LengthMismatch {
            expected: 4,
            got: theta.len(),
        });
    }
    let key = key_of(&[ts, theta[0], theta[1], theta[2], theta[3], 1.0]);
    cache.lookup_or_insert(key, || {
        let (t1, t2, t3, t4) = (theta[0], theta[1], theta[2], theta[3]);
        let psd = t1 >= 0.0 && t3 >= 0.0 && t1 * t3 - t2 * t2 >= 0.0;
        if !psd || t4 <= 0.0 {
            return Err(ControlError::InfeasibleParameters);
        }
        let (a, b) = double_integrator_matrices(ts);
        let q = DMatrix::from_row_slice(2, 2, &[t1, t2, t2, t3]);
        let r = DMatrix::from_row_slice(1, 1, &[t4]);
        let problem = DareProblem::new(a, b, q, r).map_err(|_| ControlError::InfeasibleParameters)?;
        match dare_solve(&problem) {
            Ok((_, k)) => Ok(-k),
            Err(NumericsError::NoConvergence) => Err(ControlError::InfeasibleParameters),
            Err(_) => Err(ControlError::InfeasibleParameters),
        }
    })
}

/// Incremental PID difference equation with internal state
/// `z = (u_prev, e_prev, e_prev2)`.
pub fn pid_control(
    e: f64,
    z: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>), ControlError> {
    if theta.len() != 3 {
        return Err(ControlError::LengthMismatch {
            expected: 3,
            got: theta.len(),
        });
    }
    if z.len() != 3 {
        return Err(ControlError::DimensionMismatch);
    }
    let (kp, ki, kd) = (theta[0], theta[1], theta[2]);
    let (u_prev, e_prev, e_prev2) = (z[0], z[1], z[2]);
    let u = u_prev + (kp + ki + kd) * e + (ki - kp - 2.0 * kd) * e_prev + kd * e_prev2;
    Ok((u, DVector::from_vec(vec![u, e, e_prev])))
}

fn signum_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `u = -theta_1 v - theta_2 sign(e + theta_1 v)`, with `sign(0) = 0`.
pub fn sliding_mode_control(e: f64, v: f64, theta: &DVector<f64>) -> Result<f64, ControlError> {
    if theta.len() != 2 {
        return Err(ControlError::LengthMismatch {
            expected: 2,
            got: theta.len(),
        });
    }
    let surface = e + theta[0] * v;
    Ok(-theta[0] * v - theta[1] * signum_zero(surface))
}

/// Dynamic output feedback from position measurements only. The internal
/// state is the observer estimate `z = (p_hat, v_hat)`; the estimate advances
/// through the plant model driven by the input computed in the same call plus
/// the correction `(theta_3, theta_4) (p_hat - p_meas)`.
pub fn output_feedback_control(
    p_meas: f64,
    z: &DVector<f64>,
    theta: &DVector<f64>,
    ts: f64,
    p_ref: f64,
) -> Result<(f64, DVector<f64>), ControlError> {
    if theta.len() != 4 {
        return Err(ControlError::LengthMismatch {
            expected: 4,
            got: theta.len(),
        });
    }
    if z.len() != 2 {
        return Err(ControlError::DimensionMismatch);
    }
    let (p_hat, v_hat) = (z[0], z[1]);
    let u = theta[0] * (p_hat - p_ref) + theta[1] * v_hat;
    let innovation = p_hat - p_meas;
    let p_next = p_hat + ts * v_hat + theta[2] * innovation;
    let v_next = v_hat + ts * u + theta[3] * innovation;
    Ok((u, DVector::from_vec(vec![p_next, v_next])))
}

const MLP_HIDDEN: usize = 10;
pub const MLP_PARAM_COUNT: usize = 151;

fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.1 * x
    }
}

/// Fully connected 2-10-10-1 network with leaky ReLU activations. Parameters
/// are packed row-major per layer: input weights, input bias, hidden weights,
/// hidden bias, output weights, output bias.
pub fn mlp_control(e: f64, v: f64, theta: &DVector<f64>) -> Result<f64, ControlError> {
    if theta.len() != MLP_PARAM_COUNT {
        return Err(ControlError::LengthMismatch {
            expected: MLP_PARAM_COUNT,
            got: theta.len(),
        });
    }
    let t = theta.as_slice();
    let w_in = &t[0..20];
    let b_in = &t[20..30];
    let w_hid = &t[30..130];
    let b_hid = &t[130..140];
    let w_out = &t[140..150];
    let b_out = t[150];

    let mut h1 = [0.0_f64; MLP_HIDDEN];
    for i in 0..MLP_HIDDEN {
        h1[i] = leaky_relu(w_in[2 * i] * e + w_in[2 * i + 1] * v + b_in[i]);
    }
    let mut h2 = [0.0_f64; MLP_HIDDEN];
    for i in 0..MLP_HIDDEN {
        let mut acc = b_hid[i];
        for j in 0..MLP_HIDDEN {
            acc += w_hid[MLP_HIDDEN * i + j] * h1[j];
        }
        h2[i] = leaky_relu(acc);
    }
    let mut u = b_out;
    for j in 0..MLP_HIDDEN {
        u += w_out[j] * h2[j];
    }
    Ok(u)
}

/// Riccati gain for the lane-keeping optimal controller: lateral state
/// `(p_y - p_ref, yaw, steer)`, steering-rate input, stage cost
/// `theta_1 p_y^2 + theta_2 yaw^2 + u^2`. Linearized at the commanded speed.
pub fn lane_lqr_gain(
    plant: &PlantModel,
    v_ref: f64,
    theta: &DVector<f64>,
    cache: &mut GainCache,
) -> Result<DMatrix<f64>, ControlError> {
    if theta.len() != 2 {
        return Err(ControlError::LengthMismatch {
            expected: 2,
            got: theta.len(),
        });
    }
    let key = key_of(&[v_ref, theta[0], theta[1], 2.0]);
    let lin = plant
        .lateral_linearization(v_ref)
        .ok_or(ControlError::NotSupported)?;
    cache.lookup_or_insert(key, || {
        if theta[0] < 0.0 || theta[1] < 0.0 {
            return Err(ControlError::InfeasibleParameters);
        }
        // Reduce the (p_y, yaw, speed, steer) linearization to the lateral
        // subsystem (p_y, yaw, steer) driven by the steering rate.
        let (a4, b4) = lin;
        let idx = [0usize, 1, 3];
        let mut a = DMatrix::zeros(3, 3);
        for (i, &ri) in idx.iter().enumerate() {
            for (j, &rj) in idx.iter().enumerate() {
                a[(i, j)] = a4[(ri, rj)];
            }
        }
        let mut b = DMatrix::zeros(3, 1);
        for (i, &ri) in idx.iter().enumerate() {
            b[(i, 0)] = b4[(ri, 1)];
        }
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![theta[0], theta[1], 0.0]));
        let r = DMatrix::identity(1, 1);
        let problem = DareProblem::new(a, b, q, r).map_err(|_| ControlError::InfeasibleParameters)?;
        match dare_solve(&problem) {
            Ok((_, k)) => Ok(-k),
            Err(_) => Err(ControlError::InfeasibleParameters),
        }
    })
}

/// Riccati gain for the vehicle tracking controller over the reduced state
/// `(p_y, yaw, speed, steer)` with diagonal weights `theta[0..4]` on the state
/// and `theta[4..6]` on the inputs. Linearized at the reference speed.
pub fn bicycle_lqr_gain(
    plant: &PlantModel,
    v_ref: f64,
    theta: &DVector<f64>,
    cache: &mut GainCache,
) -> Result<DMatrix<f64>, ControlError> {
    if theta.len() != 6 {
        return Err(ControlError::LengthMismatch {
            expected: 6,
            got: theta.len(),
        });
    }
    let key = key_of(&[v_ref, theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], 3.0]);
    let lin = plant
        .lateral_linearization(v_ref)
        .ok_or(ControlError::NotSupported)?;
    cache.lookup_or_insert(key, || {
        if theta.iter().take(4).any(|&q| q < 0.0) || theta[4] <= 0.0 || theta[5] <= 0.0 {
            return Err(ControlError::InfeasibleParameters);
        }
        let (a, b) = lin;
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![
            theta[0], theta[1], theta[2], theta[3],
        ]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![theta[4], theta[5]]));
        let problem = DareProblem::new(a, b, q, r).map_err(|_| ControlError::InfeasibleParameters)?;
        match dare_solve(&problem) {
            Ok((_, k)) => Ok(-k),
            Err(_) => Err(ControlError::InfeasibleParameters),
        }
    })
}

/// A controller bound to the plant model it was designed against.
#[derive(Debug, Clone)]
pub struct Controller {
    architecture: Architecture,
    layout: ParamLayout,
    plant: PlantModel,
    /// Proportional gain of the fixed speed regulator used by the lane
    /// controllers; not part of the calibrated parameter vector.
    pub velocity_gain: f64,
}

impl Controller {
    pub fn new(architecture: Architecture, plant: &PlantModel) -> Result<Self, ControlError> {
        let di_arch = matches!(
            architecture,
            Architecture::StateFeedback
                | Architecture::Optimal
                | Architecture::Pid
                | Architecture::SlidingMode
                | Architecture::OutputFeedback
                | Architecture::NeuralNetwork
                | Architecture::HInfinity
        );
        let ok = if di_arch {
            matches!(plant, PlantModel::DoubleIntegrator(_))
        } else {
            plant.lateral_linearization(1.0).is_some()
        };
        if !ok {
            return Err(ControlError::DimensionMismatch);
        }
        Ok(Controller {
            architecture,
            layout: ParamLayout::of(architecture),
            plant: plant.clone(),
            velocity_gain: 0.5,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub fn internal_state_dim(&self) -> usize {
        match self.architecture {
            Architecture::Pid => 3,
            Architecture::OutputFeedback => 2,
            _ => 0,
        }
    }

    pub fn initial_internal_state(&self) -> DVector<f64> {
        DVector::zeros(self.internal_state_dim())
    }

    /// Evaluates the control law.
    ///
    /// For the double-integrator architectures the reference is `[p_ref]`;
    /// for the lane controllers it is `[p_y_ref, v_ref]`; for the vehicle
    /// tracking controller it is the full five-entry state target.
    pub fn control(
        &self,
        cache: &mut GainCache,
        obs: &DVector<f64>,
        z: &DVector<f64>,
        reference: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), ControlError> {
        if theta.len() != self.n_params() {
            return Err(ControlError::LengthMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        if z.len() != self.internal_state_dim() {
            return Err(ControlError::DimensionMismatch);
        }
        match self.architecture {
            Architecture::StateFeedback => {
                let e = obs[0] - reference[0];
                let u = state_feedback(e, obs[1], theta)?;
                Ok((DVector::from_vec(vec![u]), z.clone()))
            }
            Architecture::Optimal => {
                let gain = lqr_gain(self.plant.sample_period(), theta, cache)?;
                let e = obs[0] - reference[0];
                let u = gain[(0, 0)] * e + gain[(0, 1)] * obs[1];
                Ok((DVector::from_vec(vec![u]), z.clone()))
            }
            Architecture::Pid => {
                let e = obs[0] - reference[0];
                let (u, z_next) = pid_control(e, z, theta)?;
                Ok((DVector::from_vec(vec![u]), z_next))
            }
            Architecture::SlidingMode => {
                let e = obs[0] - reference[0];
                let u = sliding_mode_control(e, obs[1], theta)?;
                Ok((DVector::from_vec(vec![u]), z.clone()))
            }
            Architecture::OutputFeedback => {
                let (u, z_next) = output_feedback_control(
                    obs[0],
                    z,
                    theta,
                    self.plant.sample_period(),
                    reference[0],
                )?;
                Ok((DVector::from_vec(vec![u]), z_next))
            }
            Architecture::NeuralNetwork => {
                let e = obs[0] - reference[0];
                let u = mlp_control(e, obs[1], theta)?;
                Ok((DVector::from_vec(vec![u]), z.clone()))
            }
            Architecture::HInfinity => Err(ControlError::NotSupported),
            Architecture::LaneStateFeedback => {
                if reference.len() < 2 {
                    return Err(ControlError::DimensionMismatch);
                }
                let lateral_error = obs[1] - reference[0];
                let steer_rate = theta[0] * lateral_error + theta[1] * obs[2] + theta[2] * obs[4];
                let accel = self.velocity_gain * (reference[1] - obs[3]);
                Ok((DVector::from_vec(vec![accel, steer_rate]), z.clone()))
            }
            Architecture::LaneOptimal => {
                if reference.len() < 2 {
                    return Err(ControlError::DimensionMismatch);
                }
                let gain = lane_lqr_gain(&self.plant, reference[1], theta, cache)?;
                let err = DVector::from_vec(vec![obs[1] - reference[0], obs[2], obs[4]]);
                let steer_rate = (&gain * &err)[0];
                let accel = self.velocity_gain * (reference[1] - obs[3]);
                Ok((DVector::from_vec(vec![accel, steer_rate]), z.clone()))
            }
            Architecture::BicycleOptimal => {
                if reference.len() < 5 {
                    return Err(ControlError::DimensionMismatch);
                }
                let gain = bicycle_lqr_gain(&self.plant, reference[3], theta, cache)?;
                let err = DVector::from_vec(vec![
                    obs[1] - reference[1],
                    obs[2] - reference[2],
                    obs[3] - reference[3],
                    obs[4] - reference[4],
                ]);
                let u = &gain * &err;
                Ok((u, z.clone()))
            }
        }
    }
}
