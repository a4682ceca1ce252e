//! Specification functions, their target vectors and the training-objective
//! cost.
//!
//! A specification is an ordered list of blocks; each block maps a window of
//! closed-loop data to a segment of the specification vector `r`, its desired
//! value segment `y`, and a diagonal weight segment of the slack covariance.
//! Blocks may be non-smooth (overshoot flags, sign-change counts) — that is
//! deliberate, the unscented calibrator does not need gradients.

use nalgebra::DVector;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum SpecError {
    /// The trace has fewer transitions than the block needs.
    WindowTooShort,
    DimensionMismatch,
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::WindowTooShort => write!(f, "window too short for specification"),
            SpecError::DimensionMismatch => write!(f, "dimension mismatch"),
        }
    }
}

impl std::error::Error for SpecError {}

/// A window of closed-loop data: `steps + 1` observed states, `steps` inputs
/// and the reference active during each step.
#[derive(Debug, Clone)]
pub struct WindowTrace {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub references: Vec<DVector<f64>>,
}

impl WindowTrace {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(SpecError::WindowTooShort);
        }
        if self.states.len() != n + 1 || self.references.len() != n {
            return Err(SpecError::DimensionMismatch);
        }
        Ok(())
    }
}

/// One segment of the specification vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecBlock {
    /// Position-and-input tracking on the double integrator: the positions
    /// after each step against the active reference, and every input against
    /// zero.
    Tracking,
    /// Flat penalty when the maximum position exceeds `limit` (strictly).
    Overshoot { limit: f64, penalty: f64 },
    /// Number of sign changes in one input channel across the window; exact
    /// zeros neither count nor break a run.
    SignChanges { channel: usize },
    /// Lane keeping on the single-track models: lateral position against the
    /// lane reference, scaled yaw against zero, scaled steering rate against
    /// zero.
    Lane,
    /// Vehicle state tracking: every state but the longitudinal progress
    /// against the reference, both inputs against zero.
    VehicleTracking,
}

/// Block with its slack-covariance scale: the corresponding diagonal segment
/// of `C_v` is `cv * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBlock {
    pub block: SpecBlock,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Specification {
    pub blocks: Vec<WeightedBlock>,
}

/// Scale factors of the lane-keeping block, fixed by the objective.
const LANE_YAW_SCALE: f64 = 0.1;
const LANE_STEER_RATE_SCALE: f64 = 10.0;
/// Steering-rate channel in the composed `(accel, steer rate)` vehicle input.
const STEER_RATE_CHANNEL: usize = 1;

/// Counts sign changes between consecutive non-zero samples.
pub fn sign_change_count(samples: impl IntoIterator<Item = f64>) -> usize {
    let mut last_sign = 0.0;
    let mut count = 0;
    for s in samples {
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            continue;
        };
        if last_sign != 0.0 && sign != last_sign {
            count += 1;
        }
        last_sign = sign;
    }
    count
}

impl SpecBlock {
    fn len(&self, steps: usize) -> usize {
        match self {
            SpecBlock::Tracking => 2 * steps,
            SpecBlock::Overshoot { .. } | SpecBlock::SignChanges { .. } => 1,
            SpecBlock::Lane => 3 * steps,
            SpecBlock::VehicleTracking => 4 * (steps + 1) + 2 * steps,
        }
    }

    fn evaluate(&self, trace: &WindowTrace, r: &mut Vec<f64>, y: &mut Vec<f64>) {
        let n = trace.steps();
        match self {
            SpecBlock::Tracking => {
                for k in 0..n {
                    r.push(trace.states[k + 1][0]);
                    y.push(trace.references[k][0]);
                }
                for k in 0..n {
                    r.push(trace.inputs[k][0]);
                    y.push(0.0);
                }
            }
            SpecBlock::Overshoot { limit, penalty } => {
                let max_pos = trace.states[1..]
                    .iter()
                    .fold(f64::NEG_INFINITY, |acc, x| acc.max(x[0]));
                r.push(if max_pos > *limit { *penalty } else { 0.0 });
                y.push(0.0);
            }
            SpecBlock::SignChanges { channel } => {
                let count =
                    sign_change_count(trace.inputs.iter().map(|u| u[*channel]));
                r.push(count as f64);
                y.push(0.0);
            }
            SpecBlock::Lane => {
                for k in 0..n {
                    r.push(trace.states[k + 1][1]);
                    y.push(trace.references[k][0]);
                }
                for k in 0..n {
                    r.push(LANE_YAW_SCALE * trace.states[k + 1][2]);
                    y.push(0.0);
                }
                for k in 0..n {
                    r.push(LANE_STEER_RATE_SCALE * trace.inputs[k][STEER_RATE_CHANNEL]);
                    y.push(0.0);
                }
            }
            SpecBlock::VehicleTracking => {
                for k in 0..=n {
                    let x_ref = &trace.references[k.min(n - 1)];
                    let x = &trace.states[k];
                    for i in 1..5 {
                        r.push(x[i] - x_ref[i]);
                        y.push(0.0);
                    }
                }
                for k in 0..n {
                    r.push(trace.inputs[k][0]);
                    y.push(0.0);
                    r.push(trace.inputs[k][1]);
                    y.push(0.0);
                }
            }
        }
    }

    /// The target segment of this block, which depends only on the window's
    /// references.
    fn emit_target(&self, references: &[DVector<f64>], y: &mut Vec<f64>) {
        let n = references.len();
        match self {
            SpecBlock::Tracking => {
                for r in references {
                    y.push(r[0]);
                }
                y.extend(std::iter::repeat(0.0).take(n));
            }
            SpecBlock::Overshoot { .. } | SpecBlock::SignChanges { .. } => y.push(0.0),
            SpecBlock::Lane => {
                for r in references {
                    y.push(r[0]);
                }
                y.extend(std::iter::repeat(0.0).take(2 * n));
            }
            SpecBlock::VehicleTracking => {
                y.extend(std::iter::repeat(0.0).take(4 * (n + 1) + 2 * n));
            }
        }
    }
}

/// Specification vector, target vector and slack diagonal evaluated on one
/// window.
#[derive(Debug, Clone)]
pub struct SpecEval {
    pub r: DVector<f64>,
    pub y: DVector<f64>,
}

impl Specification {
    pub fn new(blocks: Vec<WeightedBlock>) -> Self {
        assert!(blocks.iter().all(|b| b.cv > 0.0), "C_v blocks must be positive");
        Specification { blocks }
    }

    /// Total specification dimension for a window with `steps` transitions.
    pub fn output_len(&self, steps: usize) -> usize {
        self.blocks.iter().map(|b| b.block.len(steps)).sum()
    }

    /// Diagonal of the slack covariance `C_v` for a window with `steps`
    /// transitions.
    pub fn slack_diag(&self, steps: usize) -> DVector<f64> {
        let mut diag = Vec::with_capacity(self.output_len(steps));
        for b in &self.blocks {
            diag.extend(std::iter::repeat(b.cv).take(b.block.len(steps)));
        }
        DVector::from_vec(diag)
    }

    /// Target vector `y` for a window with the given per-step references.
    pub fn target(&self, references: &[DVector<f64>]) -> Result<DVector<f64>, SpecError> {
        if references.is_empty() {
            return Err(SpecError::WindowTooShort);
        }
        let mut y = Vec::with_capacity(self.output_len(references.len()));
        for b in &self.blocks {
            b.block.emit_target(references, &mut y);
        }
        Ok(DVector::from_vec(y))
    }

    /// Evaluates `r` and its target `y` on a window.
    pub fn evaluate(&self, trace: &WindowTrace) -> Result<SpecEval, SpecError> {
        trace.validate()?;
        let n = trace.steps();
        let total = self.output_len(n);
        let mut r = Vec::with_capacity(total);
        let mut y = Vec::with_capacity(total);
        for b in &self.blocks {
            b.block.evaluate(trace, &mut r, &mut y);
        }
        Ok(SpecEval {
            r: DVector::from_vec(r),
            y: DVector::from_vec(y),
        })
    }

    /// Training-objective cost `(y - r)^T C_v^{-1} (y - r)` of a window.
    pub fn cost(&self, trace: &WindowTrace) -> Result<f64, SpecError> {
        let eval = self.evaluate(trace)?;
        let cv = self.slack_diag(trace.steps());
        objective_cost(&eval.y, &eval.r, &cv)
    }
}

/// `(y - r)^T C_v^{-1} (y - r)` for a diagonal slack covariance.
pub fn objective_cost(
    y: &DVector<f64>,
    r: &DVector<f64>,
    cv_diag: &DVector<f64>,
) -> Result<f64, SpecError> {
    if y.len() != r.len() || y.len() != cv_diag.len() {
        return Err(SpecError::DimensionMismatch);
    }
    let mut acc = 0.0;
    for i in 0..y.len() {
        let d = y[i] - r[i];
        acc += d * d / cv_diag[i];
    }
    Ok(acc)
}
