//! Orientation-tracking inverse kinematics.
//!
//! [`solve_frame`] recovers the generalized coordinates whose forward
//! kinematics best reproduce a set of calibrated segment orientations, by
//! damped Gauss-Newton on the stacked rotation log residuals. [`Tracker`]
//! runs it per fused sensor frame, spline-filters each coordinate and emits
//! [`JointState`] messages carrying `(q, qd, qdd)` at the filter's delayed
//! evaluation time.
//!
//! Free-joint translations are unobservable from orientations and stay at
//! their previous values.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Isometry3, UnitQuaternion};

use crate::calib::{CalibError, CalibrationSet};
use crate::filter::{FilterError, SlidingSpline, SplineWindow};
use crate::model::{ChainModel, ModelError};
use crate::streams::OrientationSample;
use crate::telemetry::{EventLog, TelemetryError, EV_IK_PRODUCED};

#[derive(Debug, Clone, PartialEq)]
pub enum IkError {
    MissingSensor(String),
    UnknownFrame(String),
    UnmappedSegment(String),
    DimensionMismatch { expected: usize, got: usize },
    Model(String),
    Calib(String),
    Filter(String),
}

impl fmt::Display for IkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IkError::MissingSensor(s) => write!(f, "missing sensor '{s}' in observation"),
            IkError::UnknownFrame(s) => write!(f, "frame '{s}' not in model mapping"),
            IkError::UnmappedSegment(s) => write!(f, "segment '{s}' has no external frame name"),
            IkError::DimensionMismatch { expected, got } => {
                write!(f, "coordinate vector length {got}, expected {expected}")
            }
            IkError::Model(m) => write!(f, "ik model error: {m}"),
            IkError::Calib(m) => write!(f, "ik calibration error: {m}"),
            IkError::Filter(m) => write!(f, "ik filter error: {m}"),
        }
    }
}

impl std::error::Error for IkError {}

impl From<ModelError> for IkError {
    fn from(e: ModelError) -> Self {
        IkError::Model(e.to_string())
    }
}

impl From<CalibError> for IkError {
    fn from(e: CalibError) -> Self {
        IkError::Calib(e.to_string())
    }
}

impl From<FilterError> for IkError {
    fn from(e: FilterError) -> Self {
        IkError::Filter(e.to_string())
    }
}

/// Joint angles, velocities and accelerations at one instant, with the
/// event-timestamp log threaded through the pipeline.
#[derive(Debug, Clone)]
pub struct JointState {
    pub t: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
    pub events: EventLog,
}

/// Ground-frame rigid transforms keyed by external frame name.
#[derive(Debug, Clone)]
pub struct TransformSet {
    pub t: f64,
    pub transforms: Vec<(String, Isometry3<f64>)>,
}

impl TransformSet {
    pub fn get(&self, frame: &str) -> Option<&Isometry3<f64>> {
        self.transforms.iter().find(|(f, _)| f == frame).map(|(_, iso)| iso)
    }
}

/// Solver options. Damping follows a Levenberg-style schedule: boosted on
/// residual increase, relaxed on acceptance.
#[derive(Debug, Clone)]
pub struct IkOptions {
    /// Per-sensor weights; unlisted frames weigh 1.
    pub weights: BTreeMap<String, f64>,
    /// Convergence threshold on the step norm, rad.
    pub step_tol: f64,
    pub max_iterations: usize,
    pub initial_damping: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            weights: BTreeMap::new(),
            step_tol: 1e-8,
            max_iterations: 50,
            initial_damping: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub q: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max per-sensor geodesic residual, rad.
    pub residual: f64,
}

/// Calibrated per-segment orientation targets from raw sensor observations.
fn calibrated_targets(
    model: &ChainModel,
    calib: &CalibrationSet,
    obs: &BTreeMap<String, UnitQuaternion<f64>>,
) -> Result<Vec<(usize, UnitQuaternion<f64>, f64)>, IkError> {
    let mut targets = Vec::with_capacity(model.mapping.len());
    for frame in model.mapping.frames() {
        let measured =
            obs.get(frame).ok_or_else(|| IkError::MissingSensor(frame.to_string()))?;
        let segment = model.mapping.segment_for(frame).unwrap();
        let idx = model
            .segment_index(segment)
            .ok_or_else(|| IkError::Model(format!("unknown segment '{segment}'")))?;
        targets.push((idx, calib.apply(frame, measured)?, 1.0));
    }
    Ok(targets)
}

/// Solve one frame: minimize the weighted sum of squared rotation-log
/// residuals over the rotational coordinates, starting from `q_prev`.
pub fn solve_frame(
    model: &ChainModel,
    calib: &CalibrationSet,
    obs: &BTreeMap<String, UnitQuaternion<f64>>,
    q_prev: &DVector<f64>,
    opts: &IkOptions,
) -> Result<SolveOutcome, IkError> {
    if q_prev.len() != model.dof() {
        return Err(IkError::DimensionMismatch { expected: model.dof(), got: q_prev.len() });
    }
    let mut targets = calibrated_targets(model, calib, obs)?;
    for (frame_idx, frame) in model.mapping.frames().enumerate() {
        if let Some(&w) = opts.weights.get(frame) {
            targets[frame_idx].2 = w;
        }
    }
    solve_targets(model, &targets, q_prev, opts)
}

/// Residual vector: stacked weighted body-frame rotation logs.
fn residual(
    model: &ChainModel,
    targets: &[(usize, UnitQuaternion<f64>, f64)],
    q: &DVector<f64>,
) -> Result<DVector<f64>, IkError> {
    let fk = model.forward_kinematics(q)?;
    let mut r = DVector::zeros(3 * targets.len());
    for (k, (seg, target, w)) in targets.iter().enumerate() {
        let err = fk[*seg].rotation.inverse() * target;
        let v = err.scaled_axis() * *w;
        r.fixed_rows_mut::<3>(3 * k).copy_from(&v);
    }
    Ok(r)
}

pub(crate) fn solve_targets(
    model: &ChainModel,
    targets: &[(usize, UnitQuaternion<f64>, f64)],
    q_prev: &DVector<f64>,
    opts: &IkOptions,
) -> Result<SolveOutcome, IkError> {
    let free: Vec<usize> = model.rotational_coordinates();
    let n = free.len();
    let m = 3 * targets.len();
    let mut q = q_prev.clone();
    let mut damping = opts.initial_damping;
    let mut r = residual(model, targets, &q)?;
    let mut iterations = 0;
    let mut converged = false;

    let fd_h = 1e-7;
    while iterations < opts.max_iterations {
        // Forward-difference Jacobian over the free coordinates. The
        // residual at q is exact, so Jacobian truncation only affects the
        // step direction, not the converged solution.
        let mut jac = DMatrix::zeros(m, n);
        let mut qp = q.clone();
        for (col, &ci) in free.iter().enumerate() {
            qp[ci] += fd_h;
            let rp = residual(model, targets, &qp)?;
            qp[ci] = q[ci];
            for row in 0..m {
                jac[(row, col)] = (rp[row] - r[row]) / fd_h;
            }
        }
        let jt = jac.transpose();
        let grad = &jt * &r;
        let h = &jt * &jac;

        // Damped step with backoff on residual increase.
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += damping;
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&grad);
            let mut q_new = q.clone();
            for (col, &ci) in free.iter().enumerate() {
                q_new[ci] -= step[col];
            }
            let r_new = residual(model, targets, &q_new)?;
            if r_new.norm() <= r.norm() {
                let step_norm = step.norm();
                q = q_new;
                r = r_new;
                damping = (damping * 0.5).max(1e-12);
                accepted = true;
                iterations += 1;
                if step_norm < opts.step_tol {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if converged || !accepted {
            converged = converged || !accepted && r.norm() < 1e-10;
            break;
        }
    }

    // Report the max per-sensor geodesic error (unweighted).
    let fk = model.forward_kinematics(&q)?;
    let residual_angle = targets
        .iter()
        .map(|(seg, target, _)| fk[*seg].rotation.angle_to(target))
        .fold(0.0, f64::max);
    Ok(SolveOutcome { q, converged, iterations, residual: residual_angle })
}

/// FK of a joint state with segment names translated to external frame
/// names, stamped with the state's time.
pub fn broadcast_transforms(model: &ChainModel, js: &JointState) -> Result<TransformSet, IkError> {
    let fk = model.forward_kinematics(&js.q)?;
    let mut transforms = Vec::with_capacity(model.segments.len());
    for (idx, seg) in model.segments.iter().enumerate() {
        let frame = model
            .mapping
            .frame_for(&seg.name)
            .ok_or_else(|| IkError::UnmappedSegment(seg.name.clone()))?;
        transforms.push((frame.to_string(), fk[idx]));
    }
    Ok(TransformSet { t: js.t, transforms })
}

/// Sequential tracking stage: groups per-sensor samples into frames, solves
/// IK with warm starts, filters each coordinate and emits joint states.
pub struct Tracker {
    model: Arc<ChainModel>,
    calib: CalibrationSet,
    opts: IkOptions,
    filters: Vec<SlidingSpline>,
    q_prev: DVector<f64>,
    pending_t: Option<f64>,
    pending: BTreeMap<String, UnitQuaternion<f64>>,
    /// Iterations used by each accepted solve (warm-start diagnostics).
    pub iterations_log: Vec<usize>,
    pub dropped_frames: u64,
    pub unconverged: u64,
}

impl Tracker {
    pub fn new(
        model: Arc<ChainModel>,
        calib: CalibrationSet,
        win: SplineWindow,
        opts: IkOptions,
    ) -> Self {
        let dof = model.dof();
        Tracker {
            model,
            calib,
            opts,
            filters: (0..dof).map(|_| SlidingSpline::new(win)).collect(),
            q_prev: DVector::zeros(dof),
            pending_t: None,
            pending: BTreeMap::new(),
            iterations_log: Vec::new(),
            dropped_frames: 0,
            unconverged: 0,
        }
    }

    pub fn with_initial_pose(mut self, q0: DVector<f64>) -> Self {
        self.q_prev = q0;
        self
    }

    pub fn model(&self) -> &ChainModel {
        &self.model
    }

    fn frame_count(&self) -> usize {
        self.model.mapping.len()
    }

    /// Feed one orientation sample at pipeline time `now`. Returns a
    /// [`JointState`] when a complete frame solved AND the filter window is
    /// full. Event 0 is recorded at `now`.
    pub fn push(
        &mut self,
        now: f64,
        sample: &OrientationSample,
    ) -> Result<Option<JointState>, IkError> {
        if self.model.mapping.segment_for(&sample.frame).is_none() {
            return Err(IkError::UnknownFrame(sample.frame.clone()));
        }
        match self.pending_t {
            Some(t) if sample.t < t => {
                // Late sample for an already-advanced group.
                self.dropped_frames += 1;
                return Ok(None);
            }
            Some(t) if sample.t > t => {
                // The previous group never completed.
                if !self.pending.is_empty() {
                    self.dropped_frames += 1;
                }
                self.pending.clear();
                self.pending_t = Some(sample.t);
            }
            None => self.pending_t = Some(sample.t),
            _ => {}
        }
        self.pending.insert(sample.frame.clone(), sample.quat);
        if self.pending.len() < self.frame_count() {
            return Ok(None);
        }
        let t = self.pending_t.take().unwrap();
        let obs = std::mem::take(&mut self.pending);
        self.solve_group(now, t, &obs)
    }

    fn solve_group(
        &mut self,
        now: f64,
        t: f64,
        obs: &BTreeMap<String, UnitQuaternion<f64>>,
    ) -> Result<Option<JointState>, IkError> {
        let outcome = solve_frame(&self.model, &self.calib, obs, &self.q_prev, &self.opts)?;
        if !outcome.converged {
            self.unconverged += 1;
        }
        self.iterations_log.push(outcome.iterations);
        self.q_prev = outcome.q.clone();

        let dof = self.model.dof();
        let mut q = DVector::zeros(dof);
        let mut qd = DVector::zeros(dof);
        let mut qdd = DVector::zeros(dof);
        let mut ready = true;
        let mut t_eval = t;
        for (i, filt) in self.filters.iter_mut().enumerate() {
            match filt.push(t, outcome.q[i])? {
                Some(s) => {
                    q[i] = s.value;
                    qd[i] = s.d1;
                    qdd[i] = s.d2;
                    t_eval = s.t;
                }
                None => ready = false,
            }
        }
        if !ready {
            return Ok(None);
        }
        let events = EventLog::new()
            .record(EV_IK_PRODUCED, now)
            .map_err(|e: TelemetryError| IkError::Model(e.to_string()))?;
        Ok(Some(JointState { t: t_eval, q, qd, qdd, events }))
    }
}
