//! Synthetic session generation: scripted gait-like trajectories and
//! standing poses with matching insole forces, rendered into the session
//! format together with reference joint angles and ground-truth torques.
//!
//! Trajectories are sums of sinusoids, so velocities and accelerations are
//! analytic; torque ground truth comes from the same inverse-dynamics path
//! fed with those exact derivatives and the exact wrench geometry.

use std::fmt;

use nalgebra::{DVector, Isometry3, Translation3, UnitQuaternion, Vector2, Vector3};

use crate::id::{build_wrench, rne, transform_cop, ExternalWrench, IdError};
use crate::model::{ChainModel, ModelError};
use crate::streams::{InsoleRecord, OrientationSample, Record, Session, Side};

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    UnknownCoordinate(String),
    UnknownSegment(String),
    Model(String),
    Dynamics(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::UnknownCoordinate(c) => write!(f, "trajectory drives unknown coordinate '{c}'"),
            SynthError::UnknownSegment(s) => write!(f, "unknown foot segment '{s}'"),
            SynthError::Model(m) => write!(f, "synth model error: {m}"),
            SynthError::Dynamics(m) => write!(f, "synth dynamics error: {m}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<ModelError> for SynthError {
    fn from(e: ModelError) -> Self {
        SynthError::Model(e.to_string())
    }
}

impl From<IdError> for SynthError {
    fn from(e: IdError) -> Self {
        SynthError::Dynamics(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Constant default pose, both feet evenly loaded.
    Standing,
    /// Periodic gait-like motion with alternating stance.
    Walking,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub duration_s: f64,
    pub rate_hz: f64,
    /// Gait cycle frequency, Hz (walking only).
    pub cycle_hz: f64,
    /// Insole records per side per burst.
    pub burst_len: usize,
    /// Transport latency of insole bursts after their last sample, s.
    pub burst_latency_s: f64,
    /// Foot segments carrying the insoles.
    pub left_foot: String,
    pub right_foot: String,
    /// Insole frame in the foot frame.
    pub mount_left: Isometry3<f64>,
    pub mount_right: Isometry3<f64>,
    /// Wrench activation threshold mirrored from the pipeline, N.
    pub force_threshold_n: f64,
}

/// Insole mount used with the bundled demo model: origin at the heel, 5 cm
/// behind the ankle. Only x/y matter (the COP is projected to the ground).
pub fn demo_insole_mount() -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::new(-0.05, 0.0, -0.108), UnitQuaternion::identity())
}

impl SynthOptions {
    pub fn standing(duration_s: f64) -> Self {
        SynthOptions { kind: SynthKind::Standing, duration_s, ..Self::base() }
    }

    pub fn walking(duration_s: f64) -> Self {
        SynthOptions { kind: SynthKind::Walking, duration_s, ..Self::base() }
    }

    fn base() -> Self {
        SynthOptions {
            kind: SynthKind::Standing,
            duration_s: 10.0,
            rate_hz: 100.0,
            cycle_hz: 1.0,
            burst_len: 3,
            burst_latency_s: 0.008,
            left_foot: "foot_l".into(),
            right_foot: "foot_r".into(),
            mount_left: demo_insole_mount(),
            mount_right: demo_insole_mount(),
            force_threshold_n: 10.0,
        }
    }
}

/// One driven coordinate: offset plus sinusoid terms (amp, rad/s, phase).
#[derive(Debug, Clone)]
struct Motion {
    coord: usize,
    offset: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Motion {
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let mut q = self.offset;
        let mut qd = 0.0;
        let mut qdd = 0.0;
        for &(a, w, p) in &self.terms {
            q += a * (w * t + p).sin();
            qd += a * w * (w * t + p).cos();
            qdd -= a * w * w * (w * t + p).sin();
        }
        (q, qd, qdd)
    }
}

/// The analytic trajectory plus insole force/COP program of one session.
pub struct Trajectory {
    dof: usize,
    motions: Vec<Motion>,
    kind: SynthKind,
    cycle_hz: f64,
    body_weight_n: f64,
}

impl Trajectory {
    /// `(q, qd, qdd)` at time `t`.
    pub fn state(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let mut q = DVector::zeros(self.dof);
        let mut qd = DVector::zeros(self.dof);
        let mut qdd = DVector::zeros(self.dof);
        for m in &self.motions {
            let (v, d1, d2) = m.eval(t);
            q[m.coord] = v;
            qd[m.coord] = d1;
            qdd[m.coord] = d2;
        }
        (q, qd, qdd)
    }

    /// Normal force (N) and insole-frame COP (m) of one side at time `t`.
    pub fn insole(&self, side: Side, t: f64) -> (f64, Vector2<f64>) {
        match self.kind {
            SynthKind::Standing => (self.body_weight_n / 2.0, Vector2::new(0.10, 0.0)),
            SynthKind::Walking => {
                const STANCE_FRAC: f64 = 0.62;
                let shift = if side == Side::Right { 0.0 } else { 0.5 };
                let phase = (self.cycle_hz * t + shift).fract();
                if phase < STANCE_FRAC {
                    let u = phase / STANCE_FRAC;
                    let f = 1.2 * self.body_weight_n * (std::f64::consts::PI * u).sin().powi(2);
                    let cop_x = 0.02 + 0.20 * u;
                    (f, Vector2::new(cop_x, 0.01))
                } else {
                    // Swing: force zero; COP glides smoothly back toward the
                    // heel so the filtered signal stays clean around stance
                    // transitions.
                    let u = (phase - STANCE_FRAC) / (1.0 - STANCE_FRAC);
                    let blend = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
                    (0.0, Vector2::new(0.22 - 0.20 * blend, 0.01))
                }
            }
        }
    }
}

fn walking_motions(model: &ChainModel, cycle_hz: f64) -> Result<Vec<Motion>, SynthError> {
    let w = std::f64::consts::TAU * cycle_hz;
    let pi = std::f64::consts::PI;
    let spec: Vec<(&str, f64, Vec<(f64, f64, f64)>)> = vec![
        ("pelvis_rotation", 0.0, vec![(0.05, w, 0.0)]),
        ("pelvis_list", 0.0, vec![(0.025, w, 0.6)]),
        ("pelvis_tilt", 0.04, vec![(0.03, 2.0 * w, 0.2)]),
        ("lumbar_rotation", 0.0, vec![(-0.05, w, 0.0)]),
        ("lumbar_bending", 0.0, vec![(0.02, w, pi + 0.6)]),
        ("lumbar_extension", -0.05, vec![(0.03, 2.0 * w, 0.9)]),
        ("hip_rotation_r", 0.0, vec![(0.05, w, 1.1)]),
        ("hip_adduction_r", 0.0, vec![(0.04, w, 0.3)]),
        ("hip_flexion_r", 0.05, vec![(0.35, w, 0.0)]),
        ("knee_angle_r", -0.35, vec![(0.30, w, 2.1), (0.04, 2.0 * w, 0.5)]),
        ("ankle_rotation_r", 0.0, vec![(0.03, w, 0.8)]),
        ("ankle_inversion_r", 0.0, vec![(0.03, w, 1.9)]),
        ("ankle_angle_r", 0.02, vec![(0.12, w, 0.8)]),
        ("hip_rotation_l", 0.0, vec![(0.05, w, 1.1 + pi)]),
        ("hip_adduction_l", 0.0, vec![(0.04, w, 0.3 + pi)]),
        ("hip_flexion_l", 0.05, vec![(0.35, w, pi)]),
        ("knee_angle_l", -0.35, vec![(0.30, w, 2.1 + pi), (0.04, 2.0 * w, 0.5)]),
        ("ankle_rotation_l", 0.0, vec![(0.03, w, 0.8 + pi)]),
        ("ankle_inversion_l", 0.0, vec![(0.03, w, 1.9 + pi)]),
        ("ankle_angle_l", 0.02, vec![(0.12, w, 0.8 + pi)]),
    ];
    spec.into_iter()
        .map(|(name, offset, terms)| {
            let coord = model
                .coordinate_index(name)
                .ok_or_else(|| SynthError::UnknownCoordinate(name.to_string()))?;
            Ok(Motion { coord, offset, terms })
        })
        .collect()
}

/// Build the analytic trajectory for a model and option set.
pub fn trajectory(model: &ChainModel, opts: &SynthOptions) -> Result<Trajectory, SynthError> {
    let motions = match opts.kind {
        SynthKind::Standing => Vec::new(),
        SynthKind::Walking => walking_motions(model, opts.cycle_hz)?,
    };
    Ok(Trajectory {
        dof: model.dof(),
        motions,
        kind: opts.kind,
        cycle_hz: opts.cycle_hz,
        body_weight_n: model.total_mass() * 9.80665,
    })
}

/// Ground-truth external wrenches at time `t`, built exactly the way the
/// pipeline builds them (same COP transform and activation threshold).
pub fn ground_truth_wrenches(
    model: &ChainModel,
    traj: &Trajectory,
    opts: &SynthOptions,
    t: f64,
) -> Result<Vec<ExternalWrench>, SynthError> {
    let (q, _, _) = traj.state(t);
    let fk = model.forward_kinematics(&q)?;
    let mut wrenches = Vec::with_capacity(2);
    for (side, foot, mount) in [
        (Side::Left, &opts.left_foot, &opts.mount_left),
        (Side::Right, &opts.right_foot, &opts.mount_right),
    ] {
        let seg = model
            .segment_index(foot)
            .ok_or_else(|| SynthError::UnknownSegment(foot.clone()))?;
        let (f, cop) = traj.insole(side, t);
        let sample =
            crate::streams::InsoleSample { t, side, normal_force: f, cop };
        let p = transform_cop(&sample, &fk[seg], mount);
        wrenches.push(build_wrench(&sample, foot, p, opts.force_threshold_n));
    }
    Ok(wrenches)
}

/// Generated session plus the quantities a config needs.
pub struct SynthOutput {
    pub session: Session,
    pub body_weight_n: f64,
    pub trajectory: Trajectory,
}

/// Render a synthetic session: per-sensor orientations from FK, insole
/// bursts with tick-based stamps, and `refq`/`reftau` ground truth.
///
/// The first burst carries one record per side at zero latency, so the
/// default first-burst sync anchors reproduce the true sample times exactly;
/// later bursts arrive with transport latency.
pub fn generate(model: &ChainModel, opts: &SynthOptions) -> Result<SynthOutput, SynthError> {
    let traj = trajectory(model, opts)?;
    let n = (opts.duration_s * opts.rate_hz).round() as usize;
    let dt = 1.0 / opts.rate_hz;
    let mut records = Vec::new();
    let mut pending_insole: Vec<(i64, f64)> = Vec::new(); // (tick, sample t)

    let frames: Vec<(String, usize)> = model
        .mapping
        .frames()
        .map(|f| (f.to_string(), model.segment_index(model.mapping.segment_for(f).unwrap()).unwrap()))
        .collect();

    let mut flush_insole = |records: &mut Vec<Record>, pending: &mut Vec<(i64, f64)>, arrival: f64| {
        for &(tick, ts) in pending.iter() {
            for side in [Side::Left, Side::Right] {
                let (f, cop) = traj.insole(side, ts);
                records.push(Record::Insole {
                    arrival_t: arrival,
                    rec: InsoleRecord { side, tick, normal_force: f, cop },
                });
            }
        }
        pending.clear();
    };

    for k in 0..n {
        let t = k as f64 * dt;
        let (q, qd, qdd) = traj.state(t);
        let fk = model.forward_kinematics(&q)?;
        for (frame, seg) in &frames {
            records.push(Record::Orient(OrientationSample {
                t,
                frame: frame.clone(),
                quat: fk[*seg].rotation,
            }));
        }

        pending_insole.push((k as i64, t));
        if k == 0 {
            // Anchor burst: both sides, zero latency.
            flush_insole(&mut records, &mut pending_insole, t);
        } else if pending_insole.len() >= opts.burst_len {
            let arrival = t + opts.burst_latency_s;
            flush_insole(&mut records, &mut pending_insole, arrival);
        }

        records.push(Record::RefQ { t, values: q.iter().copied().collect() });
        let wrenches = ground_truth_wrenches(model, &traj, opts, t)?;
        let tau = rne(model, &q, &qd, &qdd, &wrenches)?;
        records.push(Record::RefTau { t, values: tau.iter().copied().collect() });
    }
    if !pending_insole.is_empty() {
        let arrival = (n - 1) as f64 * dt + opts.burst_latency_s;
        flush_insole(&mut records, &mut pending_insole, arrival);
    }

    // Arrival order, stable for equal stamps.
    let mut indexed: Vec<(usize, Record)> = records.into_iter().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| a.stamp().total_cmp(&b.stamp()).then(ia.cmp(ib)));
    let session = Session { records: indexed.into_iter().map(|(_, r)| r).collect() };

    Ok(SynthOutput { session, body_weight_n: traj.body_weight_n, trajectory: traj })
}
