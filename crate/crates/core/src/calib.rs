//! Static sensor-to-segment calibration.
//!
//! From a short standing capture, each sensor's orientation samples are
//! averaged (dominant eigenvector of the quaternion outer-product
//! accumulator) and combined with the model's default-pose forward
//! kinematics into a fixed sensor-to-segment rotation plus a heading
//! correction about the global up axis. Applying the calibration to the
//! averaged samples reproduces the default-pose segment orientations
//! exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DVector, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::model::ChainModel;
use crate::streams::OrientationSample;

#[derive(Debug, Clone, PartialEq)]
pub enum CalibError {
    EmptySamples,
    NotUnit { norm: f64 },
    /// Two equal dominant eigenvalues: the average is not unique.
    AmbiguousAverage,
    MissingSensor(String),
    UnknownFrame(String),
    /// The reference sensor's forward axis is too close to vertical to
    /// extract a yaw.
    DegenerateHeading,
    Io(String),
    Parse(String),
    Model(String),
}

impl fmt::Display for CalibError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibError::EmptySamples => write!(f, "no samples to average"),
            CalibError::NotUnit { norm } => write!(f, "quaternion norm {norm:.9} not unit"),
            CalibError::AmbiguousAverage => {
                write!(f, "ambiguous average: two equal dominant eigenvalues")
            }
            CalibError::MissingSensor(s) => write!(f, "no calibration frames for sensor '{s}'"),
            CalibError::UnknownFrame(s) => write!(f, "frame '{s}' not in model mapping"),
            CalibError::DegenerateHeading => write!(f, "heading reference axis near vertical"),
            CalibError::Io(m) => write!(f, "calibration io error: {m}"),
            CalibError::Parse(m) => write!(f, "calibration parse error: {m}"),
            CalibError::Model(m) => write!(f, "calibration model error: {m}"),
        }
    }
}

impl std::error::Error for CalibError {}

/// Average of unit quaternions: the maximizer of `sum (q^T q_i)^2`, i.e. the
/// dominant eigenvector of `M = sum q_i q_i^T`. Sign-flip invariant; the
/// returned quaternion has non-negative scalar part.
pub fn average_quaternions(
    samples: &[UnitQuaternion<f64>],
) -> Result<UnitQuaternion<f64>, CalibError> {
    if samples.is_empty() {
        return Err(CalibError::EmptySamples);
    }
    let mut m = Matrix4::<f64>::zeros();
    for q in samples {
        let q = q.quaternion();
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(CalibError::NotUnit { norm: q.norm() });
        }
        let v = Vector4::new(q.w, q.i, q.j, q.k);
        m += v * v.transpose();
    }
    m /= samples.len() as f64;
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (top, second) = (order[0], order[1]);
    if (eig.eigenvalues[top] - eig.eigenvalues[second]).abs() < 1e-12 {
        return Err(CalibError::AmbiguousAverage);
    }
    let v = eig.eigenvectors.column(top);
    let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
    let q = Quaternion::new(sign * v[0], sign * v[1], sign * v[2], sign * v[3]);
    Ok(UnitQuaternion::from_quaternion(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadingMode {
    /// One yaw correction from the reference sensor, applied to all.
    Global,
    /// An individual yaw correction per sensor.
    PerSensor,
}

/// Heading correction(s) about the global up axis (+z), radians.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadingCorrection {
    Global(f64),
    PerSensor(BTreeMap<String, f64>),
}

impl HeadingCorrection {
    pub fn for_frame(&self, frame: &str) -> f64 {
        match self {
            HeadingCorrection::Global(h) => *h,
            HeadingCorrection::PerSensor(map) => map.get(frame).copied().unwrap_or(0.0),
        }
    }
}

/// Fixed per-sensor rotations plus heading correction. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// Per-sensor offset: averaged calibration-pose sensor rotation relative
    /// to the default-pose segment rotation (after heading removal).
    pub offsets: BTreeMap<String, UnitQuaternion<f64>>,
    pub heading: HeadingCorrection,
}

impl CalibrationSet {
    /// Identity calibration for the given frames (sensors assumed mounted
    /// aligned with their segments, no heading error).
    pub fn identity<I: IntoIterator<Item = String>>(frames: I) -> Self {
        CalibrationSet {
            offsets: frames.into_iter().map(|f| (f, UnitQuaternion::identity())).collect(),
            heading: HeadingCorrection::Global(0.0),
        }
    }

    /// Map a measured sensor orientation to the segment orientation:
    /// `R_segment = Rz(heading) * R_measured * offset^-1`.
    pub fn apply(
        &self,
        frame: &str,
        measured: &UnitQuaternion<f64>,
    ) -> Result<UnitQuaternion<f64>, CalibError> {
        let offset = self
            .offsets
            .get(frame)
            .ok_or_else(|| CalibError::MissingSensor(frame.to_string()))?;
        let hz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.heading.for_frame(frame));
        Ok(hz * measured * offset.inverse())
    }

    pub fn frames(&self) -> impl Iterator<Item = &str> {
        self.offsets.keys().map(|s| s.as_str())
    }
}

/// Options for [`calibrate`].
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub heading_mode: HeadingMode,
    /// Sensor anchoring the heading in global mode.
    pub reference_frame: String,
    /// Frames captured per sensor; fewer are accepted (>= 1 required).
    pub frames: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            heading_mode: HeadingMode::Global,
            reference_frame: "pelvis_imu".into(),
            frames: 10,
        }
    }
}

/// Yaw of the rotation `e` about global up, extracted from where it sends the
/// forward axis (+x).
fn yaw_of(e: &UnitQuaternion<f64>) -> Result<f64, CalibError> {
    let fwd = e * Vector3::x();
    let horiz = (fwd.x * fwd.x + fwd.y * fwd.y).sqrt();
    if horiz < 1e-9 {
        return Err(CalibError::DegenerateHeading);
    }
    Ok(fwd.y.atan2(fwd.x))
}

/// Build a [`CalibrationSet`] from per-sensor calibration frames captured in
/// the default pose.
///
/// For each sensor: `offset = R_segment(default)^-1 * Rz(heading) * R_avg`,
/// so that `apply` maps the averaged sample back onto the default-pose
/// segment orientation exactly. The heading correction is the yaw aligning
/// the reference sensor (or each sensor, in per-sensor mode) with the
/// model's forward axis.
pub fn calibrate(
    model: &ChainModel,
    default_pose_q: &DVector<f64>,
    frames: &BTreeMap<String, Vec<OrientationSample>>,
    opts: &CalibrationOptions,
) -> Result<CalibrationSet, CalibError> {
    let fk = model
        .forward_kinematics(default_pose_q)
        .map_err(|e| CalibError::Model(e.to_string()))?;

    let mut averaged: BTreeMap<String, UnitQuaternion<f64>> = BTreeMap::new();
    let mut segment_rot: BTreeMap<String, UnitQuaternion<f64>> = BTreeMap::new();
    for frame in model.mapping.frames() {
        let samples = frames
            .get(frame)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| CalibError::MissingSensor(frame.to_string()))?;
        let quats: Vec<UnitQuaternion<f64>> = samples.iter().map(|s| s.quat).collect();
        averaged.insert(frame.to_string(), average_quaternions(&quats)?);
        let segment = model.mapping.segment_for(frame).unwrap();
        let idx = model
            .segment_index(segment)
            .ok_or_else(|| CalibError::Model(format!("unknown segment '{segment}'")))?;
        segment_rot.insert(frame.to_string(), fk[idx].rotation);
    }
    for frame in frames.keys() {
        if model.mapping.segment_for(frame).is_none() {
            return Err(CalibError::UnknownFrame(frame.clone()));
        }
    }

    // Heading: discrepancy between measured and default-pose orientation,
    // yaw-projected. Stored as the correction, i.e. minus the error.
    let heading = match opts.heading_mode {
        HeadingMode::Global => {
            let r = &opts.reference_frame;
            let avg = averaged.get(r).ok_or_else(|| CalibError::MissingSensor(r.clone()))?;
            let e = avg * segment_rot[r].inverse();
            HeadingCorrection::Global(-yaw_of(&e)?)
        }
        HeadingMode::PerSensor => {
            let mut map = BTreeMap::new();
            for (frame, avg) in &averaged {
                let e = avg * segment_rot[frame].inverse();
                map.insert(frame.clone(), -yaw_of(&e)?);
            }
            HeadingCorrection::PerSensor(map)
        }
    };

    let mut offsets = BTreeMap::new();
    for (frame, avg) in &averaged {
        let h = heading.for_frame(frame);
        let hz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), h);
        offsets.insert(frame.clone(), segment_rot[frame].inverse() * hz * avg);
    }

    Ok(CalibrationSet { offsets, heading })
}

// --- persistence -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CalibFile {
    heading_mode: HeadingMode,
    /// Global heading, rad (global mode).
    heading: Option<f64>,
    /// Per-sensor headings, rad (per-sensor mode).
    heading_per_sensor: Option<BTreeMap<String, f64>>,
    /// Sensor name -> quaternion [w, x, y, z].
    offsets: BTreeMap<String, [f64; 4]>,
}

impl CalibrationSet {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), CalibError> {
        let file = CalibFile {
            heading_mode: match self.heading {
                HeadingCorrection::Global(_) => HeadingMode::Global,
                HeadingCorrection::PerSensor(_) => HeadingMode::PerSensor,
            },
            heading: match &self.heading {
                HeadingCorrection::Global(h) => Some(*h),
                _ => None,
            },
            heading_per_sensor: match &self.heading {
                HeadingCorrection::PerSensor(m) => Some(m.clone()),
                _ => None,
            },
            offsets: self
                .offsets
                .iter()
                .map(|(k, q)| {
                    let q = q.quaternion();
                    (k.clone(), [q.w, q.i, q.j, q.k])
                })
                .collect(),
        };
        let text = toml::to_string_pretty(&file).map_err(|e| CalibError::Parse(e.to_string()))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| CalibError::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<CalibrationSet, CalibError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| CalibError::Io(format!("{}: {e}", path.as_ref().display())))?;
        let file: CalibFile =
            toml::from_str(&text).map_err(|e| CalibError::Parse(e.to_string()))?;
        let heading = match file.heading_mode {
            HeadingMode::Global => HeadingCorrection::Global(file.heading.unwrap_or(0.0)),
            HeadingMode::PerSensor => {
                HeadingCorrection::PerSensor(file.heading_per_sensor.unwrap_or_default())
            }
        };
        let mut offsets = BTreeMap::new();
        for (k, [w, x, y, z]) in file.offsets {
            let q = Quaternion::new(w, x, y, z);
            if (q.norm() - 1.0).abs() > 1e-9 {
                return Err(CalibError::NotUnit { norm: q.norm() });
            }
            offsets.insert(k, UnitQuaternion::from_quaternion(q));
        }
        Ok(CalibrationSet { offsets, heading })
    }
}
