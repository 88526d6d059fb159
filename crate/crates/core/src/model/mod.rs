//! Kinematic/dynamic/muscular chain model: rigid-body tree, generalized
//! coordinates, muscles with polynomial moment arms, and the sensor-frame
//! mapping used by calibration and transform broadcasting.
//!
//! Models are immutable after [`load_model`] and safe to share across all
//! pipeline stages.

mod compiled;
mod schema;

pub use schema::load_model;

pub(crate) use compiled::{CompiledChain, LinkDof};

#[cfg(test)]
pub(crate) fn load_model_for_tests(src: &str) -> ChainModel {
    schema::load_model_str(src).expect("test model must load")
}

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Unit, UnitQuaternion, Vector3};

/// Name of the implicit world body a root joint attaches to.
pub const GROUND: &str = "ground";

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Io(String),
    Parse(String),
    /// Validation failure; the message names the offending entity.
    Validation(String),
    DimensionMismatch { expected: usize, got: usize },
    NonFinite(String),
    UnknownSegment(String),
    UnmappedSegment(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Io(m) => write!(f, "model io error: {m}"),
            ModelError::Parse(m) => write!(f, "model parse error: {m}"),
            ModelError::Validation(m) => write!(f, "model validation error: {m}"),
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "coordinate vector length {got}, model has {expected}")
            }
            ModelError::NonFinite(m) => write!(f, "non-finite value in {m}"),
            ModelError::UnknownSegment(s) => write!(f, "unknown segment '{s}'"),
            ModelError::UnmappedSegment(s) => write!(f, "segment '{s}' has no mapping entry"),
        }
    }
}

impl std::error::Error for ModelError {}

/// Rigid segment with inertial parameters expressed in the segment frame.
#[derive(Debug, Clone)]
pub struct SegmentSpec {
    pub name: String,
    /// kg
    pub mass: f64,
    /// Center of mass, m, segment frame.
    pub com: Vector3<f64>,
    /// Inertia tensor about the COM, kg m^2, segment frame.
    pub inertia: Matrix3<f64>,
}

/// Joint kinds supported by the tree.
///
/// Ball joints are parameterized as intrinsic Z-X-Y Euler angles; the free
/// joint adds three translations, with coordinates laid out as
/// `[rz, rx, ry, tx, ty, tz]`.
#[derive(Debug, Clone)]
pub enum JointKind {
    Revolute { axis: Unit<Vector3<f64>> },
    Ball,
    Free,
}

impl JointKind {
    pub fn dof(&self) -> usize {
        match self {
            JointKind::Revolute { .. } => 1,
            JointKind::Ball => 3,
            JointKind::Free => 6,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            JointKind::Revolute { .. } => "revolute",
            JointKind::Ball => "ball",
            JointKind::Free => "free",
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    /// Parent segment name, or [`GROUND`] for the tree root.
    pub parent: String,
    pub child: String,
    pub parent_offset: Isometry3<f64>,
    pub child_offset: Isometry3<f64>,
}

/// One term of a multivariate polynomial in the generalized coordinates:
/// `coeff * prod(q[i]^p)` over the (coordinate index, power) pairs.
#[derive(Debug, Clone)]
pub struct PolyTerm {
    pub coeff: f64,
    pub exponents: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, Default)]
pub struct Polynomial {
    pub terms: Vec<PolyTerm>,
}

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial { terms: vec![PolyTerm { coeff: c, exponents: Vec::new() }] }
    }

    pub fn eval(&self, q: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.exponents
                    .iter()
                    .fold(t.coeff, |acc, &(i, p)| acc * q[i].powi(p as i32))
            })
            .sum()
    }
}

/// Muscle as an ideal force generator `F = a * f_max` with per-coordinate
/// moment-arm polynomials (meters).
#[derive(Debug, Clone)]
pub struct MuscleSpec {
    pub name: String,
    /// Max isometric force, N.
    pub f_max: f64,
    /// (coordinate index, moment-arm polynomial).
    pub moment_arms: Vec<(usize, Polynomial)>,
}

/// Bijective mapping external sensor/broadcast frame name <-> segment.
#[derive(Debug, Clone, Default)]
pub struct JointMapping {
    frame_to_segment: BTreeMap<String, String>,
    segment_to_frame: BTreeMap<String, String>,
    /// Coordinate subset actuated at each external frame's attachment joint.
    coordinates: BTreeMap<String, Vec<String>>,
}

impl JointMapping {
    pub fn new(pairs: Vec<(String, String, Vec<String>)>) -> Result<Self, ModelError> {
        let mut m = JointMapping::default();
        for (frame, segment, coords) in pairs {
            if m.frame_to_segment.contains_key(&frame) {
                return Err(ModelError::Validation(format!(
                    "mapping declares frame '{frame}' twice"
                )));
            }
            if m.segment_to_frame.contains_key(&segment) {
                return Err(ModelError::Validation(format!(
                    "mapping declares segment '{segment}' twice"
                )));
            }
            m.segment_to_frame.insert(segment.clone(), frame.clone());
            m.coordinates.insert(frame.clone(), coords);
            m.frame_to_segment.insert(frame, segment);
        }
        Ok(m)
    }

    pub fn segment_for(&self, frame: &str) -> Option<&str> {
        self.frame_to_segment.get(frame).map(|s| s.as_str())
    }

    pub fn frame_for(&self, segment: &str) -> Option<&str> {
        self.segment_to_frame.get(segment).map(|s| s.as_str())
    }

    pub fn coordinates_for(&self, frame: &str) -> Option<&[String]> {
        self.coordinates.get(frame).map(|v| v.as_slice())
    }

    /// External frame names in deterministic (sorted) order.
    pub fn frames(&self) -> impl Iterator<Item = &str> {
        self.frame_to_segment.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.frame_to_segment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_to_segment.is_empty()
    }
}

/// The full chain model. Immutable after load.
#[derive(Debug, Clone)]
pub struct ChainModel {
    pub name: String,
    pub segments: Vec<SegmentSpec>,
    pub joints: Vec<JointSpec>,
    /// Ordered generalized-coordinate names; the layout of `q`.
    pub coordinates: Vec<String>,
    pub muscles: Vec<MuscleSpec>,
    /// m/s^2, ground frame.
    pub gravity: Vector3<f64>,
    pub mapping: JointMapping,
    /// Declared coordinate ranges (rad | m); absent coordinates default to
    /// +/- pi.
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub(crate) compiled: CompiledChain,
}

impl ChainModel {
    pub fn dof(&self) -> usize {
        self.coordinates.len()
    }

    pub fn coordinate_index(&self, name: &str) -> Option<usize> {
        self.coordinates.iter().position(|c| c == name)
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn muscle_index(&self, name: &str) -> Option<usize> {
        self.muscles.iter().position(|m| m.name == name)
    }

    pub fn total_mass(&self) -> f64 {
        self.segments.iter().map(|s| s.mass).sum()
    }

    /// Declared range of a coordinate, defaulting to +/- pi.
    pub fn coordinate_range(&self, name: &str) -> (f64, f64) {
        self.ranges
            .get(name)
            .copied()
            .unwrap_or((-std::f64::consts::PI, std::f64::consts::PI))
    }

    /// Indices of coordinates that are translational (free-joint tx/ty/tz).
    pub fn translational_coordinates(&self) -> Vec<usize> {
        self.compiled
            .links
            .iter()
            .filter(|l| matches!(l.dof, LinkDof::Prismatic(_)))
            .map(|l| l.coord)
            .collect()
    }

    /// Indices of rotational coordinates (everything IK can observe).
    pub fn rotational_coordinates(&self) -> Vec<usize> {
        self.compiled
            .links
            .iter()
            .filter(|l| matches!(l.dof, LinkDof::RevoluteLocal(_)))
            .map(|l| l.coord)
            .collect()
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<(), ModelError> {
        if q.len() != self.dof() {
            return Err(ModelError::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("coordinate vector".into()));
        }
        Ok(())
    }

    /// Ground-frame rigid transform of every segment at configuration `q`,
    /// indexed like `self.segments`.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Vec<Isometry3<f64>>, ModelError> {
        self.check_q(q)?;
        Ok(self.compiled.segment_transforms(q))
    }

    /// Ground-frame rotation of a single segment at `q`.
    pub fn segment_rotation(
        &self,
        q: &DVector<f64>,
        segment: &str,
    ) -> Result<UnitQuaternion<f64>, ModelError> {
        let idx = self
            .segment_index(segment)
            .ok_or_else(|| ModelError::UnknownSegment(segment.to_string()))?;
        Ok(self.forward_kinematics(q)?[idx].rotation)
    }

    /// Moment-arm matrix R, coordinates x muscles, meters. Entries without a
    /// declared polynomial are zero.
    pub fn moment_arms(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(self.dof(), self.muscles.len());
        for (mi, muscle) in self.muscles.iter().enumerate() {
            for (ci, poly) in &muscle.moment_arms {
                r[(*ci, mi)] = poly.eval(q);
            }
        }
        r
    }

    /// Max isometric forces as a vector, muscle order.
    pub fn f_max_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.muscles.len(), self.muscles.iter().map(|m| m.f_max))
    }

    pub(crate) fn compiled(&self) -> &CompiledChain {
        &self.compiled
    }
}

#[cfg(test)]
mod tests {
    use super::schema::tests_support::write_model;
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Translation3;

    pub(crate) fn demo_model_path() -> String {
        format!("{}/models/demo_lowerbody23.toml", env!("CARGO_MANIFEST_DIR"))
    }

    const SINGLE_REVOLUTE: &str = r#"
name = "pendulum"
coordinates = ["swing"]
gravity = [0.0, -9.80665, 0.0]

[[segments]]
name = "link"
mass = 2.0
com = [0.0, -0.5, 0.0]
inertia = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]

[[joints]]
name = "pivot"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "ground"
child = "link"
"#;

    #[test]
    fn minimal_tree_loads() {
        let path = write_model(SINGLE_REVOLUTE);
        let model = load_model(path.path()).unwrap();
        assert_eq!(model.dof(), 1);
        assert_eq!(model.segments.len(), 1);
        assert_eq!(model.rotational_coordinates(), vec![0]);
        assert!(model.translational_coordinates().is_empty());
    }

    #[test]
    fn demo_model_has_23_coordinates() {
        let model = load_model(demo_model_path()).unwrap();
        assert_eq!(model.dof(), 23);
        assert_eq!(model.segments.len(), 8);
        assert_eq!(model.mapping.len(), 8);
        assert_eq!(model.translational_coordinates().len(), 3);
        // One free joint at the root.
        let free: Vec<_> =
            model.joints.iter().filter(|j| matches!(j.kind, JointKind::Free)).collect();
        assert_eq!(free.len(), 1);
        assert_eq!(free[0].parent, GROUND);
    }

    #[test]
    fn fk_zero_pose_is_offset_composition() {
        let model = load_model(demo_model_path()).unwrap();
        let q = DVector::zeros(model.dof());
        let tf = model.forward_kinematics(&q).unwrap();
        // Walk the joint list composing fixed offsets only.
        for joint in &model.joints {
            let child = model.segment_index(&joint.child).unwrap();
            let parent_tf = if joint.parent == GROUND {
                Isometry3::identity()
            } else {
                tf[model.segment_index(&joint.parent).unwrap()]
            };
            let expected = parent_tf * joint.parent_offset * joint.child_offset;
            assert_relative_eq!(
                tf[child].to_homogeneous(),
                expected.to_homogeneous(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn fk_quarter_turn_moves_child_offset() {
        let src = r#"
name = "one"
coordinates = ["j"]

[[segments]]
name = "child"
mass = 1.0
com = [0.0, 0.0, 0.0]
inertia = [[0.0,0.0,0.0],[0.0,0.0,0.0],[0.0,0.0,0.0]]

[[joints]]
name = "j"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "ground"
child = "child"
child_offset = { translation = [1.0, 0.0, 0.0] }
"#;
        let path = write_model(src);
        let model = load_model(path.path()).unwrap();
        let q = DVector::from_element(1, std::f64::consts::FRAC_PI_2);
        let tf = model.forward_kinematics(&q).unwrap();
        let origin = tf[0].translation.vector;
        assert_relative_eq!(origin, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    /// Independent FK oracle: compose 4x4 homogeneous matrices directly from
    /// the joint definitions, never touching the compiled chain.
    fn fk_oracle(model: &ChainModel, q: &DVector<f64>) -> Vec<nalgebra::Matrix4<f64>> {
        use nalgebra::Matrix4;
        fn iso_mat(iso: &Isometry3<f64>) -> Matrix4<f64> {
            iso.to_homogeneous()
        }
        fn rot_about(axis: Vector3<f64>, angle: f64) -> Matrix4<f64> {
            Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle),
            )
            .to_homogeneous()
        }
        let mut out = vec![Matrix4::identity(); model.segments.len()];
        let mut done = vec![false; model.segments.len()];
        // Coordinate offsets per joint, file order.
        let mut offsets = Vec::new();
        let mut acc = 0;
        for j in &model.joints {
            offsets.push(acc);
            acc += j.kind.dof();
        }
        let mut remaining: Vec<usize> = (0..model.joints.len()).collect();
        while !remaining.is_empty() {
            let mut progressed = false;
            remaining.retain(|&ji| {
                let joint = &model.joints[ji];
                let parent_mat = if joint.parent == GROUND {
                    Some(Matrix4::identity())
                } else {
                    let pi = model.segment_index(&joint.parent).unwrap();
                    if done[pi] {
                        Some(out[pi])
                    } else {
                        None
                    }
                };
                let Some(parent_mat) = parent_mat else { return true };
                let o = offsets[ji];
                let motion = match &joint.kind {
                    JointKind::Revolute { axis } => rot_about(axis.into_inner(), q[o]),
                    JointKind::Ball => {
                        rot_about(Vector3::z(), q[o])
                            * rot_about(Vector3::x(), q[o + 1])
                            * rot_about(Vector3::y(), q[o + 2])
                    }
                    JointKind::Free => {
                        let mut t = Matrix4::identity();
                        t[(0, 3)] = q[o + 3];
                        t[(1, 3)] = q[o + 4];
                        t[(2, 3)] = q[o + 5];
                        t * rot_about(Vector3::z(), q[o])
                            * rot_about(Vector3::x(), q[o + 1])
                            * rot_about(Vector3::y(), q[o + 2])
                    }
                };
                let ci = model.segment_index(&joint.child).unwrap();
                out[ci] =
                    parent_mat * iso_mat(&joint.parent_offset) * motion * iso_mat(&joint.child_offset);
                done[ci] = true;
                progressed = true;
                false
            });
            assert!(progressed, "oracle stuck; malformed tree");
        }
        out
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn fk_matches_homogeneous_matrix_oracle() {
        const FIVE_JOINT: &str = r#"
name = "chain5"
coordinates = ["rz0", "rx0", "ry0", "tx0", "ty0", "tz0", "b1z", "b1x", "b1y", "r2", "r3", "r4"]

[[segments]]
name = "s0"
mass = 1.0
com = [0.0, 0.0, 0.0]
inertia = [[0.01,0.0,0.0],[0.0,0.01,0.0],[0.0,0.0,0.01]]
[[segments]]
name = "s1"
mass = 1.0
com = [0.0, 0.0, 0.0]
inertia = [[0.01,0.0,0.0],[0.0,0.01,0.0],[0.0,0.0,0.01]]
[[segments]]
name = "s2"
mass = 1.0
com = [0.0, 0.0, 0.0]
inertia = [[0.01,0.0,0.0],[0.0,0.01,0.0],[0.0,0.0,0.01]]
[[segments]]
name = "s3"
mass = 1.0
com = [0.0, 0.0, 0.0]
inertia = [[0.01,0.0,0.0],[0.0,0.01,0.0],[0.0,0.0,0.01]]
[[segments]]
name = "s4"
mass = 1.0
com = [0.0, 0.0, 0.0]
inertia = [[0.01,0.0,0.0],[0.0,0.01,0.0],[0.0,0.0,0.01]]

[[joints]]
name = "root"
kind = "free"
parent = "ground"
child = "s0"
parent_offset = { translation = [0.1, 0.2, 0.3], rotation = [0.9238795325112867, 0.0, 0.0, 0.3826834323650898] }

[[joints]]
name = "j1"
kind = "ball"
parent = "s0"
child = "s1"
parent_offset = { translation = [0.0, 0.0, -0.4] }
child_offset = { translation = [0.05, 0.0, 0.0] }

[[joints]]
name = "j2"
kind = "revolute"
axis = [0.0, 1.0, 0.0]
parent = "s1"
child = "s2"
parent_offset = { translation = [0.0, 0.1, -0.3] }

[[joints]]
name = "j3"
kind = "revolute"
axis = [1.0, 0.0, 0.0]
parent = "s2"
child = "s3"
child_offset = { translation = [0.0, 0.0, -0.2], rotation = [0.7071067811865476, 0.7071067811865476, 0.0, 0.0] }

[[joints]]
name = "j4"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "s3"
child = "s4"
parent_offset = { translation = [0.2, 0.0, 0.0] }
"#;
        let path = write_model(FIVE_JOINT);
        let model = load_model(path.path()).unwrap();
        let mut state = 42u64;
        for _ in 0..20 {
            let q = DVector::from_iterator(model.dof(), (0..model.dof()).map(|_| lcg(&mut state)));
            let tf = model.forward_kinematics(&q).unwrap();
            let oracle = fk_oracle(&model, &q);
            for (i, iso) in tf.iter().enumerate() {
                let diff = (iso.to_homogeneous() - oracle[i]).abs().max();
                assert!(diff < 1e-12, "segment {i}: max abs error {diff}");
            }
        }
    }

    #[test]
    fn fk_composition_invariant() {
        let model = load_model(demo_model_path()).unwrap();
        let mut state = 7u64;
        for _ in 0..10 {
            let q = DVector::from_iterator(model.dof(), (0..model.dof()).map(|_| lcg(&mut state)));
            let tf = model.forward_kinematics(&q).unwrap();
            // For every joint: child = parent * local(q_joint).
            let mut acc = 0;
            for joint in &model.joints {
                let o = acc;
                acc += joint.kind.dof();
                let parent_tf = if joint.parent == GROUND {
                    Isometry3::identity()
                } else {
                    tf[model.segment_index(&joint.parent).unwrap()]
                };
                let rot =
                    |axis: Vector3<f64>, a: f64| UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), a);
                let motion: Isometry3<f64> = match &joint.kind {
                    JointKind::Revolute { axis } => {
                        Isometry3::from_parts(Translation3::identity(), rot(axis.into_inner(), q[o]))
                    }
                    JointKind::Ball => Isometry3::from_parts(
                        Translation3::identity(),
                        rot(Vector3::z(), q[o]) * rot(Vector3::x(), q[o + 1]) * rot(Vector3::y(), q[o + 2]),
                    ),
                    JointKind::Free => Isometry3::from_parts(
                        Translation3::new(q[o + 3], q[o + 4], q[o + 5]),
                        rot(Vector3::z(), q[o]) * rot(Vector3::x(), q[o + 1]) * rot(Vector3::y(), q[o + 2]),
                    ),
                };
                let expected = parent_tf * joint.parent_offset * motion * joint.child_offset;
                let got = tf[model.segment_index(&joint.child).unwrap()];
                let diff = (got.to_homogeneous() - expected.to_homogeneous()).abs().max();
                assert!(diff < 1e-12, "joint {}: error {diff}", joint.name);
            }
        }
    }

    #[test]
    fn fk_continuity_in_q() {
        let model = load_model(demo_model_path()).unwrap();
        let mut state = 99u64;
        let q0 = DVector::from_iterator(model.dof(), (0..model.dof()).map(|_| 0.3 * lcg(&mut state)));
        let base = model.forward_kinematics(&q0).unwrap();
        for scale in [1e-3, 1e-5, 1e-7] {
            let dq = DVector::from_iterator(
                model.dof(),
                (0..model.dof()).map(|_| scale * lcg(&mut state)),
            );
            let tf = model.forward_kinematics(&(q0.clone() + dq)).unwrap();
            let max_shift = tf
                .iter()
                .zip(&base)
                .map(|(a, b)| (a.translation.vector - b.translation.vector).norm())
                .fold(0.0, f64::max);
            // Translation response is Lipschitz in q: shrinking the step by
            // 100x must shrink the shift comparably.
            assert!(max_shift < scale * 100.0, "scale {scale}: shift {max_shift}");
        }
    }

    #[test]
    fn moment_arm_constant_and_linear() {
        let model = load_model(demo_model_path()).unwrap();
        let ankle = model.coordinate_index("ankle_angle_r").unwrap();
        let sol = model.muscle_index("soleus_r").unwrap();
        let ta = model.muscle_index("tib_ant_r").unwrap();

        let mut q = DVector::zeros(model.dof());
        let r0 = model.moment_arms(&q);
        assert_eq!(r0.nrows(), 23);
        assert_eq!(r0.ncols(), model.muscles.len());

        // soleus: constant -0.048 about the ankle regardless of q.
        q[ankle] = 0.7;
        let r1 = model.moment_arms(&q);
        assert_relative_eq!(r0[(ankle, sol)], -0.048, epsilon = 1e-15);
        assert_relative_eq!(r1[(ankle, sol)], -0.048, epsilon = 1e-15);

        // tibialis anterior carries a linear term: 0.040 - 0.006 q.
        assert_relative_eq!(r0[(ankle, ta)], 0.040, epsilon = 1e-15);
        assert_relative_eq!(r1[(ankle, ta)], 0.040 - 0.006 * 0.7, epsilon = 1e-15);

        // Zero where no polynomial is declared.
        let pelvis_tx = model.coordinate_index("pelvis_tx").unwrap();
        assert_eq!(r0[(pelvis_tx, sol)], 0.0);
    }

    #[test]
    fn moment_arm_matches_negative_length_gradient() {
        // Author a musculotendon length polynomial L(q) and its analytic
        // moment arm R = -dL/dq; check R against a central finite difference
        // of L. Exercises the polynomial evaluator on multi-term input.
        let l_poly = Polynomial {
            terms: vec![
                PolyTerm { coeff: 0.30, exponents: vec![] },
                PolyTerm { coeff: -0.048, exponents: vec![(0, 1)] },
                PolyTerm { coeff: 0.011, exponents: vec![(0, 2)] },
                PolyTerm { coeff: -0.002, exponents: vec![(0, 3)] },
            ],
        };
        // R = -dL/dq = 0.048 - 0.022 q + 0.006 q^2
        let r_poly = Polynomial {
            terms: vec![
                PolyTerm { coeff: 0.048, exponents: vec![] },
                PolyTerm { coeff: -0.022, exponents: vec![(0, 1)] },
                PolyTerm { coeff: 0.006, exponents: vec![(0, 2)] },
            ],
        };
        let h = 1e-5;
        for i in -8..=8 {
            let q0 = 0.1 * i as f64;
            let qp = DVector::from_element(1, q0 + h);
            let qm = DVector::from_element(1, q0 - h);
            let fd = -(l_poly.eval(&qp) - l_poly.eval(&qm)) / (2.0 * h);
            let r = r_poly.eval(&DVector::from_element(1, q0));
            assert!((fd - r).abs() / r.abs().max(1e-9) < 1e-6, "q={q0}: fd {fd} vs {r}");
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let path = write_model(SINGLE_REVOLUTE);
        let model = load_model(path.path()).unwrap();
        let err = model.forward_kinematics(&DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { expected: 1, got: 3 }));
    }
}
