//! Inverse dynamics: insole COP transformed into the ground frame, external
//! wrench construction, and generalized joint torques via a two-pass
//! recursive Newton-Euler sweep over the compiled link chain.
//!
//! The ground is rigid and measured forces are applied normal to it
//! (`force = (0, 0, F_n)`, point on the ground plane); gravity enters
//! through the base acceleration.

use std::fmt;

use nalgebra::{DVector, Isometry3, Vector3};

use crate::ik::JointState;
use crate::model::{ChainModel, LinkDof, ModelError};
use crate::streams::InsoleSample;
use crate::telemetry::{Clock, EventLog, EV_BEFORE_ID, EV_TORQUES_DONE};

#[derive(Debug, Clone, PartialEq)]
pub enum IdError {
    DimensionMismatch { expected: usize, got: usize },
    UnknownBody(String),
    Model(String),
    Event(String),
}

impl fmt::Display for IdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdError::DimensionMismatch { expected, got } => {
                write!(f, "vector length {got}, expected {expected}")
            }
            IdError::UnknownBody(b) => write!(f, "external wrench on unknown body '{b}'"),
            IdError::Model(m) => write!(f, "inverse dynamics model error: {m}"),
            IdError::Event(m) => write!(f, "inverse dynamics event error: {m}"),
        }
    }
}

impl std::error::Error for IdError {}

impl From<ModelError> for IdError {
    fn from(e: ModelError) -> Self {
        IdError::Model(e.to_string())
    }
}

/// External force applied at a point of a body, ground frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalWrench {
    pub t: f64,
    /// Segment the force acts on.
    pub body: String,
    pub force: Vector3<f64>,
    /// Application point, ground frame.
    pub point: Vector3<f64>,
    pub active: bool,
}

impl ExternalWrench {
    pub fn inactive(t: f64, body: &str) -> Self {
        ExternalWrench {
            t,
            body: body.to_string(),
            force: Vector3::zeros(),
            point: Vector3::zeros(),
            active: false,
        }
    }
}

/// Generalized joint torques paired with the joint state they were computed
/// from.
#[derive(Debug, Clone)]
pub struct TorqueState {
    pub t: f64,
    /// N m (N for translational coordinates).
    pub tau: DVector<f64>,
    pub joint_state: JointState,
    pub events: EventLog,
}

/// Insole COP lifted into the ground frame and projected onto the ground
/// plane: `p = foot_tf * insole_mount * (cop_x, cop_y, 0)`, then `z := 0`.
pub fn transform_cop(
    sample: &InsoleSample,
    foot_tf: &Isometry3<f64>,
    insole_mount: &Isometry3<f64>,
) -> Vector3<f64> {
    let local = nalgebra::Point3::new(sample.cop.x, sample.cop.y, 0.0);
    let mut p = (foot_tf * insole_mount).transform_point(&local).coords;
    p.z = 0.0;
    p
}

/// Default activation threshold for external wrenches, N.
pub const DEFAULT_FORCE_THRESHOLD_N: f64 = 10.0;

/// Build the ground-normal external wrench for one insole sample. Active iff
/// the normal force reaches `threshold`; inactive wrenches carry zero force.
pub fn build_wrench(
    sample: &InsoleSample,
    body: &str,
    p_global: Vector3<f64>,
    threshold: f64,
) -> ExternalWrench {
    if sample.normal_force >= threshold {
        ExternalWrench {
            t: sample.t,
            body: body.to_string(),
            force: Vector3::new(0.0, 0.0, sample.normal_force),
            point: p_global,
            active: true,
        }
    } else {
        ExternalWrench::inactive(sample.t, body)
    }
}

/// Two-pass recursive Newton-Euler over the compiled chain.
///
/// Outward: propagate angular/linear velocities and accelerations from
/// `(q, qd, qdd)` with gravity folded into the base acceleration. Inward:
/// accumulate forces and moments, subtracting each active external wrench at
/// its application point, and project onto the joint axes.
pub fn rne(
    model: &ChainModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
    wrenches: &[ExternalWrench],
) -> Result<DVector<f64>, IdError> {
    let dof = model.dof();
    for (name, v) in [("q", q), ("qd", qd), ("qdd", qdd)] {
        if v.len() != dof {
            return Err(IdError::DimensionMismatch { expected: dof, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(IdError::Model(format!("non-finite {name}")));
        }
    }
    // External wrenches indexed by owning link.
    let chain = model.compiled();
    let nl = chain.links.len();
    let mut ext: Vec<Vec<&ExternalWrench>> = vec![Vec::new(); nl];
    for w in wrenches {
        let seg = model
            .segment_index(&w.body)
            .ok_or_else(|| IdError::UnknownBody(w.body.clone()))?;
        if w.active {
            ext[chain.segment_link[seg]].push(w);
        }
    }

    let link_tf = chain.link_transforms(q);

    // Outward pass, all quantities in each link's own frame.
    let mut omega = vec![Vector3::zeros(); nl];
    let mut alpha = vec![Vector3::zeros(); nl];
    let mut acc = vec![Vector3::zeros(); nl];
    for (i, link) in chain.links.iter().enumerate() {
        let local = link.local_transform(q[link.coord]);
        let rot_t = local.rotation.inverse();
        let r = local.translation.vector;
        let (w_p, a_p, acc_p) = match link.parent {
            Some(p) => (omega[p], alpha[p], acc[p]),
            // Base: gravity as upward acceleration of the support.
            None => (Vector3::zeros(), Vector3::zeros(), -model.gravity),
        };
        let (dq, ddq) = (qd[link.coord], qdd[link.coord]);
        let carried = rot_t * (acc_p + a_p.cross(&r) + w_p.cross(&w_p.cross(&r)));
        match &link.dof {
            LinkDof::RevoluteLocal(axis) => {
                let a = axis.into_inner();
                omega[i] = rot_t * w_p + a * dq;
                alpha[i] = rot_t * a_p + (rot_t * w_p).cross(&(a * dq)) + a * ddq;
                acc[i] = carried;
            }
            LinkDof::Prismatic(axis) => {
                let a = axis.into_inner();
                omega[i] = rot_t * w_p;
                alpha[i] = rot_t * a_p;
                acc[i] = carried + omega[i].cross(&(a * dq)) * 2.0 + a * ddq;
            }
        }
    }

    // Inward pass: net force/moment each link exerts through its joint,
    // expressed in the link frame, moment about the link origin.
    let mut f = vec![Vector3::zeros(); nl];
    let mut n = vec![Vector3::zeros(); nl];
    for i in (0..nl).rev() {
        let link = &chain.links[i];
        let (mut fi, mut ni) = (f[i], n[i]);
        if let Some(body) = &link.body {
            let c = body.com;
            let a_com = acc[i] + alpha[i].cross(&c) + omega[i].cross(&omega[i].cross(&c));
            let inertial_force = body.mass * a_com;
            let inertial_moment =
                body.inertia * alpha[i] + omega[i].cross(&(body.inertia * omega[i]));
            fi += inertial_force;
            ni += inertial_moment + c.cross(&inertial_force);
            // External wrenches: convert to the link frame about its origin.
            let rot_t = link_tf[i].rotation.inverse();
            let origin = link_tf[i].translation.vector;
            for w in &ext[i] {
                let f_loc = rot_t * w.force;
                let m_loc = rot_t * (w.point - origin).cross(&w.force);
                fi -= f_loc;
                ni -= m_loc;
            }
        }
        f[i] = fi;
        n[i] = ni;
        if let Some(p) = link.parent {
            let local = chain.links[i].local_transform(q[link.coord]);
            let rot = local.rotation;
            let r = local.translation.vector;
            let f_in_parent = rot * fi;
            f[p] += f_in_parent;
            n[p] += rot * ni + r.cross(&f_in_parent);
        }
    }

    let mut tau = DVector::zeros(dof);
    for (i, link) in chain.links.iter().enumerate() {
        tau[link.coord] = match &link.dof {
            LinkDof::RevoluteLocal(axis) => axis.into_inner().dot(&n[i]),
            LinkDof::Prismatic(axis) => axis.into_inner().dot(&f[i]),
        };
    }
    Ok(tau)
}

/// Inverse dynamics for one matched joint state. Records the
/// immediately-before and torques-calculated events on the way through.
pub fn inverse_dynamics(
    model: &ChainModel,
    js: &JointState,
    wrenches: &[ExternalWrench],
    clock: &dyn Clock,
) -> Result<TorqueState, IdError> {
    let events = js
        .events
        .record(EV_BEFORE_ID, clock.now())
        .map_err(|e| IdError::Event(e.to_string()))?;
    let tau = rne(model, &js.q, &js.qd, &js.qdd, wrenches)?;
    let events =
        events.record(EV_TORQUES_DONE, clock.now()).map_err(|e| IdError::Event(e.to_string()))?;
    Ok(TorqueState { t: js.t, tau, joint_state: js.clone(), events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_model_for_tests as load_str;
    use crate::telemetry::FixedClock;
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector2};

    // --- planar Lagrangian oracles (independent of the RNE path) ---

    /// tau for a single planar link: revolute about z at the origin, COM at
    /// `c` (link frame), inertia `izz` about the COM, gravity `g` in the
    /// x-y plane. Closed form from the Lagrangian.
    fn pendulum_oracle(m: f64, c: Vector2<f64>, izz: f64, g: Vector2<f64>, q: f64, dq: f64, ddq: f64) -> f64 {
        let inertia = izz + m * c.norm_squared();
        // dR/dq * c
        let dc = Vector2::new(-q.sin() * c.x - q.cos() * c.y, q.cos() * c.x - q.sin() * c.y);
        // V = -m g . R(q) c  =>  dV/dq = -m g . dc
        let grav = -m * g.dot(&dc);
        inertia * ddq + grav
    }

    /// Standard two-link planar chain: revolute z joints, link 1 length l1,
    /// COMs on the local x axes at lc1/lc2. Gravity `g` in-plane.
    #[allow(clippy::too_many_arguments)]
    fn two_link_oracle(
        m1: f64,
        i1: f64,
        lc1: f64,
        l1: f64,
        m2: f64,
        i2: f64,
        lc2: f64,
        g: Vector2<f64>,
        q: [f64; 2],
        dq: [f64; 2],
        ddq: [f64; 2],
    ) -> [f64; 2] {
        let (q1, q2) = (q[0], q[1]);
        let h11 = i1 + i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * q2.cos());
        let h12 = i2 + m2 * (lc2 * lc2 + l1 * lc2 * q2.cos());
        let h22 = i2 + m2 * lc2 * lc2;
        let h = m2 * l1 * lc2 * q2.sin();

        let d1 = Vector2::new(-(q1.sin()), q1.cos());
        let d12 = Vector2::new(-(q1 + q2).sin(), (q1 + q2).cos());
        let g1 = -m1 * lc1 * g.dot(&d1) - m2 * (l1 * g.dot(&d1) + lc2 * g.dot(&d12));
        let g2 = -m2 * lc2 * g.dot(&d12);

        [
            h11 * ddq[0] + h12 * ddq[1] - h * dq[1] * dq[1] - 2.0 * h * dq[0] * dq[1] + g1,
            h12 * ddq[0] + h22 * ddq[1] + h * dq[0] * dq[0] + g2,
        ]
    }

    const PENDULUM: &str = r#"
name = "pendulum"
coordinates = ["swing"]
gravity = [0.0, -9.80665, 0.0]

[[segments]]
name = "link"
mass = 2.0
com = [0.0, -0.5, 0.0]
inertia = [[0.0,0.0,0.0],[0.0,0.0,0.0],[0.0,0.0,0.0]]

[[joints]]
name = "pivot"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "ground"
child = "link"
"#;

    fn one(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn zero_motion_zero_gravity_zero_torque() {
        let src = PENDULUM.replace("[0.0, -9.80665, 0.0]", "[0.0, 0.0, 0.0]");
        let model = load_str(&src);
        let tau = rne(&model, &one(0.4), &one(0.0), &one(0.0), &[]).unwrap();
        assert_eq!(tau[0], 0.0);
    }

    #[test]
    fn static_pendulum_matches_mgl_sin_theta() {
        let model = load_str(PENDULUM);
        let theta = 30f64.to_radians();
        let tau = rne(&model, &one(theta), &one(0.0), &one(0.0), &[]).unwrap();
        let expected = 2.0 * 9.80665 * 0.5 * theta.sin(); // 4.903325 N m
        assert_relative_eq!(tau[0], expected, epsilon = 1e-12);
        assert_relative_eq!(tau[0], 4.903325, epsilon = 1e-6);

        // Lagrangian oracle agrees.
        let oracle = pendulum_oracle(
            2.0,
            Vector2::new(0.0, -0.5),
            0.0,
            Vector2::new(0.0, -9.80665),
            theta,
            0.0,
            0.0,
        );
        assert_relative_eq!(tau[0], oracle, epsilon = 1e-12);
    }

    #[test]
    fn counterforce_at_mass_point_cancels_gravity() {
        let model = load_str(PENDULUM);
        let theta = 30f64.to_radians();
        // COM in global coordinates at q = theta.
        let fk = model.forward_kinematics(&one(theta)).unwrap();
        let com_global = fk[0].transform_point(&nalgebra::Point3::new(0.0, -0.5, 0.0)).coords;
        let wrench = ExternalWrench {
            t: 0.0,
            body: "link".into(),
            force: Vector3::new(0.0, 2.0 * 9.80665, 0.0),
            point: com_global,
            active: true,
        };
        let tau = rne(&model, &one(theta), &one(0.0), &one(0.0), &[wrench]).unwrap();
        assert!(tau[0].abs() < 1e-9, "tau = {}", tau[0]);
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn pendulum_rne_matches_lagrangian_oracle_on_random_states() {
        let model = load_str(PENDULUM);
        let mut s = 1234u64;
        for _ in 0..100 {
            let (q, dq, ddq) = (2.0 * lcg(&mut s), 3.0 * lcg(&mut s), 5.0 * lcg(&mut s));
            let tau = rne(&model, &one(q), &one(dq), &one(ddq), &[]).unwrap();
            let oracle = pendulum_oracle(
                2.0,
                Vector2::new(0.0, -0.5),
                0.0,
                Vector2::new(0.0, -9.80665),
                q,
                dq,
                ddq,
            );
            let rel = (tau[0] - oracle).abs() / oracle.abs().max(1e-6);
            assert!(rel < 1e-8, "q={q} dq={dq} ddq={ddq}: rne {} vs oracle {oracle}", tau[0]);
        }
    }

    const TWO_LINK: &str = r#"
name = "twolink"
coordinates = ["q1", "q2"]
gravity = [0.0, -9.80665, 0.0]

[[segments]]
name = "upper"
mass = 3.5
com = [0.21, 0.0, 0.0]
inertia = [[0.0,0.0,0.0],[0.0,0.0,0.0],[0.0,0.0,0.031]]

[[segments]]
name = "lower"
mass = 1.8
com = [0.17, 0.0, 0.0]
inertia = [[0.0,0.0,0.0],[0.0,0.0,0.0],[0.0,0.0,0.014]]

[[joints]]
name = "shoulder"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "ground"
child = "upper"

[[joints]]
name = "elbow"
kind = "revolute"
axis = [0.0, 0.0, 1.0]
parent = "upper"
child = "lower"
parent_offset = { translation = [0.45, 0.0, 0.0] }
"#;

    #[test]
    fn two_link_rne_matches_lagrangian_oracle_on_random_states() {
        let model = load_str(TWO_LINK);
        let mut s = 777u64;
        for trial in 0..100 {
            let q = [2.5 * lcg(&mut s), 2.5 * lcg(&mut s)];
            let dq = [4.0 * lcg(&mut s), 4.0 * lcg(&mut s)];
            let ddq = [8.0 * lcg(&mut s), 8.0 * lcg(&mut s)];
            let tau = rne(
                &model,
                &DVector::from_column_slice(&q),
                &DVector::from_column_slice(&dq),
                &DVector::from_column_slice(&ddq),
                &[],
            )
            .unwrap();
            let oracle = two_link_oracle(
                3.5,
                0.031,
                0.21,
                0.45,
                1.8,
                0.014,
                0.17,
                Vector2::new(0.0, -9.80665),
                q,
                dq,
                ddq,
            );
            for j in 0..2 {
                let rel = (tau[j] - oracle[j]).abs() / oracle[j].abs().max(1e-6);
                assert!(
                    rel < 1e-8,
                    "trial {trial} tau[{j}]: rne {} vs oracle {}",
                    tau[j],
                    oracle[j]
                );
            }
        }
    }

    #[test]
    fn torque_linear_in_acceleration() {
        let model = load_str(TWO_LINK);
        let mut s = 42u64;
        let q = DVector::from_fn(2, |_, _| lcg(&mut s));
        let dq = DVector::from_fn(2, |_, _| lcg(&mut s));
        let ddq1 = DVector::from_fn(2, |_, _| 3.0 * lcg(&mut s));
        let ddq2 = DVector::from_fn(2, |_, _| 3.0 * lcg(&mut s));
        let tau0 = rne(&model, &q, &dq, &DVector::zeros(2), &[]).unwrap();
        let tau1 = rne(&model, &q, &dq, &ddq1, &[]).unwrap();
        let tau2 = rne(&model, &q, &dq, &ddq2, &[]).unwrap();
        let tau12 = rne(&model, &q, &dq, &(&ddq1 + &ddq2), &[]).unwrap();
        let lhs = &tau12 - &tau0;
        let rhs = (&tau1 - &tau0) + (&tau2 - &tau0);
        assert!((lhs - rhs).amax() < 1e-9);
    }

    #[test]
    fn external_wrenches_superpose() {
        let model = load_str(TWO_LINK);
        let mut s = 99u64;
        let q = DVector::from_fn(2, |_, _| lcg(&mut s));
        let dq = DVector::from_fn(2, |_, _| lcg(&mut s));
        let ddq = DVector::from_fn(2, |_, _| lcg(&mut s));
        let w1 = ExternalWrench {
            t: 0.0,
            body: "lower".into(),
            force: Vector3::new(12.0, -7.0, 3.0),
            point: Vector3::new(0.6, 0.1, 0.0),
            active: true,
        };
        let w2 = ExternalWrench {
            t: 0.0,
            body: "upper".into(),
            force: Vector3::new(-4.0, 9.0, 1.0),
            point: Vector3::new(0.2, -0.3, 0.0),
            active: true,
        };
        let none = rne(&model, &q, &dq, &ddq, &[]).unwrap();
        let t1 = rne(&model, &q, &dq, &ddq, std::slice::from_ref(&w1)).unwrap();
        let t2 = rne(&model, &q, &dq, &ddq, std::slice::from_ref(&w2)).unwrap();
        let both = rne(&model, &q, &dq, &ddq, &[w1, w2]).unwrap();
        let lhs = &both;
        let rhs = &t1 + &t2 - &none;
        assert!((lhs - rhs).amax() < 1e-9);
    }

    #[test]
    fn inactive_wrench_is_ignored() {
        let model = load_str(TWO_LINK);
        let q = DVector::zeros(2);
        let none = rne(&model, &q, &q, &q, &[]).unwrap();
        let inactive = ExternalWrench::inactive(0.0, "lower");
        let with = rne(&model, &q, &q, &q, &[inactive]).unwrap();
        assert_eq!(none, with);
    }

    #[test]
    fn wrench_on_unknown_body_errors() {
        let model = load_str(TWO_LINK);
        let q = DVector::zeros(2);
        let w = ExternalWrench {
            t: 0.0,
            body: "nope".into(),
            force: Vector3::z(),
            point: Vector3::zeros(),
            active: true,
        };
        assert!(matches!(rne(&model, &q, &q, &q, &[w]), Err(IdError::UnknownBody(_))));
    }

    // --- cop transform & wrench construction ---

    fn insole(f: f64, cop: (f64, f64)) -> InsoleSample {
        InsoleSample {
            t: 1.0,
            side: crate::streams::Side::Right,
            normal_force: f,
            cop: Vector2::new(cop.0, cop.1),
        }
    }

    #[test]
    fn cop_identity_transforms() {
        let s = insole(500.0, (0.1, 0.02));
        let p = transform_cop(&s, &Isometry3::identity(), &Isometry3::identity());
        assert_relative_eq!(p, Vector3::new(0.1, 0.02, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn cop_translation_projects_to_ground() {
        let s = insole(500.0, (0.1, 0.02));
        let foot = Isometry3::translation(1.0, 0.0, 0.05);
        let p = transform_cop(&s, &foot, &Isometry3::identity());
        assert_relative_eq!(p, Vector3::new(1.1, 0.02, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn cop_yaw_rotates_in_plane() {
        // Oracle: explicit rotation matrix application.
        let s = insole(500.0, (0.1, 0.02));
        let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let foot = Isometry3::from_parts(nalgebra::Translation3::identity(), yaw);
        let p = transform_cop(&s, &foot, &Isometry3::identity());
        let rot = yaw.to_rotation_matrix();
        let oracle = rot * Vector3::new(0.1, 0.02, 0.0);
        assert_relative_eq!(p, Vector3::new(oracle.x, oracle.y, 0.0), epsilon = 1e-12);
        assert_relative_eq!(p, Vector3::new(-0.02, 0.1, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn wrench_threshold_cases() {
        let p = Vector3::new(0.1, 0.0, 0.0);
        let w = build_wrench(&insole(500.0, (0.0, 0.0)), "foot_r", p, 10.0);
        assert!(w.active);
        assert_relative_eq!(w.force, Vector3::new(0.0, 0.0, 500.0));
        assert_relative_eq!(w.point.z, 0.0);

        let w0 = build_wrench(&insole(0.0, (0.0, 0.0)), "foot_r", p, 10.0);
        assert!(!w0.active);
        assert_eq!(w0.force, Vector3::zeros());

        let w9 = build_wrench(&insole(9.0, (0.0, 0.0)), "foot_r", p, 10.0);
        assert!(!w9.active);
    }

    #[test]
    fn inverse_dynamics_records_events() {
        let model = load_str(PENDULUM);
        let js = JointState {
            t: 2.0,
            q: one(0.3),
            qd: one(0.0),
            qdd: one(0.0),
            events: EventLog::new().record(0, 1.0).unwrap().record(1, 1.3).unwrap(),
        };
        let clock = FixedClock(1.31);
        let ts = inverse_dynamics(&model, &js, &[], &clock).unwrap();
        assert_eq!(ts.t, 2.0);
        assert!(ts.events.get(EV_BEFORE_ID).is_some());
        assert!(ts.events.get(EV_TORQUES_DONE).is_some());
        assert_eq!(ts.tau.len(), 1);
    }
}
