//! Model file format (TOML) and validation.
//!
//! The on-disk schema (see `docs/formats.md` in the repository root):
//!
//! ```toml
//! name = "demo"
//! gravity = [0.0, 0.0, -9.80665]          # optional, m/s^2
//! coordinates = ["rz", "rx", "ry", "tx", "ty", "tz", "knee"]
//!
//! [[segments]]
//! name = "femur"
//! mass = 9.3                              # kg
//! com = [0.0, 0.0, -0.17]                 # m, segment frame
//! inertia = [[0.13,0,0],[0,0.13,0],[0,0,0.03]]
//!
//! [[joints]]
//! name = "knee"
//! kind = "revolute"                       # revolute | ball | free
//! axis = [0.0, 1.0, 0.0]                  # revolute only, unit
//! parent = "femur"                        # or "ground" at the root
//! child = "tibia"
//! parent_offset = { translation = [0,0,-0.4], rotation = [1,0,0,0] }  # w x y z
//!
//! [[muscles]]
//! name = "vastus"
//! f_max = 4530.0
//! [[muscles.moment_arms]]
//! coordinate = "knee"
//! terms = [{ coeff = 0.042 }, { coeff = -0.006, exponents = { knee = 1 } }]
//!
//! [mapping.femur_imu]
//! segment = "femur"
//! coordinates = ["knee"]
//!
//! [ranges]
//! knee = [0.0, 2.0]                       # optional, rad | m
//! ```
//!
//! Coordinates are consumed by joints in file order; a ball joint takes
//! `[rz, rx, ry]` (intrinsic Z-X-Y) and a free joint `[rz, rx, ry, tx, ty,
//! tz]`. Lengths in meters, masses in kg, angles in radians.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::Deserialize;

use super::{
    ChainModel, CompiledChain, JointKind, JointMapping, JointSpec, ModelError, MuscleSpec,
    PolyTerm, Polynomial, SegmentSpec, GROUND,
};

const UNIT_TOL: f64 = 1e-9;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    gravity: Option<[f64; 3]>,
    coordinates: Vec<String>,
    segments: Vec<RawSegment>,
    joints: Vec<RawJoint>,
    #[serde(default)]
    muscles: Vec<RawMuscle>,
    #[serde(default)]
    mapping: BTreeMap<String, RawMapEntry>,
    #[serde(default)]
    ranges: BTreeMap<String, [f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    name: String,
    mass: f64,
    com: [f64; 3],
    inertia: [[f64; 3]; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    name: String,
    kind: String,
    axis: Option<[f64; 3]>,
    parent: String,
    child: String,
    parent_offset: Option<RawTransform>,
    child_offset: Option<RawTransform>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTransform {
    translation: Option<[f64; 3]>,
    /// Unit quaternion, w x y z.
    rotation: Option<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMuscle {
    name: String,
    f_max: f64,
    #[serde(default)]
    moment_arms: Vec<RawMomentArm>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMomentArm {
    coordinate: String,
    terms: Vec<RawTerm>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTerm {
    coeff: f64,
    #[serde(default)]
    exponents: BTreeMap<String, u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMapEntry {
    segment: String,
    #[serde(default)]
    coordinates: Vec<String>,
}

fn parse_transform(raw: &Option<RawTransform>, what: &str) -> Result<Isometry3<f64>, ModelError> {
    let Some(raw) = raw else { return Ok(Isometry3::identity()) };
    let t = raw.translation.unwrap_or([0.0; 3]);
    let rot = match raw.rotation {
        Some([w, x, y, z]) => {
            let q = Quaternion::new(w, x, y, z);
            if (q.norm() - 1.0).abs() > UNIT_TOL {
                return Err(ModelError::Validation(format!(
                    "{what}: rotation quaternion has norm {:.12}, expected 1",
                    q.norm()
                )));
            }
            UnitQuaternion::from_quaternion(q)
        }
        None => UnitQuaternion::identity(),
    };
    Ok(Isometry3::from_parts(Translation3::new(t[0], t[1], t[2]), rot))
}

fn validate_inertia(name: &str, i: &Matrix3<f64>) -> Result<(), ModelError> {
    if i.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(format!("inertia of segment '{name}'")));
    }
    let scale = i.abs().max().max(1.0);
    let asym = (i - i.transpose()).abs().max();
    if asym > 1e-9 * scale {
        return Err(ModelError::Validation(format!(
            "segment '{name}': inertia tensor not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let sym = (i + i.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(ModelError::Validation(format!(
            "segment '{name}': inertia tensor not positive semidefinite"
        )));
    }
    Ok(())
}

/// Load and validate a chain model from a TOML file.
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<ChainModel, ModelError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.as_ref().display())))?;
    load_model_str(&text)
}

pub(crate) fn load_model_str(text: &str) -> Result<ChainModel, ModelError> {
    let raw: RawModel = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;

    // Coordinates: unique names.
    let mut seen = BTreeSet::new();
    for c in &raw.coordinates {
        if !seen.insert(c.clone()) {
            return Err(ModelError::Validation(format!("duplicate coordinate '{c}'")));
        }
    }
    let coord_index = |name: &str| raw.coordinates.iter().position(|c| c == name);

    // Segments.
    let mut segments = Vec::with_capacity(raw.segments.len());
    let mut seg_names = BTreeSet::new();
    for s in &raw.segments {
        if s.name == GROUND {
            return Err(ModelError::Validation("segment may not be named 'ground'".into()));
        }
        if !seg_names.insert(s.name.clone()) {
            return Err(ModelError::Validation(format!("duplicate segment '{}'", s.name)));
        }
        if !(s.mass >= 0.0) {
            return Err(ModelError::Validation(format!(
                "segment '{}': mass {} must be >= 0",
                s.name, s.mass
            )));
        }
        let inertia = Matrix3::from_fn(|r, c| s.inertia[r][c]);
        validate_inertia(&s.name, &inertia)?;
        segments.push(SegmentSpec {
            name: s.name.clone(),
            mass: s.mass,
            com: Vector3::new(s.com[0], s.com[1], s.com[2]),
            inertia,
        });
    }

    // Joints.
    let mut joints = Vec::with_capacity(raw.joints.len());
    let mut joint_names = BTreeSet::new();
    let mut children = BTreeSet::new();
    let mut dof_sum = 0;
    for j in &raw.joints {
        if !joint_names.insert(j.name.clone()) {
            return Err(ModelError::Validation(format!("duplicate joint '{}'", j.name)));
        }
        let kind = match j.kind.as_str() {
            "revolute" => {
                let a = j.axis.ok_or_else(|| {
                    ModelError::Validation(format!("joint '{}': revolute joint needs an axis", j.name))
                })?;
                let v = Vector3::new(a[0], a[1], a[2]);
                if (v.norm() - 1.0).abs() > UNIT_TOL {
                    return Err(ModelError::Validation(format!(
                        "joint '{}': axis has norm {:.12}, expected unit",
                        j.name,
                        v.norm()
                    )));
                }
                JointKind::Revolute { axis: Unit::new_normalize(v) }
            }
            "ball" => JointKind::Ball,
            "free" => JointKind::Free,
            other => {
                return Err(ModelError::Validation(format!(
                    "joint '{}': unknown kind '{other}'",
                    j.name
                )))
            }
        };
        if j.parent != GROUND && !seg_names.contains(&j.parent) {
            return Err(ModelError::Validation(format!(
                "joint '{}': parent segment '{}' not declared",
                j.name, j.parent
            )));
        }
        if !seg_names.contains(&j.child) {
            return Err(ModelError::Validation(format!(
                "joint '{}': child segment '{}' not declared",
                j.name, j.child
            )));
        }
        if !children.insert(j.child.clone()) {
            return Err(ModelError::Validation(format!(
                "segment '{}' is the child of more than one joint",
                j.child
            )));
        }
        if matches!(kind, JointKind::Free) && j.parent != GROUND {
            return Err(ModelError::Validation(format!(
                "joint '{}': free joints are only allowed at the tree root",
                j.name
            )));
        }
        dof_sum += kind.dof();
        joints.push(JointSpec {
            name: j.name.clone(),
            kind,
            parent: j.parent.clone(),
            child: j.child.clone(),
            parent_offset: parse_transform(&j.parent_offset, &format!("joint '{}' parent_offset", j.name))?,
            child_offset: parse_transform(&j.child_offset, &format!("joint '{}' child_offset", j.name))?,
        });
    }

    if joints.iter().filter(|j| matches!(j.kind, JointKind::Free)).count() > 1 {
        return Err(ModelError::Validation("more than one free joint declared".into()));
    }

    // Every segment must hang off exactly one joint.
    for s in &segments {
        if !children.contains(&s.name) {
            return Err(ModelError::Validation(format!(
                "segment '{}' is not the child of any joint",
                s.name
            )));
        }
    }

    // Tree check: single root, every joint reachable from ground.
    let roots: Vec<&JointSpec> = joints.iter().filter(|j| j.parent == GROUND).collect();
    if roots.len() != 1 {
        return Err(ModelError::Validation(format!(
            "expected exactly one root joint attached to '{GROUND}', found {}",
            roots.len()
        )));
    }
    let mut reachable: BTreeSet<&str> = BTreeSet::new();
    reachable.insert(GROUND);
    let mut grew = true;
    while grew {
        grew = false;
        for j in &joints {
            if reachable.contains(j.parent.as_str()) && reachable.insert(j.child.as_str()) {
                grew = true;
            }
        }
    }
    for j in &joints {
        if !reachable.contains(j.child.as_str()) {
            return Err(ModelError::Validation(format!(
                "joint '{}' (child '{}') forms a cycle or is detached from the root",
                j.name, j.child
            )));
        }
    }

    if dof_sum != raw.coordinates.len() {
        return Err(ModelError::Validation(format!(
            "coordinate count {} does not match total joint DOFs {dof_sum}",
            raw.coordinates.len()
        )));
    }

    // Muscles.
    let mut muscles = Vec::with_capacity(raw.muscles.len());
    let mut muscle_names = BTreeSet::new();
    for m in &raw.muscles {
        if !muscle_names.insert(m.name.clone()) {
            return Err(ModelError::Validation(format!("duplicate muscle '{}'", m.name)));
        }
        if !(m.f_max > 0.0) {
            return Err(ModelError::Validation(format!(
                "muscle '{}': f_max {} must be > 0",
                m.name, m.f_max
            )));
        }
        let mut arms = Vec::new();
        for arm in &m.moment_arms {
            let ci = coord_index(&arm.coordinate).ok_or_else(|| {
                ModelError::Validation(format!(
                    "muscle '{}': moment arm references unknown coordinate '{}'",
                    m.name, arm.coordinate
                ))
            })?;
            let mut terms = Vec::new();
            for t in &arm.terms {
                if !t.coeff.is_finite() {
                    return Err(ModelError::NonFinite(format!("muscle '{}' term", m.name)));
                }
                let mut exps = Vec::new();
                for (cname, pow) in &t.exponents {
                    let idx = coord_index(cname).ok_or_else(|| {
                        ModelError::Validation(format!(
                            "muscle '{}': exponent references unknown coordinate '{cname}'",
                            m.name
                        ))
                    })?;
                    exps.push((idx, *pow));
                }
                terms.push(PolyTerm { coeff: t.coeff, exponents: exps });
            }
            arms.push((ci, Polynomial { terms }));
        }
        muscles.push(MuscleSpec { name: m.name.clone(), f_max: m.f_max, moment_arms: arms });
    }

    // Mapping.
    let mut pairs = Vec::new();
    for (frame, entry) in &raw.mapping {
        if !seg_names.contains(&entry.segment) {
            return Err(ModelError::Validation(format!(
                "mapping '{frame}': unknown segment '{}'",
                entry.segment
            )));
        }
        for c in &entry.coordinates {
            if coord_index(c).is_none() {
                return Err(ModelError::Validation(format!(
                    "mapping '{frame}': unknown coordinate '{c}'"
                )));
            }
        }
        pairs.push((frame.clone(), entry.segment.clone(), entry.coordinates.clone()));
    }
    let mapping = JointMapping::new(pairs)?;

    // Coordinate ranges (optional metadata; defaults to +/- pi).
    for (c, r) in &raw.ranges {
        if coord_index(c).is_none() {
            return Err(ModelError::Validation(format!("range declared for unknown coordinate '{c}'")));
        }
        if !(r[0] <= r[1]) {
            return Err(ModelError::Validation(format!("range for '{c}' is empty")));
        }
    }

    let gravity = raw
        .gravity
        .map(|g| Vector3::new(g[0], g[1], g[2]))
        .unwrap_or_else(|| Vector3::new(0.0, 0.0, -9.80665));
    if gravity.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("gravity".into()));
    }

    let compiled = CompiledChain::compile(&segments, &joints);
    let ranges = raw
        .ranges
        .iter()
        .map(|(k, v)| (k.clone(), (v[0], v[1])))
        .collect();

    Ok(ChainModel {
        name: raw.name.unwrap_or_else(|| "unnamed".into()),
        segments,
        joints,
        coordinates: raw.coordinates,
        muscles,
        gravity,
        mapping,
        ranges,
        compiled,
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    use std::io::Write;

    /// Write model TOML to a temp file for loading in tests.
    pub(crate) fn write_model(src: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(src.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }
}
