//! Internal link decomposition of the joint tree.
//!
//! Composite joints are expanded into chains of single-DOF links: a ball
//! joint becomes three revolute links about local z, x, y (intrinsic Z-X-Y)
//! and a free joint three prismatic links (x, y, z, in the parent frame)
//! followed by the same three revolutes, so the composed motion is
//! `Translation(t) * Rz * Rx * Ry`. Intermediate links are massless; the
//! last link of each real joint carries the child segment, with the segment
//! frame offset by the joint's `child_offset`.
//!
//! Both forward kinematics and the recursive Newton-Euler pass operate on
//! this flat, topologically ordered link list.

use nalgebra::{DVector, Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};

use super::{JointKind, JointSpec, SegmentSpec, GROUND};

#[derive(Debug, Clone)]
pub(crate) enum LinkDof {
    /// Rotation about a fixed axis of the link frame.
    RevoluteLocal(Unit<Vector3<f64>>),
    /// Translation along a fixed axis of the link frame.
    Prismatic(Unit<Vector3<f64>>),
}

/// Mass properties re-expressed in the owning link frame.
#[derive(Debug, Clone)]
pub(crate) struct LinkBody {
    pub segment_index: usize,
    /// Link frame -> segment frame (the real joint's child offset).
    pub segment_offset: Isometry3<f64>,
    pub mass: f64,
    /// COM position in the link frame.
    pub com: Vector3<f64>,
    /// Inertia about the COM, link frame axes.
    pub inertia: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Link {
    pub parent: Option<usize>,
    /// Fixed transform from the parent link frame to this link's joint frame.
    pub pre: Isometry3<f64>,
    pub dof: LinkDof,
    /// Generalized-coordinate index driving this link.
    pub coord: usize,
    pub body: Option<LinkBody>,
}

impl Link {
    /// Local transform parent frame -> link frame at coordinate value `q`.
    pub fn local_transform(&self, q: f64) -> Isometry3<f64> {
        match &self.dof {
            LinkDof::RevoluteLocal(axis) => {
                self.pre
                    * Isometry3::from_parts(
                        Translation3::identity(),
                        UnitQuaternion::from_axis_angle(axis, q),
                    )
            }
            LinkDof::Prismatic(axis) => {
                self.pre * Isometry3::from_parts(Translation3::from(axis.into_inner() * q), UnitQuaternion::identity())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CompiledChain {
    /// Topologically ordered: a link's parent always precedes it.
    pub links: Vec<Link>,
    /// Segment index -> owning link index.
    pub segment_link: Vec<usize>,
}

impl CompiledChain {
    /// Build the link list. Assumes the joint list already validated as a
    /// tree (single root on ground, no cycles, coordinate count matches).
    pub fn compile(segments: &[SegmentSpec], joints: &[JointSpec]) -> CompiledChain {
        // Coordinate offsets follow joint file order.
        let mut coord_offset = Vec::with_capacity(joints.len());
        let mut acc = 0;
        for j in joints {
            coord_offset.push(acc);
            acc += j.kind.dof();
        }

        let seg_index = |name: &str| segments.iter().position(|s| s.name == name).unwrap();

        let mut links: Vec<Link> = Vec::new();
        let mut segment_link = vec![usize::MAX; segments.len()];
        // joints pending until their parent segment has links.
        let mut remaining: Vec<usize> = (0..joints.len()).collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|&ji| {
                let joint = &joints[ji];
                let parent_link = if joint.parent == GROUND {
                    Some(None)
                } else {
                    let pi = seg_index(&joint.parent);
                    if segment_link[pi] != usize::MAX {
                        Some(Some(segment_link[pi]))
                    } else {
                        None
                    }
                };
                let Some(parent_link) = parent_link else { return true };
                let o = coord_offset[ji];
                let ci = seg_index(&joint.child);
                let seg = &segments[ci];
                // parent_offset is given relative to the parent SEGMENT
                // frame, which differs from the owning link frame by that
                // joint's child_offset.
                let pre_first = match parent_link {
                    Some(pl) => {
                        links[pl].body.as_ref().unwrap().segment_offset * joint.parent_offset
                    }
                    None => joint.parent_offset,
                };
                let last = push_joint_links(&mut links, parent_link, pre_first, joint, o);
                // Attach the segment to the final link. COM and inertia are
                // given in the segment frame; the link frame differs by
                // child_offset.
                let off = joint.child_offset;
                let rot = off.rotation.to_rotation_matrix();
                links[last].body = Some(LinkBody {
                    segment_index: ci,
                    segment_offset: off,
                    mass: seg.mass,
                    com: off.transform_point(&seg.com.into()).coords,
                    inertia: rot.matrix() * seg.inertia * rot.matrix().transpose(),
                });
                segment_link[ci] = last;
                false
            });
            assert!(remaining.len() < before, "joint graph is not a tree");
        }

        CompiledChain { links, segment_link }
    }

    /// Global transform of every link frame at configuration `q`.
    pub fn link_transforms(&self, q: &DVector<f64>) -> Vec<Isometry3<f64>> {
        let mut out = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let local = link.local_transform(q[link.coord]);
            let global = match link.parent {
                Some(p) => out[p] * local,
                None => local,
            };
            out.push(global);
        }
        out
    }

    /// Global transform of every segment frame at configuration `q`.
    pub fn segment_transforms(&self, q: &DVector<f64>) -> Vec<Isometry3<f64>> {
        let link_tf = self.link_transforms(q);
        self.segment_link
            .iter()
            .map(|&li| {
                let body = self.links[li].body.as_ref().unwrap();
                link_tf[li] * body.segment_offset
            })
            .collect()
    }
}

fn push_joint_links(
    links: &mut Vec<Link>,
    parent: Option<usize>,
    pre_first: Isometry3<f64>,
    joint: &JointSpec,
    coord_offset: usize,
) -> usize {
    let rev = |axis: Vector3<f64>| LinkDof::RevoluteLocal(Unit::new_normalize(axis));
    let pri = |axis: Vector3<f64>| LinkDof::Prismatic(Unit::new_normalize(axis));
    let mut add = |parent: Option<usize>, pre: Isometry3<f64>, dof: LinkDof, coord: usize| {
        links.push(Link { parent, pre, dof, coord, body: None });
        links.len() - 1
    };
    match &joint.kind {
        JointKind::Revolute { axis } => {
            add(parent, pre_first, LinkDof::RevoluteLocal(*axis), coord_offset)
        }
        JointKind::Ball => {
            // Coordinates [rz, rx, ry], intrinsic.
            let a = add(parent, pre_first, rev(Vector3::z()), coord_offset);
            let b = add(Some(a), Isometry3::identity(), rev(Vector3::x()), coord_offset + 1);
            add(Some(b), Isometry3::identity(), rev(Vector3::y()), coord_offset + 2)
        }
        JointKind::Free => {
            // Coordinates [rz, rx, ry, tx, ty, tz]; translations act first in
            // the chain so the composite is Translation(t) * Rz * Rx * Ry.
            let a = add(parent, pre_first, pri(Vector3::x()), coord_offset + 3);
            let b = add(Some(a), Isometry3::identity(), pri(Vector3::y()), coord_offset + 4);
            let c = add(Some(b), Isometry3::identity(), pri(Vector3::z()), coord_offset + 5);
            let d = add(Some(c), Isometry3::identity(), rev(Vector3::z()), coord_offset);
            let e = add(Some(d), Isometry3::identity(), rev(Vector3::x()), coord_offset + 1);
            add(Some(e), Isometry3::identity(), rev(Vector3::y()), coord_offset + 2)
        }
    }
}
