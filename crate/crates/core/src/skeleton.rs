//! Articulated skeleton: kinematic tree, forward kinematics and point
//! Jacobians.
//!
//! Generalized coordinates are laid out as the root translation followed by
//! one rotation vector per joint (joint 0 is the root orientation). Joint `k`
//! rotates its own frame relative to its parent; a child's offset is expressed
//! in the parent's frame.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Matrix3, Matrix3xX, Vector3};
use thiserror::Error;

use crate::geometry::{rotation_exp, rotation_log, skew, Pose};

const DEFAULT_SKELETON: &str = include_str!("../data/skeleton.txt");

/// Height of the pelvis above the soles in the rest pose of the default table.
pub const DEFAULT_STANDING_ROOT_HEIGHT: f64 = 0.94;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("joint {joint} has parent {parent}; parents must precede children")]
    NotTopological { joint: usize, parent: i64 },
    #[error("skeleton has no joints")]
    Empty,
    #[error("no joint named `{0}`")]
    MissingJoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonModel {
    joints: Vec<Joint>,
    /// Left and right contact bodies.
    pub contact_bodies: [usize; 2],
    pub head: usize,
}

impl SkeletonModel {
    /// 24-joint body with the SMPL kinematic topology.
    pub fn default_body() -> Self {
        Self::parse(DEFAULT_SKELETON).expect("bundled skeleton table is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, SkeletonError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `name parent_index ox oy oz` lines.
    ///
    /// The contact bodies are the joints named `left_foot`/`right_foot` and
    /// the head is `head`.
    pub fn parse(text: &str) -> Result<Self, SkeletonError> {
        let mut joints = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| SkeletonError::Parse { line: idx + 1, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let parent: i64 = fields[1].parse().map_err(|e| err(format!("parent: {e}")))?;
            let mut offset = Vector3::zeros();
            for (k, f) in fields[2..].iter().enumerate() {
                offset[k] = f.parse().map_err(|e| err(format!("offset: {e}")))?;
            }
            let j = joints.len();
            let parent = match parent {
                -1 if j == 0 => None,
                p if p >= 0 && (p as usize) < j => Some(p as usize),
                p => return Err(SkeletonError::NotTopological { joint: j, parent: p }),
            };
            joints.push(Joint { name: fields[0].to_string(), parent, offset });
        }
        if joints.is_empty() {
            return Err(SkeletonError::Empty);
        }
        let find = |name: &str| {
            joints
                .iter()
                .position(|j| j.name == name)
                .ok_or_else(|| SkeletonError::MissingJoint(name.to_string()))
        };
        let contact_bodies = [find("left_foot")?, find("right_foot")?];
        let head = find("head")?;
        Ok(Self { joints, contact_bodies, head })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for j in &self.joints {
            let parent = j.parent.map(|p| p as i64).unwrap_or(-1);
            let _ = writeln!(s, "{} {} {} {} {}", j.name, parent, j.offset.x, j.offset.y, j.offset.z);
        }
        s
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn dof(&self) -> usize {
        3 + 3 * self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Whether `ancestor` lies on the chain from the root to `joint`
    /// (inclusive).
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            cur = self.joints[j].parent;
        }
        false
    }

    /// Joints whose rotation moves a point rigidly attached to `body`.
    fn chain(&self, body: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = Some(body);
        while let Some(j) = cur {
            out.push(j);
            cur = self.joints[j].parent;
        }
        out.reverse();
        out
    }

    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Kinematics {
        debug_assert_eq!(q.len(), self.dof());
        let n = self.joints.len();
        let mut rotations: Vec<Matrix3<f64>> = Vec::with_capacity(n);
        let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(n);
        let root_t = Vector3::new(q[0], q[1], q[2]);
        for (k, joint) in self.joints.iter().enumerate() {
            let local = rotation_exp(&joint_rotation(q, k)).to_rotation_matrix().into_inner();
            match joint.parent {
                None => {
                    rotations.push(local);
                    positions.push(root_t + joint.offset);
                }
                Some(p) => {
                    let rp = rotations[p];
                    let pos = positions[p] + rp * joint.offset;
                    rotations.push(rp * local);
                    positions.push(pos);
                }
            }
        }
        Kinematics { rotations, positions }
    }

    /// World position of a point fixed in the frame of `body`.
    pub fn point_position(&self, q: &DVector<f64>, body: usize, local: &Vector3<f64>) -> Vector3<f64> {
        let kin = self.forward_kinematics(q);
        kin.positions[body] + kin.rotations[body] * local
    }

    /// 3×dof Jacobian mapping generalized velocities to the world velocity of
    /// a point fixed in the frame of `body`.
    pub fn point_jacobian(&self, q: &DVector<f64>, body: usize, local: &Vector3<f64>) -> Matrix3xX<f64> {
        let kin = self.forward_kinematics(q);
        self.point_jacobian_with(&kin, q, body, local)
    }

    pub(crate) fn point_jacobian_with(
        &self,
        kin: &Kinematics,
        q: &DVector<f64>,
        body: usize,
        local: &Vector3<f64>,
    ) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.dof());
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let r = kin.positions[body] + kin.rotations[body] * local;
        for k in self.chain(body) {
            let lever = r - kin.positions[k];
            let block = -skew(&lever) * kin.rotations[k] * right_jacobian(&joint_rotation(q, k));
            jac.fixed_view_mut::<3, 3>(0, 3 + 3 * k).copy_from(&block);
        }
        jac
    }
}

/// World-frame rotation and position of every joint.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub rotations: Vec<Matrix3<f64>>,
    pub positions: Vec<Vector3<f64>>,
}

impl Kinematics {
    /// Joint-to-world pose.
    pub fn joint_pose(&self, k: usize) -> Pose {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotations[k]);
        Pose::new(nalgebra::UnitQuaternion::from_rotation_matrix(&rot), self.positions[k])
    }
}

/// Right Jacobian of SO(3) in exponential coordinates.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

pub fn joint_rotation(q: &DVector<f64>, k: usize) -> Vector3<f64> {
    Vector3::new(q[3 + 3 * k], q[4 + 3 * k], q[5 + 3 * k])
}

pub fn set_joint_rotation(q: &mut DVector<f64>, k: usize, w: &Vector3<f64>) {
    q[3 + 3 * k] = w.x;
    q[4 + 3 * k] = w.y;
    q[5 + 3 * k] = w.z;
}

/// Generalized coordinates and velocities of the skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl BodyState {
    pub fn rest(skeleton: &SkeletonModel) -> Self {
        Self { q: DVector::zeros(skeleton.dof()), qdot: DVector::zeros(skeleton.dof()) }
    }

    /// Rest pose standing with the soles of the default skeleton on `z = 0`.
    pub fn standing(skeleton: &SkeletonModel) -> Self {
        let mut s = Self::rest(skeleton);
        s.q[2] = DEFAULT_STANDING_ROOT_HEIGHT;
        s
    }

    pub fn root_translation(&self) -> Vector3<f64> {
        Vector3::new(self.q[0], self.q[1], self.q[2])
    }

    pub fn set_root_translation(&mut self, t: &Vector3<f64>) {
        self.q[0] = t.x;
        self.q[1] = t.y;
        self.q[2] = t.z;
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }

    /// `q ⊕ q̇·dt`: translation added, each joint rotation composed on the
    /// rotation manifold.
    pub fn integrate_position(&self, dt: f64) -> DVector<f64> {
        let mut q = self.q.clone();
        for k in 0..3 {
            q[k] += self.qdot[k] * dt;
        }
        let joints = (self.q.len() - 3) / 3;
        for k in 0..joints {
            let theta = joint_rotation(&self.q, k);
            let rate = joint_rotation(&self.qdot, k);
            let body_increment = right_jacobian(&theta) * rate * dt;
            let r = rotation_exp(&theta) * rotation_exp(&body_increment);
            set_joint_rotation(&mut q, k, &rotation_log(&r));
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    #[test]
    fn default_table_loads() {
        let s = SkeletonModel::default_body();
        assert_eq!(s.joint_count(), 24);
        assert_eq!(s.dof(), 75);
        assert_eq!(s.joints()[s.head].name, "head");
        let text = s.to_text();
        assert_eq!(SkeletonModel::parse(&text).unwrap(), s);
    }

    #[test]
    fn rejects_bad_topology() {
        let err = SkeletonModel::parse("a -1 0 0 0\nb 3 0 0 0\n").unwrap_err();
        assert!(matches!(err, SkeletonError::NotTopological { joint: 1, parent: 3 }));
        assert!(SkeletonModel::parse("a -1 0 0\n").is_err());
    }

    #[test]
    fn rest_pose_positions_are_cumulative_offsets() {
        let s = SkeletonModel::default_body();
        let mut state = BodyState::rest(&s);
        state.set_root_translation(&Vector3::new(1.0, 2.0, 3.0));
        let kin = s.forward_kinematics(&state.q);
        for (k, j) in s.joints().iter().enumerate() {
            let mut expected = Vector3::new(1.0, 2.0, 3.0);
            let mut cur = Some(k);
            while let Some(c) = cur {
                expected += s.joints()[c].offset;
                cur = s.joints()[c].parent;
            }
            assert!((kin.positions[k] - expected).norm() < 1e-14, "joint {}", j.name);
        }
        let standing = s.forward_kinematics(&BodyState::standing(&s).q);
        for &f in &s.contact_bodies {
            assert!(standing.positions[f].z.abs() < 1e-12);
        }
    }

    #[test]
    fn single_joint_rotation_matches_matrix_chain() {
        let s = SkeletonModel::default_body();
        let mut state = BodyState::rest(&s);
        let knee = s.joint_index("left_knee").unwrap();
        set_joint_rotation(&mut state.q, knee, &Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        let kin = s.forward_kinematics(&state.q);

        // homogeneous-chain oracle
        let mut world: Vec<Matrix4<f64>> = Vec::new();
        for (k, j) in s.joints().iter().enumerate() {
            let mut local = Matrix4::identity();
            let r = rotation_exp(&joint_rotation(&state.q, k)).to_rotation_matrix().into_inner();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&j.offset);
            let m = match j.parent {
                None => local,
                Some(p) => world[p] * local,
            };
            world.push(m);
        }
        for k in 0..s.joint_count() {
            let p = world[k].fixed_view::<3, 1>(0, 3).into_owned();
            assert!((p - kin.positions[k]).norm() < 1e-12);
        }
        let ankle = s.joint_index("left_ankle").unwrap();
        let rel = kin.positions[ankle] - kin.positions[knee];
        assert!((rel - Vector3::new(0.0, 0.40, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn jacobian_structure() {
        let s = SkeletonModel::default_body();
        let mut state = BodyState::standing(&s);
        for k in 0..state.q.len() - 3 {
            state.q[3 + k] = 0.05 * ((k as f64) * 0.7).sin();
        }
        let foot = s.contact_bodies[0];
        let j = s.point_jacobian(&state.q, foot, &Vector3::zeros());
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
        let arm = s.joint_index("right_elbow").unwrap();
        assert_eq!(j.fixed_view::<3, 3>(0, 3 + 3 * arm).norm(), 0.0);
    }

    #[test]
    fn integration_stays_on_the_ball() {
        let s = SkeletonModel::default_body();
        let mut state = BodyState::rest(&s);
        set_joint_rotation(&mut state.q, 4, &Vector3::new(3.0, 0.0, 0.0));
        set_joint_rotation(&mut state.qdot, 4, &Vector3::new(10.0, 0.0, 0.0));
        let q = state.integrate_position(0.05);
        assert!(joint_rotation(&q, 4).norm() <= std::f64::consts::PI + 1e-12);
    }
}
