//! Rigid and similarity transforms, the pinhole camera and planes.
//!
//! Rotations are stored as unit quaternions and materialized as matrices on
//! demand. A [`Pose`] maps points from one frame into another; keyframe poses
//! in the optimizer are world-to-camera, so the relative motion from keyframe
//! `i` to `j` is `G_j ∘ G_i⁻¹` (see [`Pose::relative_to`]).
//!
//! Tangent vectors of a pose are ordered `[v; ω]` (translation first). The
//! optimizer perturbs poses on the left with a decoupled retraction:
//! `R ← Exp(ω)·R`, `t ← t + v`.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Minimum camera-frame depth accepted by the projection, in meters.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("inverse depth {0} must be positive")]
    NonPositiveInverseDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid plane: {0}")]
    InvalidPlane(String),
    #[error("similarity scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("trajectory line {line}: {reason}")]
    TrajectoryParse { line: usize, reason: String },
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map of SO(3): rotation vector to unit quaternion.
pub fn rotation_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*omega)
}

/// Logarithm of SO(3): the rotation vector with `|ω| ≤ π`.
///
/// At exactly π the axis sign is ambiguous; the axis whose first nonzero
/// component is positive is returned.
pub fn rotation_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vn = v.norm();
    if vn < 1e-300 {
        return Vector3::zeros();
    }
    let angle = 2.0 * vn.atan2(w);
    let scale = if vn < 1e-8 {
        // angle/ sin(angle/2) ≈ 2/w (1 + angle²/24)
        2.0 / w * (1.0 + vn * vn / (6.0 * w * w))
    } else {
        angle / vn
    };
    let mut omega = v * scale;
    if w <= 1e-12 {
        let first = omega.iter().copied().find(|c| *c != 0.0).unwrap_or(0.0);
        if first < 0.0 {
            omega = -omega;
        }
    }
    omega
}

/// Logarithm of a rotation given as a matrix.
pub fn rotation_matrix_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    rotation_log(&UnitQuaternion::from_rotation_matrix(&rot))
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coef * k * k
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose { rotation: r_inv, translation: -(r_inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Relative motion taking frame-`self` coordinates to frame-`other`
    /// coordinates when both are world-to-frame poses: `other ∘ self⁻¹`.
    pub fn relative_to(&self, other: &Pose) -> Pose {
        other.compose(&self.inverse())
    }

    /// Left-perturbed retraction with tangent `[v; ω]`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let v = Vector3::new(delta[0], delta[1], delta[2]);
        let w = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation: rotation_exp(&w) * self.rotation,
            translation: self.translation + v,
        }
    }

    /// Center of a world-to-camera pose in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Decoupled difference `[t_a⁻¹∘b; log(R)]` of `self⁻¹ ∘ other`.
    pub fn difference(&self, other: &Pose) -> Vector6<f64> {
        let d = self.inverse().compose(other);
        let w = rotation_log(&d.rotation);
        Vector6::new(d.translation.x, d.translation.y, d.translation.z, w.x, w.y, w.z)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation;
        write!(
            f,
            "Pose(t: [{:.4}, {:.4}, {:.4}], q: [{:.4}, {:.4}, {:.4}, {:.4}])",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Transform {
    scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(
        scale: f64,
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        Ok(Self { scale, rotation, translation })
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self { scale: 1.0, rotation: pose.rotation, translation: pose.translation }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Rigid part, dropping the scale.
    pub fn rigid(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let r_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Sim3Transform {
            scale: s_inv,
            rotation: r_inv,
            translation: -(s_inv * (r_inv * self.translation)),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        let r = self.rotation.to_rotation_matrix().into_inner() * self.scale;
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `T ∘ G` with the scale kept out of the rotation: the result is the
    /// rigid pose whose rotation is `R_T·R_G` and translation `s·R_T·t_G + t_T`.
    pub fn apply_to_pose(&self, g: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * g.rotation,
            translation: self.scale * (self.rotation * g.translation) + self.translation,
        }
    }

    /// Image of a plane `{x : n·x = offset}` under this transform.
    pub fn transform_plane(&self, plane: &Plane) -> Plane {
        let n = self.rotation * plane.normal.into_inner();
        Plane {
            normal: Unit::new_unchecked(n),
            offset: self.scale * plane.offset + n.dot(&self.translation),
        }
    }

    /// Left retraction on the 7-dim tangent `[v; ω; σ]`:
    /// `s ← e^σ s`, `R ← Exp(ω) R`, `t ← t + v`.
    pub fn retract(&self, delta: &nalgebra::SVector<f64, 7>) -> Sim3Transform {
        let v = Vector3::new(delta[0], delta[1], delta[2]);
        let w = Vector3::new(delta[3], delta[4], delta[5]);
        Sim3Transform {
            scale: self.scale * delta[6].exp(),
            rotation: rotation_exp(&w) * self.rotation,
            translation: self.translation + v,
        }
    }
}

/// Pinhole intrinsics of an image (or of a subsampled optimization grid).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!("cx {} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!("cy {} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_PROJECTION_DEPTH {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn backproject(&self, u: &Vector2<f64>, inv_depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(inv_depth > 0.0) {
            return Err(GeometryError::NonPositiveInverseDepth(inv_depth));
        }
        Ok(self.ray(u) / inv_depth)
    }

    /// Point on the viewing ray of `u` at unit depth.
    pub fn ray(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    /// Whether a pixel lies within the image footprint `[-½, W-½) × [-½, H-½)`.
    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= -0.5 && u.y >= -0.5 && u.x < self.width as f64 - 0.5 && u.y < self.height as f64 - 0.5
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// Plane `{x : n·x = offset}` with unit normal `n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Unit<Vector3<f64>>,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !(n > 1e-12) || !offset.is_finite() {
            return Err(GeometryError::InvalidPlane(format!("normal {normal:?} offset {offset}")));
        }
        Ok(Self { normal: Unit::new_normalize(normal), offset })
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    pub fn flipped(&self) -> Plane {
        Plane { normal: -self.normal, offset: -self.offset }
    }
}

/// A single trajectory sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stamped {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Reads `timestamp tx ty tz qx qy qz qw` lines. Blank lines and `#`
/// comments are skipped.
pub fn read_trajectory<R: BufRead>(reader: R) -> Result<Vec<Stamped>, GeometryError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GeometryError::TrajectoryParse { line: idx + 1, reason: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::TrajectoryParse { line: idx + 1, reason: e.to_string() })?;
        if vals.len() != 8 {
            return Err(GeometryError::TrajectoryParse {
                line: idx + 1,
                reason: format!("expected 8 fields, found {}", vals.len()),
            });
        }
        let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        out.push(Stamped {
            timestamp: vals[0],
            pose: Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3])),
        });
    }
    Ok(out)
}

pub fn write_trajectory<W: Write>(mut writer: W, traj: &[Stamped]) -> std::io::Result<()> {
    for s in traj {
        let t = s.pose.translation;
        let q = s.pose.rotation;
        writeln!(
            writer,
            "{:.9} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            s.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
        let theta = omega.norm();
        if theta == 0.0 {
            return Matrix3::identity();
        }
        let k = skew(&(omega / theta));
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * k * k
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(rotation_log(&UnitQuaternion::identity()), Vector3::zeros());
    }

    #[test]
    fn log_of_quarter_turn_about_z() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let w = rotation_log(&q);
        assert!((w - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-14);
    }

    #[test]
    fn log_at_pi_uses_positive_axis() {
        let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::new(-1.0, 2.0, 0.0)), PI);
        let w = rotation_log(&q);
        assert!(w.x > 0.0);
        assert!((w.norm() - PI).abs() < 1e-12);
        assert!((rodrigues(&w) - q.to_rotation_matrix().into_inner()).norm() < 1e-12);
    }

    #[test]
    fn project_on_axis_and_offset() {
        let k = CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap();
        let u = k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(u, Vector2::new(320.0, 240.0));
        let u = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(u, Vector2::new(370.0, 240.0));
        assert!(matches!(k.project(&Vector3::new(0.0, 0.0, 1e-7)), Err(GeometryError::NonPositiveDepth(_))));
        assert!(matches!(k.backproject(&u, 0.0), Err(GeometryError::NonPositiveInverseDepth(_))));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn sim3_scale_on_translation() {
        let t = Sim3Transform::new(2.0, UnitQuaternion::identity(), Vector3::zeros()).unwrap();
        let g = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply_to_pose(&g).translation, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(Sim3Transform::identity().apply_to_pose(&g), g);
        assert!(Sim3Transform::new(-1.0, UnitQuaternion::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn plane_transform_keeps_points_on_plane() {
        let p = Plane::new(Vector3::new(0.2, 0.1, 1.0), 0.7).unwrap();
        let t = Sim3Transform::new(
            1.3,
            UnitQuaternion::from_euler_angles(0.1, -0.4, 0.9),
            Vector3::new(0.5, -1.0, 2.0),
        )
        .unwrap();
        let x = p.normal.into_inner() * p.offset + p.normal.cross(&Vector3::x()) * 0.8;
        assert!(p.signed_distance(&x).abs() < 1e-12);
        let q = t.transform_plane(&p);
        assert!(q.signed_distance(&t.transform_point(&x)).abs() < 1e-12);
    }

    #[test]
    fn trajectory_text_round_trip() {
        let traj = vec![
            Stamped { timestamp: 0.0, pose: Pose::identity() },
            Stamped {
                timestamp: 0.5,
                pose: Pose::new(UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1), Vector3::new(1.0, 2.0, 3.0)),
            },
        ];
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let back = read_trajectory(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[1].pose.translation - traj[1].pose.translation).norm() < 1e-15);
        assert!(back[1].pose.rotation.angle_to(&traj[1].pose.rotation) < 1e-12);
        assert!(read_trajectory(std::io::Cursor::new("0 1 2 3\n")).is_err());
    }
}
