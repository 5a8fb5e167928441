//! Visual–inertial–mocap initialization.
//!
//! Estimates the similarity transform `T` mapping head-frame coordinates to
//! camera-frame coordinates from the first keyframes. Two terms are combined:
//!
//! * a floor term comparing the floor plane fitted in the first camera frame
//!   with the virtual plane under the feet, carried through `T`;
//! * a motion term comparing the camera motion relative to the first keyframe
//!   with the head motion conjugated by `T`.
//!
//! All poses in an [`InitializationBundle`] are world-to-frame. The relative
//! motion at keyframe `t` is `Δ(t) = G(t) ∘ G(0)⁻¹`, so the head motion seen
//! from the camera is `T ∘ Δ_h(t) ∘ T⁻¹`, which removes the (unknown) world
//! frames of both trajectories.

use nalgebra::{DMatrix, DVector, SVector, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Plane, Pose, Sim3Transform};
use crate::skeleton::{BodyState, SkeletonModel};

/// Number of keyframes used for initialization.
pub const INIT_KEYFRAMES: usize = 8;

/// Weight of the angular part of the plane distance, meters per radian.
pub const PLANE_ANGLE_WEIGHT: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("initialization did not converge; final cost {cost}")]
    NonConvergence { cost: f64 },
    #[error("invalid initialization input: {0}")]
    InvalidInput(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloorMaskSource {
    Oracle,
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitializationBundle {
    /// World-to-camera poses of the first keyframes, visual scale.
    pub camera_poses: Vec<Pose>,
    /// World-to-head poses at the same keyframes, metric.
    pub head_poses: Vec<Pose>,
    /// Floor samples in the frame of the first camera.
    pub floor_points: Vec<Vector3<f64>>,
    /// Approximate up direction in the first camera frame, used to orient
    /// the fitted floor normal.
    pub camera_up: Vector3<f64>,
    /// Virtual plane under the feet, in the head frame of the first keyframe.
    pub foot_plane: Plane,
    pub floor_mask_source: FloorMaskSource,
}

impl InitializationBundle {
    pub fn validate(&self) -> Result<(), InitError> {
        if self.camera_poses.len() != self.head_poses.len() {
            return Err(InitError::InvalidInput(format!(
                "{} camera poses but {} head poses",
                self.camera_poses.len(),
                self.head_poses.len()
            )));
        }
        if self.camera_poses.len() < 2 {
            return Err(InitError::InvalidInput("need at least 2 keyframes".into()));
        }
        if self.floor_points.len() < 3 {
            return Err(InitError::InvalidInput("need at least 3 floor points".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for InitWeights {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 0.1 }
    }
}

impl InitWeights {
    pub fn validate(&self) -> Result<(), InitError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(InitError::InvalidInput(format!("weights {self:?}")));
        }
        Ok(())
    }
}

/// Total-least-squares plane through `points`, normal oriented so that
/// `n·up_hint ≥ 0`.
pub fn fit_floor_plane(points: &[Vector3<f64>], up_hint: &Vector3<f64>) -> Result<Plane, InitError> {
    if points.len() < 3 {
        return Err(InitError::DegenerateGeometry(format!("{} points", points.len())));
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut scatter = nalgebra::Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let spread = eig.eigenvalues[order[2]].max(1e-300);
    if middle <= 1e-12 * spread || middle <= 0.0 {
        return Err(InitError::DegenerateGeometry("floor points are collinear".into()));
    }
    debug_assert!(smallest <= middle);
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let along = normal.dot(up_hint);
    let flip = if along != 0.0 {
        along < 0.0
    } else {
        normal.iter().copied().find(|c| *c != 0.0).unwrap_or(1.0) < 0.0
    };
    if flip {
        normal = -normal;
    }
    Ok(Plane { normal: Unit::new_normalize(normal), offset: normal.dot(&centroid) })
}

/// Plane under the lowest foot, perpendicular to the body's upright axis,
/// expressed in the head frame.
pub fn virtual_foot_plane(body: &BodyState, skeleton: &SkeletonModel) -> Plane {
    let kin = skeleton.forward_kinematics(&body.q);
    let up = kin.rotations[0] * Vector3::z();
    let lowest = skeleton
        .contact_bodies
        .iter()
        .map(|&b| kin.positions[b])
        .min_by(|a, b| up.dot(a).total_cmp(&up.dot(b)))
        .expect("two contact bodies");
    let head_rot = kin.rotations[skeleton.head];
    let head_pos = kin.positions[skeleton.head];
    Plane { normal: Unit::new_normalize(head_rot.transpose() * up), offset: up.dot(&(lowest - head_pos)) }
}

/// `|o_a − o_b| + w·arccos(|n_a·n_b|)`.
pub fn plane_distance(a: &Plane, b: &Plane) -> f64 {
    let cos = a.normal.dot(&b.normal).abs().min(1.0);
    (a.offset - b.offset).abs() + PLANE_ANGLE_WEIGHT * cos.acos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignOptions {
    pub max_iters: usize,
    pub initial_damping: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { max_iters: 200, initial_damping: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignReport {
    pub transform: Sim3Transform,
    pub iterations: usize,
    /// Final value of the squared objective minimized by the solver.
    pub cost: f64,
    /// `α·d(P_c, T P_f) + β Σ ‖ΔG ⊖ Δ(T G_h)‖` at the solution.
    pub objective: f64,
}

/// Relative motions `G(t) ∘ G(0)⁻¹`.
fn relative_motions(poses: &[Pose]) -> Vec<Pose> {
    let first_inv = poses[0].inverse();
    poses.iter().map(|g| g.compose(&first_inv)).collect()
}

struct AlignProblem<'a> {
    floor: Plane,
    foot: &'a Plane,
    cam_rel: Vec<Pose>,
    head_rel: Vec<Pose>,
    weights: InitWeights,
}

impl AlignProblem<'_> {
    fn conjugate(t: &Sim3Transform, d: &Pose) -> Pose {
        t.compose(&Sim3Transform::from_pose(d)).compose(&t.inverse()).rigid()
    }

    fn residuals(&self, t: &Sim3Transform) -> DVector<f64> {
        let mut r = Vec::with_capacity(4 + 6 * self.cam_rel.len());
        let sa = self.weights.alpha.sqrt();
        let moved = t.transform_plane(self.foot);
        r.push(sa * (self.floor.offset - moved.offset));
        let axis = moved.normal.cross(&self.floor.normal);
        let sin = axis.norm();
        let angle = sin.atan2(moved.normal.dot(&self.floor.normal));
        let rot = if sin > 1e-300 { axis * (angle / sin) } else { Vector3::zeros() };
        r.extend((rot * PLANE_ANGLE_WEIGHT * sa).iter());
        let sb = self.weights.beta.sqrt();
        for (cam, head) in self.cam_rel.iter().zip(&self.head_rel) {
            let pred = Self::conjugate(t, head);
            r.extend((cam.difference(&pred) * sb).iter());
        }
        DVector::from_vec(r)
    }

    fn objective(&self, t: &Sim3Transform) -> f64 {
        let plane = plane_distance(&self.floor, &t.transform_plane(self.foot));
        let motion: f64 = self
            .cam_rel
            .iter()
            .zip(&self.head_rel)
            .map(|(c, h)| c.difference(&Self::conjugate(t, h)).norm())
            .sum();
        self.weights.alpha * plane + self.weights.beta * motion
    }

    fn jacobian(&self, t: &Sim3Transform, m: usize) -> DMatrix<f64> {
        let h = 1e-7;
        let mut jac = DMatrix::zeros(m, 7);
        for k in 0..7 {
            let mut d = SVector::<f64, 7>::zeros();
            d[k] = h;
            let plus = self.residuals(&t.retract(&d));
            d[k] = -h;
            let minus = self.residuals(&t.retract(&d));
            jac.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        jac
    }
}

/// Damped Gauss–Newton over the 7-dim Sim(3) tangent, started at `t_init`.
pub fn align_sim3(
    bundle: &InitializationBundle,
    weights: &InitWeights,
    t_init: &Sim3Transform,
) -> Result<AlignReport, InitError> {
    align_sim3_with(bundle, weights, t_init, &AlignOptions::default())
}

pub fn align_sim3_with(
    bundle: &InitializationBundle,
    weights: &InitWeights,
    t_init: &Sim3Transform,
    opts: &AlignOptions,
) -> Result<AlignReport, InitError> {
    bundle.validate()?;
    weights.validate()?;
    let floor = fit_floor_plane(&bundle.floor_points, &bundle.camera_up)?;
    let problem = AlignProblem {
        floor,
        foot: &bundle.foot_plane,
        cam_rel: relative_motions(&bundle.camera_poses),
        head_rel: relative_motions(&bundle.head_poses),
        weights: *weights,
    };
    let mut t = *t_init;
    let mut r = problem.residuals(&t);
    let mut cost = r.norm_squared();
    let mut damping = opts.initial_damping;
    let mut last_decrease = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = cost == 0.0;
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let jac = problem.jacobian(&t, r.len());
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        loop {
            let mut a = jtj.clone();
            for i in 0..7 {
                a[(i, i)] += damping * (1.0 + jtj[(i, i)]);
            }
            let step = match a.cholesky() {
                Some(c) => -c.solve(&g),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let step7 = SVector::<f64, 7>::from_iterator(step.iter().copied());
            let cand = t.retract(&step7);
            let r_new = problem.residuals(&cand);
            let cost_new = r_new.norm_squared();
            if cost_new <= cost {
                last_decrease = cost - cost_new;
                t = cand;
                r = r_new;
                cost = cost_new;
                damping = (damping / 10.0).max(1e-12);
                if step.norm() < 1e-10 || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
            if damping > 1e12 {
                // no descent direction left at machine precision
                converged = true;
                break;
            }
        }
    }
    if !converged && last_decrease >= 1e-12 {
        return Err(InitError::NonConvergence { cost });
    }
    Ok(AlignReport { transform: t, iterations, cost, objective: problem.objective(&t) })
}
