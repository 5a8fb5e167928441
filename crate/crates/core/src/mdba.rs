//! Mocap-aware dense bundle adjustment.
//!
//! Keyframe poses (world-to-camera) and per-pixel inverse depths are refined
//! against two kinds of residuals:
//!
//! * dense reprojection residuals `u*_ij − Π(G_ij ∘ Π⁻¹(u, d_i(u)))`
//!   weighted by per-pixel confidences and a Huber kernel on the whitened
//!   norm;
//! * relative-pose residuals between consecutive keyframes built from the
//!   inertial head-motion prior, weighted by `λ` and the prior covariances.
//!
//! The normal equations are solved with Levenberg damping. Each pixel's
//! inverse depth only couples to the poses of its own residuals, so the depth
//! block is diagonal and is eliminated with a Schur complement before the
//! reduced camera system is factorized.
//!
//! Pose perturbations are left-multiplied with the decoupled retraction of
//! [`Pose::retract`].

use std::collections::BTreeSet;

use nalgebra::{
    Cholesky, DMatrix, DVector, Dyn, Matrix2x3, Matrix3, Matrix6, SMatrix, UnitQuaternion, Vector2, Vector3,
    Vector6,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{right_jacobian_inv, rotation_log, skew, CameraIntrinsics, Pose, MIN_PROJECTION_DEPTH};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Error, PartialEq)]
pub enum MdbaError {
    #[error("reduced camera system is singular: {0}")]
    SingularReducedSystem(String),
    #[error("problem carries no information (all weights zero, no priors)")]
    NonPositiveWeightSum,
    #[error("Hessian is indefinite after damping")]
    IndefiniteHessian,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    /// World-to-camera pose.
    pub pose: Pose,
    /// Row-major inverse depth per grid pixel, 1/m.
    pub inv_depth: Vec<f64>,
    /// Marginal variance of each inverse depth, (1/m)².
    pub depth_var: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
}

impl Keyframe {
    pub fn new(id: usize, timestamp: f64, pose: Pose, inv_depth: Vec<f64>, intrinsics: CameraIntrinsics) -> Self {
        let n = inv_depth.len();
        Self { id, timestamp, pose, inv_depth, depth_var: vec![1.0 / DEPTH_DAMPING; n], intrinsics }
    }

    pub fn pixel(&self, idx: usize) -> Vector2<f64> {
        Vector2::new((idx % self.intrinsics.width) as f64, (idx / self.intrinsics.width) as f64)
    }
}

/// Dense correspondence field from keyframe `src` into keyframe `dst`.
/// A pixel with zero weight carries no correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGraphEdge {
    pub src: usize,
    pub dst: usize,
    pub target: Vec<Vector2<f64>>,
    pub weight: Vec<Vector2<f64>>,
}

impl FrameGraphEdge {
    pub fn weight_sum(&self) -> f64 {
        self.weight.iter().map(|w| w.x + w.y).sum()
    }
}

/// Relative-motion prior between consecutive keyframes: the expected value
/// of `G_src ∘ G_dst⁻¹` with translation and rotation covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct InertialPrior {
    pub src: usize,
    pub dst: usize,
    pub rel_translation: Vector3<f64>,
    pub rel_rotation: UnitQuaternion<f64>,
    pub cov_t: Matrix3<f64>,
    pub cov_r: Matrix3<f64>,
}

impl InertialPrior {
    /// Prior from a relative pose with isotropic standard deviations.
    pub fn isotropic(src: usize, dst: usize, rel: &Pose, sigma_t: f64, sigma_r: f64) -> Self {
        Self {
            src,
            dst,
            rel_translation: rel.translation,
            rel_rotation: rel.rotation,
            cov_t: Matrix3::identity() * sigma_t * sigma_t,
            cov_r: Matrix3::identity() * sigma_r * sigma_r,
        }
    }

    pub fn factor(&self) -> Result<RelativePoseFactor, MdbaError> {
        let lt = sqrt_information(&self.cov_t)?;
        let lr = sqrt_information(&self.cov_r)?;
        let mut sqrt_info = Matrix6::zeros();
        sqrt_info.fixed_view_mut::<3, 3>(0, 0).copy_from(&lt);
        sqrt_info.fixed_view_mut::<3, 3>(3, 3).copy_from(&lr);
        Ok(RelativePoseFactor {
            src: self.src,
            dst: self.dst,
            measured: Pose::new(self.rel_rotation, self.rel_translation),
            sqrt_info,
        })
    }
}

/// `L` with `LᵀL = Σ⁻¹`.
fn sqrt_information(cov: &Matrix3<f64>) -> Result<Matrix3<f64>, MdbaError> {
    if (cov - cov.transpose()).norm() > 1e-12 * cov.norm().max(1.0) {
        return Err(MdbaError::InvalidProblem("prior covariance is not symmetric".into()));
    }
    let min_eig = cov.symmetric_eigenvalues().min();
    if !(min_eig >= 1e-12) {
        return Err(MdbaError::InvalidProblem(format!("prior covariance eigenvalue {min_eig} < 1e-12")));
    }
    let info = cov.try_inverse().ok_or_else(|| MdbaError::InvalidProblem("singular covariance".into()))?;
    let chol = info.cholesky().ok_or_else(|| MdbaError::InvalidProblem("covariance not PD".into()))?;
    Ok(chol.l().transpose())
}

/// Whitened relative-pose residual on `G_src ∘ G_dst⁻¹`: translation
/// difference followed by `log(R̃ᵀ R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePoseFactor {
    pub src: usize,
    pub dst: usize,
    pub measured: Pose,
    pub sqrt_info: Matrix6<f64>,
}

impl RelativePoseFactor {
    pub fn scaled(mut self, weight: f64) -> Self {
        self.sqrt_info *= weight.sqrt();
        self
    }

    pub fn residual(&self, g_src: &Pose, g_dst: &Pose) -> Vector6<f64> {
        self.sqrt_info * self.raw_residual(g_src, g_dst)
    }

    fn raw_residual(&self, g_src: &Pose, g_dst: &Pose) -> Vector6<f64> {
        let rel = g_src.compose(&g_dst.inverse());
        let dt = rel.translation - self.measured.translation;
        let dr = rotation_log(&(self.measured.rotation.inverse() * rel.rotation));
        Vector6::new(dt.x, dt.y, dt.z, dr.x, dr.y, dr.z)
    }

    /// Whitened residual and its Jacobians with respect to the source and
    /// destination pose perturbations.
    pub fn linearize(&self, g_src: &Pose, g_dst: &Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
        let rel = g_src.compose(&g_dst.inverse());
        let r_rel = rel.rotation_matrix();
        let raw = self.raw_residual(g_src, g_dst);
        let r0 = Vector3::new(raw[3], raw[4], raw[5]);
        let jr_inv = right_jacobian_inv(&r0);
        let t_dst = g_dst.translation;

        let mut j_src = Matrix6::zeros();
        j_src.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        j_src.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&(r_rel * t_dst)));
        j_src.fixed_view_mut::<3, 3>(3, 3).copy_from(&(jr_inv * r_rel.transpose()));

        let mut j_dst = Matrix6::zeros();
        j_dst.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_rel));
        j_dst.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_rel * skew(&t_dst)));
        j_dst.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jr_inv));

        (self.sqrt_info * raw, self.sqrt_info * j_src, self.sqrt_info * j_dst)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdbaProblem {
    pub keyframes: Vec<Keyframe>,
    pub edges: Vec<FrameGraphEdge>,
    pub priors: Vec<InertialPrior>,
    /// Additional relative-pose factors (loop closures), not scaled by λ.
    pub extra_factors: Vec<RelativePoseFactor>,
    pub lambda: f64,
    /// Keyframe id whose pose is held fixed.
    pub gauge: usize,
}

impl MdbaProblem {
    pub fn new(keyframes: Vec<Keyframe>, edges: Vec<FrameGraphEdge>, priors: Vec<InertialPrior>, lambda: f64) -> Self {
        let gauge = keyframes.first().map(|k| k.id).unwrap_or(0);
        Self { keyframes, edges, priors, extra_factors: Vec::new(), lambda, gauge }
    }

    pub fn keyframe(&self, id: usize) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    fn index_of(&self, id: usize) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == id)
    }
}

/// Per-pixel warp result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelResidual {
    pub residual: Vector2<f64>,
    pub weight: Vector2<f64>,
    pub valid: bool,
}

/// Warp of one pixel with its Jacobians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpLinearization {
    pub residual: Vector2<f64>,
    pub d_src: Matrix2x6,
    pub d_dst: Matrix2x6,
    pub d_depth: Vector2<f64>,
}

/// Residual `target − Π(G_dst ∘ G_src⁻¹ ∘ Π⁻¹(u, d))`; `None` when the
/// warped point is behind the camera or outside the image.
pub fn warp_residual(
    k: &CameraIntrinsics,
    g_src: &Pose,
    g_dst: &Pose,
    u: &Vector2<f64>,
    inv_depth: f64,
    target: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    if !(inv_depth > 0.0) {
        return None;
    }
    let x_src = k.ray(u) / inv_depth;
    let x_dst = g_dst.transform_point(&g_src.inverse().transform_point(&x_src));
    if x_dst.z <= MIN_PROJECTION_DEPTH {
        return None;
    }
    let proj = k.project(&x_dst).ok()?;
    if !k.contains(&proj) {
        return None;
    }
    Some(target - proj)
}

/// [`warp_residual`] with analytic Jacobians.
pub fn warp_linearize(
    k: &CameraIntrinsics,
    g_src: &Pose,
    g_dst: &Pose,
    u: &Vector2<f64>,
    inv_depth: f64,
    target: &Vector2<f64>,
) -> Option<WarpLinearization> {
    if !(inv_depth > 0.0) {
        return None;
    }
    let x_src = k.ray(u) / inv_depth;
    let r_src_t = g_src.rotation_matrix().transpose();
    let r_dst = g_dst.rotation_matrix();
    let y = x_src - g_src.translation;
    let x_world = r_src_t * y;
    let x_dst = r_dst * x_world + g_dst.translation;
    if x_dst.z <= MIN_PROJECTION_DEPTH {
        return None;
    }
    let proj = k.project(&x_dst).ok()?;
    if !k.contains(&proj) {
        return None;
    }
    let jp: Matrix2x3<f64> = -k.project_jacobian(&x_dst);
    let r_rel = r_dst * r_src_t;

    let mut d_dst = Matrix2x6::zeros();
    d_dst.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
    d_dst.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * -skew(&(r_dst * x_world))));

    let mut d_src = Matrix2x6::zeros();
    d_src.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -r_rel));
    d_src.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * r_rel * skew(&y)));

    let d_depth = jp * (r_rel * (-x_src / inv_depth));
    Some(WarpLinearization { residual: target - proj, d_src, d_dst, d_depth })
}

/// Per-pixel reprojection residuals of one edge. Invalid pixels carry zero
/// weight.
pub fn reprojection_residual(edge: &FrameGraphEdge, kf_src: &Keyframe, kf_dst: &Keyframe) -> Vec<PixelResidual> {
    (0..kf_src.inv_depth.len())
        .map(|p| {
            let w = edge.weight[p];
            let res = if w.x > 0.0 || w.y > 0.0 {
                warp_residual(
                    &kf_src.intrinsics,
                    &kf_src.pose,
                    &kf_dst.pose,
                    &kf_src.pixel(p),
                    kf_src.inv_depth[p],
                    &edge.target[p],
                )
            } else {
                None
            };
            match res {
                Some(r) => PixelResidual { residual: r, weight: w, valid: true },
                None => PixelResidual { residual: Vector2::zeros(), weight: Vector2::zeros(), valid: false },
            }
        })
        .collect()
}

/// Whitened 6-vector inertial residual between consecutive keyframes.
pub fn inertial_residual(prior: &InertialPrior, kf_prev: &Keyframe, kf_cur: &Keyframe) -> Result<Vector6<f64>, MdbaError> {
    Ok(prior.factor()?.residual(&kf_prev.pose, &kf_cur.pose))
}

/// Keyframe rule: a new keyframe when the mean flow exceeds the threshold.
pub fn select_keyframe(mean_flow: f64, threshold: f64) -> bool {
    mean_flow > threshold
}

/// Huber loss on the squared whitened norm, and its derivative with respect
/// to that squared norm.
fn huber(s2: f64, delta: f64) -> (f64, f64) {
    if s2 <= delta * delta {
        (s2, 1.0)
    } else {
        let s = s2.sqrt();
        (2.0 * delta * s - delta * delta, delta / s)
    }
}

pub const DEPTH_DAMPING: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdbaOptions {
    pub max_iters: usize,
    pub huber_delta: f64,
    pub depth_damping: f64,
    pub inv_depth_min: f64,
    pub inv_depth_max: f64,
    pub initial_lm: f64,
    /// Converged once the update norm falls below this.
    pub step_tol: f64,
    pub optimize_depths: bool,
    /// Keyframes held fixed besides the gauge (pose and depth).
    pub fixed: BTreeSet<usize>,
}

impl Default for MdbaOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            huber_delta: 2.0,
            depth_damping: DEPTH_DAMPING,
            inv_depth_min: 1e-3,
            inv_depth_max: 1e2,
            initial_lm: 1e-4,
            step_tol: 1e-12,
            optimize_depths: true,
            fixed: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub reprojection: f64,
    pub inertial: f64,
    pub loops: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.reprojection + self.inertial + self.loops
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdbaReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial: CostBreakdown,
    pub final_cost: CostBreakdown,
    /// Total cost after every accepted step, starting with the initial cost.
    pub history: Vec<f64>,
}

/// Variable layout of one solve.
struct Layout {
    /// Keyframe index → pose variable index.
    pose_var: Vec<Option<usize>>,
    n_pose: usize,
    /// Keyframe index → whether its depths are variables.
    depth_free: Vec<bool>,
    /// Keyframe index → pose variables coupled to its pixels, in order.
    coupled: Vec<Vec<usize>>,
}

impl Layout {
    fn new(problem: &MdbaProblem, opts: &MdbaOptions) -> Result<Self, MdbaError> {
        let gauge = problem
            .index_of(problem.gauge)
            .ok_or_else(|| MdbaError::SingularReducedSystem(format!("gauge keyframe {} missing", problem.gauge)))?;
        let mut pose_var = vec![None; problem.keyframes.len()];
        let mut n_pose = 0;
        let mut depth_free = vec![false; problem.keyframes.len()];
        for (i, kf) in problem.keyframes.iter().enumerate() {
            let fixed = opts.fixed.contains(&kf.id);
            if i != gauge && !fixed {
                pose_var[i] = Some(n_pose);
                n_pose += 1;
            }
            depth_free[i] = opts.optimize_depths && !fixed;
        }
        let mut coupled: Vec<Vec<usize>> = vec![Vec::new(); problem.keyframes.len()];
        for e in &problem.edges {
            let (s, d) = (problem.index_of(e.src).unwrap(), problem.index_of(e.dst).unwrap());
            for v in [pose_var[s], pose_var[d]].into_iter().flatten() {
                if !coupled[s].contains(&v) {
                    coupled[s].push(v);
                }
            }
        }
        Ok(Self { pose_var, n_pose, depth_free, coupled })
    }
}

fn validate(problem: &MdbaProblem, opts: &MdbaOptions) -> Result<(), MdbaError> {
    let n = problem.keyframes.len();
    let mut ids = BTreeSet::new();
    for kf in &problem.keyframes {
        if !ids.insert(kf.id) {
            return Err(MdbaError::InvalidProblem(format!("duplicate keyframe id {}", kf.id)));
        }
        if kf.inv_depth.len() != kf.intrinsics.pixel_count() || kf.depth_var.len() != kf.inv_depth.len() {
            return Err(MdbaError::InvalidProblem(format!("keyframe {} grid size mismatch", kf.id)));
        }
    }
    if problem.index_of(problem.gauge).is_none() {
        return Err(MdbaError::SingularReducedSystem(format!("gauge keyframe {} missing", problem.gauge)));
    }
    let idx = |id: usize| {
        problem.index_of(id).ok_or_else(|| MdbaError::InvalidProblem(format!("unknown keyframe id {id}")))
    };
    // union-find over informative connections
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let link = |a: usize, b: usize, parent: &mut Vec<usize>| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        parent[ra] = rb;
    };
    let mut info = 0.0;
    for e in &problem.edges {
        if e.src == e.dst {
            return Err(MdbaError::InvalidProblem(format!("edge {} -> {} is a self loop", e.src, e.dst)));
        }
        let (s, d) = (idx(e.src)?, idx(e.dst)?);
        let np = problem.keyframes[s].inv_depth.len();
        if e.target.len() != np || e.weight.len() != np {
            return Err(MdbaError::InvalidProblem(format!("edge {} -> {} grid size mismatch", e.src, e.dst)));
        }
        let w = e.weight_sum();
        if w > 0.0 {
            info += w;
            link(s, d, &mut parent);
        }
    }
    for p in &problem.priors {
        let (s, d) = (idx(p.src)?, idx(p.dst)?);
        info += 1.0;
        link(s, d, &mut parent);
    }
    for f in &problem.extra_factors {
        let (s, d) = (idx(f.src)?, idx(f.dst)?);
        info += 1.0;
        link(s, d, &mut parent);
    }
    if !(info > 0.0) {
        return Err(MdbaError::NonPositiveWeightSum);
    }
    let anchors: Vec<usize> = problem
        .keyframes
        .iter()
        .enumerate()
        .filter(|(_, k)| k.id == problem.gauge || opts.fixed.contains(&k.id))
        .map(|(i, _)| find(&mut parent, i))
        .collect();
    for i in 0..n {
        let r = find(&mut parent, i);
        if !anchors.contains(&r) {
            return Err(MdbaError::SingularReducedSystem(format!(
                "keyframe {} is not connected to a fixed keyframe",
                problem.keyframes[i].id
            )));
        }
    }
    Ok(())
}

fn all_factors(problem: &MdbaProblem) -> Result<(Vec<RelativePoseFactor>, usize), MdbaError> {
    let mut factors = Vec::with_capacity(problem.priors.len() + problem.extra_factors.len());
    for p in &problem.priors {
        factors.push(p.factor()?.scaled(problem.lambda));
    }
    let n_inertial = factors.len();
    factors.extend(problem.extra_factors.iter().cloned());
    Ok((factors, n_inertial))
}

/// Evaluates the total cost at the current state.
pub fn evaluate_cost(problem: &MdbaProblem, opts: &MdbaOptions) -> Result<CostBreakdown, MdbaError> {
    let (factors, n_inertial) = all_factors(problem)?;
    Ok(cost_with(problem, &factors, n_inertial, opts.huber_delta))
}

fn cost_with(problem: &MdbaProblem, factors: &[RelativePoseFactor], n_inertial: usize, delta: f64) -> CostBreakdown {
    let reprojection: f64 = problem
        .edges
        .par_iter()
        .map(|e| {
            let s = problem.keyframe(e.src).unwrap();
            let d = problem.keyframe(e.dst).unwrap();
            reprojection_residual(e, s, d)
                .iter()
                .filter(|p| p.valid)
                .map(|p| huber(p.weight.x * p.residual.x.powi(2) + p.weight.y * p.residual.y.powi(2), delta).0)
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let mut inertial = 0.0;
    let mut loops = 0.0;
    for (n, f) in factors.iter().enumerate() {
        let c = f
            .residual(&problem.keyframe(f.src).unwrap().pose, &problem.keyframe(f.dst).unwrap().pose)
            .norm_squared();
        if n < n_inertial {
            inertial += c;
        } else {
            loops += c;
        }
    }
    CostBreakdown { reprojection, inertial, loops }
}

/// Linearized normal equations in block form.
struct Normal {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    /// Per keyframe index: per pixel diagonal entry, gradient and pose
    /// couplings (one 6-vector per entry of `Layout::coupled`).
    hdd: Vec<Vec<f64>>,
    gd: Vec<Vec<f64>>,
    hpd: Vec<Vec<Vector6<f64>>>,
}

struct EdgeContribution {
    src: usize,
    blocks: Vec<(usize, usize, Matrix6<f64>)>,
    grads: Vec<(usize, Vector6<f64>)>,
    /// pixel, hdd, gd, coupling to src pose var, coupling to dst pose var
    pixels: Vec<(usize, f64, f64, Vector6<f64>, Vector6<f64>)>,
}

fn linearize_edge(problem: &MdbaProblem, layout: &Layout, e: &FrameGraphEdge, delta: f64) -> EdgeContribution {
    let s = problem.index_of(e.src).unwrap();
    let d = problem.index_of(e.dst).unwrap();
    let ks = &problem.keyframes[s];
    let kd = &problem.keyframes[d];
    let (vs, vd) = (layout.pose_var[s], layout.pose_var[d]);
    let mut hss = Matrix6::zeros();
    let mut hsd = Matrix6::zeros();
    let mut hdd_pose = Matrix6::zeros();
    let mut gs = Vector6::zeros();
    let mut gdp = Vector6::zeros();
    let mut pixels = Vec::new();
    for p in 0..ks.inv_depth.len() {
        let w = e.weight[p];
        if !(w.x > 0.0 || w.y > 0.0) {
            continue;
        }
        let Some(lin) = warp_linearize(&ks.intrinsics, &ks.pose, &kd.pose, &ks.pixel(p), ks.inv_depth[p], &e.target[p])
        else {
            continue;
        };
        let r = lin.residual;
        let (_, psi) = huber(w.x * r.x * r.x + w.y * r.y * r.y, delta);
        let wm = nalgebra::Matrix2::new(psi * w.x, 0.0, 0.0, psi * w.y);
        let ws = wm * lin.d_src;
        let wd = wm * lin.d_dst;
        hss += lin.d_src.transpose() * ws;
        hsd += lin.d_src.transpose() * wd;
        hdd_pose += lin.d_dst.transpose() * wd;
        gs += lin.d_src.transpose() * (wm * r);
        gdp += lin.d_dst.transpose() * (wm * r);
        if layout.depth_free[s] {
            let wdd = wm * lin.d_depth;
            pixels.push((
                p,
                lin.d_depth.dot(&wdd),
                wdd.dot(&r),
                lin.d_src.transpose() * wdd,
                lin.d_dst.transpose() * wdd,
            ));
        }
    }
    let mut blocks = Vec::new();
    let mut grads = Vec::new();
    if let Some(a) = vs {
        blocks.push((a, a, hss));
        grads.push((a, gs));
    }
    if let Some(b) = vd {
        blocks.push((b, b, hdd_pose));
        grads.push((b, gdp));
    }
    if let (Some(a), Some(b)) = (vs, vd) {
        blocks.push((a, b, hsd));
        blocks.push((b, a, hsd.transpose()));
    }
    EdgeContribution { src: s, blocks, grads, pixels }
}

fn build_normal(
    problem: &MdbaProblem,
    layout: &Layout,
    factors: &[RelativePoseFactor],
    opts: &MdbaOptions,
) -> Normal {
    let n = 6 * layout.n_pose;
    let mut hpp = DMatrix::zeros(n, n);
    let mut gp = DVector::zeros(n);
    let mut hdd: Vec<Vec<f64>> = Vec::new();
    let mut gd: Vec<Vec<f64>> = Vec::new();
    let mut hpd: Vec<Vec<Vector6<f64>>> = Vec::new();
    for (i, kf) in problem.keyframes.iter().enumerate() {
        let np = if layout.depth_free[i] { kf.inv_depth.len() } else { 0 };
        hdd.push(vec![0.0; np]);
        gd.push(vec![0.0; np]);
        hpd.push(vec![Vector6::zeros(); np * layout.coupled[i].len()]);
    }
    let contributions: Vec<EdgeContribution> =
        problem.edges.par_iter().map(|e| linearize_edge(problem, layout, e, opts.huber_delta)).collect();
    for (c, e) in contributions.iter().zip(&problem.edges) {
        for (a, b, blk) in &c.blocks {
            let mut v = hpp.fixed_view_mut::<6, 6>(6 * a, 6 * b);
            v += blk;
        }
        for (a, g) in &c.grads {
            let mut v = gp.fixed_view_mut::<6, 1>(6 * a, 0);
            v += g;
        }
        let s = c.src;
        let d = problem.index_of(e.dst).unwrap();
        let ncoup = layout.coupled[s].len();
        let slot = |v: Option<usize>| v.and_then(|v| layout.coupled[s].iter().position(|c| *c == v));
        let (ss, sd) = (slot(layout.pose_var[s]), slot(layout.pose_var[d]));
        for &(p, h, g, bs, bd) in &c.pixels {
            hdd[s][p] += h;
            gd[s][p] += g;
            if let Some(k) = ss {
                hpd[s][p * ncoup + k] += bs;
            }
            if let Some(k) = sd {
                hpd[s][p * ncoup + k] += bd;
            }
        }
    }
    for f in factors {
        let s = problem.index_of(f.src).unwrap();
        let d = problem.index_of(f.dst).unwrap();
        let (r, js, jd) = f.linearize(&problem.keyframes[s].pose, &problem.keyframes[d].pose);
        let vars = [(layout.pose_var[s], js), (layout.pose_var[d], jd)];
        for (va, ja) in &vars {
            let Some(a) = va else { continue };
            let mut g = gp.fixed_view_mut::<6, 1>(6 * a, 0);
            g += ja.transpose() * r;
            for (vb, jb) in &vars {
                let Some(b) = vb else { continue };
                let mut h = hpp.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                h += ja.transpose() * jb;
            }
        }
    }
    Normal { hpp, gp, hdd, gd, hpd }
}

/// Reduced camera matrix `S = H_pp − H_pd H_dd⁻¹ H_dp` and right-hand side,
/// with `mu` added to every diagonal entry.
fn reduce(layout: &Layout, nrm: &Normal, mu: f64, depth_damping: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut s = nrm.hpp.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += mu;
    }
    let mut g = nrm.gp.clone();
    for (i, coupled) in layout.coupled.iter().enumerate() {
        let nc = coupled.len();
        for p in 0..nrm.hdd[i].len() {
            let h = nrm.hdd[i][p] + depth_damping + mu;
            let inv = 1.0 / h;
            for (ka, &va) in coupled.iter().enumerate() {
                let ba = nrm.hpd[i][p * nc + ka];
                let mut gv = g.fixed_view_mut::<6, 1>(6 * va, 0);
                gv -= ba * (nrm.gd[i][p] * inv);
                for (kb, &vb) in coupled.iter().enumerate() {
                    let bb = nrm.hpd[i][p * nc + kb];
                    let mut sv = s.fixed_view_mut::<6, 6>(6 * va, 6 * vb);
                    sv -= ba * bb.transpose() * inv;
                }
            }
        }
    }
    (s, g)
}

struct Step {
    poses: DVector<f64>,
    depths: Vec<Vec<f64>>,
}

fn solve_step(layout: &Layout, nrm: &Normal, mu: f64, depth_damping: f64) -> Option<Step> {
    let (s, g) = reduce(layout, nrm, mu, depth_damping);
    let poses = if s.nrows() > 0 {
        let chol = Cholesky::<f64, Dyn>::new(s)?;
        -chol.solve(&g)
    } else {
        DVector::zeros(0)
    };
    let depths = layout
        .coupled
        .iter()
        .enumerate()
        .map(|(i, coupled)| {
            let nc = coupled.len();
            (0..nrm.hdd[i].len())
                .map(|p| {
                    let h = nrm.hdd[i][p] + depth_damping + mu;
                    let mut rhs = nrm.gd[i][p];
                    for (k, &v) in coupled.iter().enumerate() {
                        rhs += nrm.hpd[i][p * nc + k].dot(&poses.fixed_rows::<6>(6 * v));
                    }
                    -rhs / h
                })
                .collect()
        })
        .collect();
    Some(Step { poses, depths })
}

fn apply_step(problem: &MdbaProblem, layout: &Layout, step: &Step, opts: &MdbaOptions) -> Vec<Keyframe> {
    problem
        .keyframes
        .iter()
        .enumerate()
        .map(|(i, kf)| {
            let mut out = kf.clone();
            if let Some(v) = layout.pose_var[i] {
                out.pose = kf.pose.retract(&step.poses.fixed_rows::<6>(6 * v).into_owned());
            }
            for (p, dd) in step.depths[i].iter().enumerate() {
                out.inv_depth[p] = (kf.inv_depth[p] + dd).clamp(opts.inv_depth_min, opts.inv_depth_max);
            }
            out
        })
        .collect()
}

/// Levenberg–Marquardt on the total cost. Returns the updated problem state
/// (poses, inverse depths and, when depths are optimized, marginal depth
/// variances) together with solver statistics.
pub fn solve_mdba(problem: &MdbaProblem, opts: &MdbaOptions) -> Result<(MdbaProblem, MdbaReport), MdbaError> {
    validate(problem, opts)?;
    let layout = Layout::new(problem, opts)?;
    let (factors, n_inertial) = all_factors(problem)?;
    let mut state = problem.clone();
    let initial = cost_with(&state, &factors, n_inertial, opts.huber_delta);
    let mut cost = initial;
    let mut history = vec![cost.total()];
    let mut mu = opts.initial_lm;
    let mut iterations = 0;
    let mut accepted = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let nrm = build_normal(&state, &layout, &factors, opts);
        let mut converged = false;
        loop {
            let Some(step) = solve_step(&layout, &nrm, mu, opts.depth_damping) else {
                mu *= 10.0;
                if mu > 1e16 {
                    return Err(MdbaError::SingularReducedSystem("damping exhausted".into()));
                }
                continue;
            };
            let step_norm = (step.poses.norm_squared()
                + step.depths.iter().flatten().map(|d| d * d).sum::<f64>())
            .sqrt();
            let mut cand = state.clone();
            cand.keyframes = apply_step(&state, &layout, &step, opts);
            let cand_cost = cost_with(&cand, &factors, n_inertial, opts.huber_delta);
            if cand_cost.total() <= cost.total() {
                let decrease = cost.total() - cand_cost.total();
                state = cand;
                cost = cand_cost;
                history.push(cost.total());
                accepted += 1;
                mu = (mu / 10.0).max(1e-15);
                if step_norm < opts.step_tol || decrease == 0.0 {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
            if mu > 1e10 || step_norm < opts.step_tol {
                converged = true;
                break;
            }
        }
        if converged || cost.total() == 0.0 {
            break;
        }
    }
    if opts.optimize_depths {
        let vars = depth_covariance_with(&state, &layout, &factors, opts)?;
        for (kf, v) in state.keyframes.iter_mut().zip(vars) {
            if let Some(v) = v {
                kf.depth_var = v;
            }
        }
    }
    let report = MdbaReport { iterations, accepted_steps: accepted, initial, final_cost: cost, history };
    Ok((state, report))
}

/// Pose-only refinement: inverse depths are held at their current values.
pub fn pose_only_mdba(problem: &MdbaProblem, opts: &MdbaOptions) -> Result<(MdbaProblem, MdbaReport), MdbaError> {
    let opts = MdbaOptions { optimize_depths: false, ..opts.clone() };
    solve_mdba(problem, &opts)
}

/// Marginal variance of every free inverse depth at the current state:
/// `var(d_k) = [(H_dd − H_dp H_pp⁻¹ H_pd)⁻¹]_kk`, computed as
/// `1/h_k + b_kᵀ S⁻¹ b_k / h_k²` with `S` the reduced camera matrix.
/// Keyframes whose depths are not variables yield `None`.
pub fn extract_depth_covariance(problem: &MdbaProblem, opts: &MdbaOptions) -> Result<Vec<Option<Vec<f64>>>, MdbaError> {
    validate(problem, opts)?;
    let layout = Layout::new(problem, opts)?;
    let (factors, _) = all_factors(problem)?;
    depth_covariance_with(problem, &layout, &factors, opts)
}

fn depth_covariance_with(
    problem: &MdbaProblem,
    layout: &Layout,
    factors: &[RelativePoseFactor],
    opts: &MdbaOptions,
) -> Result<Vec<Option<Vec<f64>>>, MdbaError> {
    let nrm = build_normal(problem, layout, factors, opts);
    let (s, _) = reduce(layout, &nrm, 0.0, opts.depth_damping);
    let n = s.nrows();
    let s_inv = if n == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let chol = Cholesky::<f64, Dyn>::new(s.clone()).or_else(|| {
            let mut damped = s.clone();
            for i in 0..n {
                damped[(i, i)] += opts.depth_damping;
            }
            Cholesky::<f64, Dyn>::new(damped)
        });
        chol.ok_or(MdbaError::IndefiniteHessian)?.inverse()
    };
    Ok(layout
        .coupled
        .iter()
        .enumerate()
        .map(|(i, coupled)| {
            if !layout.depth_free[i] {
                return None;
            }
            let nc = coupled.len();
            Some(
                (0..nrm.hdd[i].len())
                    .map(|p| {
                        let h = nrm.hdd[i][p] + opts.depth_damping;
                        let mut quad = 0.0;
                        for (ka, &va) in coupled.iter().enumerate() {
                            let ba = nrm.hpd[i][p * nc + ka];
                            for (kb, &vb) in coupled.iter().enumerate() {
                                let bb = nrm.hpd[i][p * nc + kb];
                                quad += (ba.transpose() * s_inv.fixed_view::<6, 6>(6 * va, 6 * vb) * bb)[0];
                            }
                        }
                        1.0 / h + quad / (h * h)
                    })
                    .collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 3.5, 2.5, 8, 6).unwrap()
    }

    fn plane_keyframe(id: usize, pose: Pose, depth: f64) -> Keyframe {
        let k = intrinsics();
        Keyframe::new(id, id as f64, pose, vec![1.0 / depth; k.pixel_count()], k)
    }

    fn synth_edge(src: &Keyframe, dst: &Keyframe) -> FrameGraphEdge {
        let mut target = Vec::new();
        let mut weight = Vec::new();
        for p in 0..src.inv_depth.len() {
            let x = dst.pose.transform_point(&src.pose.inverse().transform_point(
                &src.intrinsics.backproject(&src.pixel(p), src.inv_depth[p]).unwrap(),
            ));
            match src.intrinsics.project(&x) {
                Ok(u) if src.intrinsics.contains(&u) => {
                    target.push(u);
                    weight.push(Vector2::new(1.0, 1.0));
                }
                _ => {
                    target.push(Vector2::zeros());
                    weight.push(Vector2::zeros());
                }
            }
        }
        FrameGraphEdge { src: src.id, dst: dst.id, target, weight }
    }

    #[test]
    fn self_consistent_warp_has_zero_residual() {
        let a = plane_keyframe(0, Pose::identity(), 2.0);
        let b = plane_keyframe(1, Pose::from_translation(Vector3::new(-0.05, 0.0, 0.0)), 2.0);
        let e = synth_edge(&a, &b);
        let res = reprojection_residual(&e, &a, &b);
        assert!(res.iter().filter(|r| r.valid).count() > 20);
        assert!(res.iter().all(|r| r.residual.norm() < 1e-12));
    }

    #[test]
    fn translated_camera_gives_analytic_residual() {
        let a = plane_keyframe(0, Pose::identity(), 2.0);
        let b = plane_keyframe(1, Pose::identity(), 2.0);
        let e = synth_edge(&a, &b);
        // move the camera center of `b` by +0.1 m along x
        let moved = Keyframe { pose: Pose::from_translation(Vector3::new(-0.1, 0.0, 0.0)), ..b };
        let res = reprojection_residual(&e, &a, &moved);
        let expected = 20.0 * 0.1 * 0.5;
        let valid: Vec<_> = res.iter().filter(|r| r.valid).collect();
        assert!(!valid.is_empty());
        for r in valid {
            assert!((r.residual.x - expected).abs() < 1e-12);
            assert!(r.residual.y.abs() < 1e-12);
        }
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let a = plane_keyframe(0, Pose::identity(), 1.0);
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
        let b = plane_keyframe(1, behind, 1.0);
        let e = FrameGraphEdge {
            src: 0,
            dst: 1,
            target: vec![Vector2::new(3.0, 2.0); 48],
            weight: vec![Vector2::new(1.0, 1.0); 48],
        };
        let res = reprojection_residual(&e, &a, &b);
        assert!(res.iter().all(|r| !r.valid && r.weight == Vector2::zeros()));
    }

    #[test]
    fn inertial_residual_cases() {
        let a = plane_keyframe(0, Pose::identity(), 1.0);
        let rel = Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.2, 0.0), Vector3::new(0.1, 0.0, 0.3));
        let b = plane_keyframe(1, rel.inverse(), 1.0);
        let prior = InertialPrior::isotropic(0, 1, &rel, 1.0, 1.0);
        assert!(inertial_residual(&prior, &a, &b).unwrap().norm() < 1e-12);

        // rotate the relative motion by 5° about y
        let rotated = Pose::new(rel.rotation * UnitQuaternion::from_euler_angles(0.0, 5f64.to_radians(), 0.0), rel.translation);
        let c = plane_keyframe(1, rotated.inverse(), 1.0);
        let r = inertial_residual(&prior, &a, &c).unwrap();
        let rot = Vector3::new(r[3], r[4], r[5]);
        assert!((rot.norm() - 5f64.to_radians()).abs() < 1e-12);

        let shifted = Pose::new(rel.rotation, rel.translation + Vector3::new(0.2, 0.0, 0.0));
        let d = plane_keyframe(1, shifted.inverse(), 1.0);
        let unit = inertial_residual(&prior, &a, &d).unwrap();
        let wide = InertialPrior { cov_t: Matrix3::identity() * 4.0, ..prior.clone() };
        let half = inertial_residual(&wide, &a, &d).unwrap();
        assert!((half.fixed_rows::<3>(0).norm() * 2.0 - unit.fixed_rows::<3>(0).norm()).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_pd_covariance() {
        let mut p = InertialPrior::isotropic(0, 1, &Pose::identity(), 1.0, 1.0);
        p.cov_t[(0, 0)] = 0.0;
        assert!(matches!(p.factor(), Err(MdbaError::InvalidProblem(_))));
    }

    #[test]
    fn keyframe_rule() {
        assert!(!select_keyframe(0.0, 4.0));
        assert!(!select_keyframe(4.0, 4.0));
        assert!(select_keyframe(5.0, 4.0));
    }

    #[test]
    fn fixed_point_at_ground_truth() {
        let a = plane_keyframe(0, Pose::identity(), 2.0);
        let b = plane_keyframe(1, Pose::from_translation(Vector3::new(-0.05, 0.01, 0.0)), 2.0);
        let e = synth_edge(&a, &b);
        let prior = InertialPrior::isotropic(0, 1, &a.pose.compose(&b.pose.inverse()), 0.02, 0.01);
        let problem = MdbaProblem::new(vec![a, b], vec![e], vec![prior], 1.0);
        let (out, rep) = solve_mdba(&problem, &MdbaOptions::default()).unwrap();
        assert_eq!(rep.final_cost.total(), 0.0);
        assert_eq!(out.keyframes[1].pose, problem.keyframes[1].pose);
        assert_eq!(out.keyframes[0].inv_depth, problem.keyframes[0].inv_depth);
    }

    #[test]
    fn missing_gauge_and_disconnected_graph() {
        let a = plane_keyframe(0, Pose::identity(), 2.0);
        let b = plane_keyframe(1, Pose::identity(), 2.0);
        let c = plane_keyframe(2, Pose::identity(), 2.0);
        let e = synth_edge(&a, &b);
        let mut p = MdbaProblem::new(vec![a, b, c], vec![e], vec![], 1.0);
        assert!(matches!(solve_mdba(&p, &MdbaOptions::default()), Err(MdbaError::SingularReducedSystem(_))));
        p.gauge = 9;
        assert!(matches!(solve_mdba(&p, &MdbaOptions::default()), Err(MdbaError::SingularReducedSystem(_))));
    }

    #[test]
    fn no_information_is_an_error() {
        let a = plane_keyframe(0, Pose::identity(), 2.0);
        let b = plane_keyframe(1, Pose::identity(), 2.0);
        let mut e = synth_edge(&a, &b);
        e.weight.iter_mut().for_each(|w| *w = Vector2::zeros());
        let p = MdbaProblem::new(vec![a, b], vec![e], vec![], 1.0);
        assert_eq!(solve_mdba(&p, &MdbaOptions::default()).unwrap_err(), MdbaError::NonPositiveWeightSum);
    }

    #[test]
    fn unobserved_pixel_variance_is_damping_sentinel() {
        let a = plane_keyframe(0, Pose::identity(), 2.0);
        let b = plane_keyframe(1, Pose::from_translation(Vector3::new(-0.05, 0.0, 0.0)), 2.0);
        let mut e = synth_edge(&a, &b);
        e.weight[0] = Vector2::zeros();
        let p = MdbaProblem::new(vec![a, b], vec![e], vec![], 1.0);
        let vars = extract_depth_covariance(&p, &MdbaOptions::default()).unwrap();
        assert_eq!(vars[0].as_ref().unwrap()[0], 1.0 / DEPTH_DAMPING);
        assert!(vars[0].as_ref().unwrap().iter().all(|v| *v > 0.0));
    }

    fn tangent(k: usize, h: f64) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v[k] = h;
        v
    }

    #[test]
    fn warp_jacobians_match_finite_differences() {
        let k = intrinsics();
        let gs = Pose::new(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.05), Vector3::new(0.1, 0.2, -0.1));
        let gd = Pose::new(UnitQuaternion::from_euler_angles(0.12, -0.17, 0.02), Vector3::new(0.05, 0.22, -0.08));
        let u = Vector2::new(3.0, 2.0);
        let d = 0.6;
        let t = Vector2::new(4.0, 2.5);
        let lin = warp_linearize(&k, &gs, &gd, &u, d, &t).unwrap();
        let h = 1e-6;
        for c in 0..6 {
            let fs = |s: f64| warp_residual(&k, &gs.retract(&tangent(c, s)), &gd, &u, d, &t).unwrap();
            let fd = |s: f64| warp_residual(&k, &gs, &gd.retract(&tangent(c, s)), &u, d, &t).unwrap();
            let ns = (fs(h) - fs(-h)) / (2.0 * h);
            let nd = (fd(h) - fd(-h)) / (2.0 * h);
            assert!((ns - lin.d_src.column(c)).norm() < 1e-6, "src col {c}");
            assert!((nd - lin.d_dst.column(c)).norm() < 1e-6, "dst col {c}");
        }
        let fz = |s: f64| warp_residual(&k, &gs, &gd, &u, d + s, &t).unwrap();
        assert!(((fz(h) - fz(-h)) / (2.0 * h) - lin.d_depth).norm() < 1e-6);
    }

    #[test]
    fn relative_factor_jacobians_match_finite_differences() {
        let gs = Pose::new(UnitQuaternion::from_euler_angles(0.3, -0.2, 0.5), Vector3::new(0.4, 0.2, -0.1));
        let gd = Pose::new(UnitQuaternion::from_euler_angles(-0.1, 0.25, 0.7), Vector3::new(0.1, -0.3, 0.2));
        let meas = Pose::new(UnitQuaternion::from_euler_angles(0.05, 0.1, -0.2), Vector3::new(0.2, 0.1, 0.0));
        let prior = InertialPrior {
            src: 0,
            dst: 1,
            rel_translation: meas.translation,
            rel_rotation: meas.rotation,
            cov_t: Matrix3::new(0.04, 0.01, 0.0, 0.01, 0.05, 0.0, 0.0, 0.0, 0.02),
            cov_r: Matrix3::identity() * 0.01,
        };
        let f = prior.factor().unwrap().scaled(3.0);
        let (_, js, jd) = f.linearize(&gs, &gd);
        let h = 1e-6;
        for c in 0..6 {
            let ns = (f.residual(&gs.retract(&tangent(c, h)), &gd) - f.residual(&gs.retract(&tangent(c, -h)), &gd)) / (2.0 * h);
            let nd = (f.residual(&gs, &gd.retract(&tangent(c, h))) - f.residual(&gs, &gd.retract(&tangent(c, -h)))) / (2.0 * h);
            assert!((ns - js.column(c)).norm() < 1e-6, "src col {c}");
            assert!((nd - jd.column(c)).norm() < 1e-6, "dst col {c}");
        }
    }
}
