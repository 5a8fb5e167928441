//! Synthetic sessions: analytic terrain, a walking body with exact foot
//! contacts, a head-mounted camera, and every measurement the pipeline
//! consumes, generated deterministically from a seed.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{DVector, Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CorrEdge, Dataset, DatasetInfo, GroundTruth, KeyframeRecord, PriorRecord};
use crate::geometry::{rotation_exp, CameraIntrinsics, Pose, Sim3Transform, Stamped};
use crate::map::GlobalMap;
use crate::mdba::select_keyframe;
use crate::physics::{head_pose, oracle_pose_estimate, EstimatorNoise};
use crate::skeleton::{set_joint_rotation, BodyState, SkeletonModel};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("leg cannot reach its foot target at t = {0:.3} s")]
    Unreachable(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneKind {
    Flat,
    /// Single step up of `height` at `x`.
    Step { x: f64, height: f64 },
    /// `count` steps of `rise`, each tread `run` deep, the first riser at
    /// `start_x`.
    Stairs { start_x: f64, count: usize, rise: f64, run: f64 },
    /// Linear slope from `start_x` rising `height` over `length`.
    Ramp { start_x: f64, length: f64, height: f64 },
    /// `amplitude·sin(2πx/λ)·cos(2πy/λ)`.
    Heightfield { amplitude: f64, wavelength: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    /// Samples per square meter of the ground-truth cloud.
    pub sample_density: f64,
    pub seed: u64,
    /// `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { kind: SceneKind::Flat, sample_density: 2500.0, seed: 0, bounds: [-3.0, 12.0, -3.0, 3.0] }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if !(self.sample_density > 0.0) {
            return bad("sample density must be positive");
        }
        let [x0, x1, y0, y1] = self.bounds;
        if !(x1 > x0 && y1 > y0) {
            return bad("empty bounds");
        }
        match self.kind {
            SceneKind::Flat => {}
            SceneKind::Step { height, .. } if !(height > 0.0) => return bad("step height must be positive"),
            SceneKind::Stairs { count, rise, run, .. } if count == 0 || !(rise > 0.0) || !(run > 0.0) => {
                return bad("stairs need count > 0, rise > 0, run > 0")
            }
            SceneKind::Ramp { length, .. } if !(length > 0.0) => return bad("ramp length must be positive"),
            SceneKind::Heightfield { wavelength, .. } if !(wavelength > 0.0) => {
                return bad("heightfield wavelength must be positive")
            }
            _ => {}
        }
        Ok(())
    }

    /// Terrain height at `(x, y)`.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            SceneKind::Flat => 0.0,
            SceneKind::Step { x: sx, height } => {
                if x >= sx {
                    height
                } else {
                    0.0
                }
            }
            SceneKind::Stairs { start_x, count, rise, run } => {
                if x < start_x {
                    0.0
                } else {
                    let k = ((x - start_x) / run).floor() as usize + 1;
                    k.min(count) as f64 * rise
                }
            }
            SceneKind::Ramp { start_x, length, height } => ((x - start_x) / length).clamp(0.0, 1.0) * height,
            SceneKind::Heightfield { amplitude, wavelength } => {
                amplitude * (TAU * x / wavelength).sin() * (TAU * y / wavelength).cos()
            }
        }
    }

    /// x positions of vertical faces with their lower and upper heights.
    fn risers(&self) -> Vec<(f64, f64, f64)> {
        match self.kind {
            SceneKind::Step { x, height } => vec![(x, 0.0, height)],
            SceneKind::Stairs { start_x, count, rise, run } => {
                (0..count).map(|k| (start_x + k as f64 * run, k as f64 * rise, (k + 1) as f64 * rise)).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Parameter `t` of the first intersection of `origin + t·dir` with the
    /// terrain, searched up to `t_max`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let f = |t: f64| {
            let p = origin + dir * t;
            p.z - self.height(p.x, p.y)
        };
        if f(0.0) <= 0.0 {
            return None;
        }
        let step = 0.01 / dir.norm();
        let mut lo = 0.0;
        let mut t = step;
        while t <= t_max {
            if f(t) <= 0.0 {
                let mut hi = t;
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            lo = t;
            t += step;
        }
        None
    }
}

/// Terrain plus its sampled ground-truth cloud.
pub fn generate_scene(spec: &SceneSpec) -> Result<GlobalMap, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = 1.0 / spec.sample_density.sqrt();
    let [x0, x1, y0, y1] = spec.bounds;
    let (nx, ny) = (((x1 - x0) / d).floor() as usize, ((y1 - y0) / d).floor() as usize);
    let mut pts = Vec::with_capacity((nx + 1) * (ny + 1));
    for i in 0..=nx {
        for j in 0..=ny {
            let x = (x0 + (i as f64 + rng.gen_range(-0.25..0.25)) * d).clamp(x0, x1);
            let y = (y0 + (j as f64 + rng.gen_range(-0.25..0.25)) * d).clamp(y0, y1);
            pts.push(Vector3::new(x, y, spec.height(x, y)));
        }
    }
    for (x, lo, hi) in spec.risers() {
        let nz = ((hi - lo) / d).ceil() as usize;
        for j in 0..=ny {
            let y = y0 + j as f64 * d;
            for k in 1..nz {
                pts.push(Vector3::new(x, y, lo + (hi - lo) * k as f64 / nz as f64));
            }
        }
    }
    Ok(GlobalMap::from_points(pts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitSpec {
    /// Walking speed, m/s; 0 stands still.
    pub speed: f64,
    /// Distance between consecutive footprints, meters.
    pub step_length: f64,
    pub duration: f64,
    pub fps: f64,
    /// Start point and a second point giving the walking direction.
    pub path: Vec<[f64; 2]>,
    /// Seconds of standing before the first step.
    pub standing_time: f64,
    /// Amplitude of the head yaw oscillation, radians.
    pub head_sway: f64,
    /// Pelvis height above the supporting ground, meters.
    pub root_height: f64,
}

impl Default for GaitSpec {
    fn default() -> Self {
        Self {
            speed: 0.6,
            step_length: 0.4,
            duration: 10.0,
            fps: 30.0,
            path: vec![[0.0, 0.0], [1.0, 0.0]],
            standing_time: 1.0,
            head_sway: 0.15,
            root_height: 0.88,
        }
    }
}

/// Ground-truth body motion.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub timestamps: Vec<f64>,
    pub states: Vec<BodyState>,
    pub contacts: Vec<[bool; 2]>,
}

const SWING: f64 = 0.8;

struct Gait<'a> {
    scene: &'a SceneSpec,
    spec: &'a GaitSpec,
    origin: Vector2<f64>,
    dir: Vector2<f64>,
    lateral: [f64; 2],
    foot_ahead: f64,
}

impl Gait<'_> {
    fn period(&self) -> f64 {
        if self.spec.speed > 0.0 {
            self.spec.step_length / self.spec.speed
        } else {
            f64::INFINITY
        }
    }

    /// Foot 0 is left, 1 is right; footprint −1 is right.
    fn foot_of(k: i64) -> usize {
        if k.rem_euclid(2) == 1 {
            1
        } else {
            0
        }
    }

    fn footprint(&self, k: i64) -> Vector3<f64> {
        let l = self.spec.step_length;
        let s = k as f64 * l + 0.6 * l;
        let perp = Vector2::new(-self.dir.y, self.dir.x);
        let xy = self.origin + self.dir * s + perp * self.lateral[Self::foot_of(k)];
        Vector3::new(xy.x, xy.y, self.scene.height(xy.x, xy.y))
    }

    fn landing_time(&self, k: i64) -> f64 {
        self.spec.standing_time + k as f64 * self.period()
    }

    fn last_landed(&self, t: f64) -> i64 {
        if !(self.spec.speed > 0.0) || t < self.spec.standing_time {
            0
        } else {
            ((t - self.spec.standing_time) / self.period()).floor() as i64
        }
    }

    /// Foot joint position and whether the foot is in stance.
    fn foot(&self, foot: usize, t: f64) -> (Vector3<f64>, bool) {
        let m = self.last_landed(t);
        let k = if Self::foot_of(m) == foot { m } else { m - 1 };
        let lift = self.landing_time(k + 2) - SWING * self.period();
        let a = self.footprint(k);
        if !(self.spec.speed > 0.0) || t < lift {
            return (a, true);
        }
        let b = self.footprint(k + 2);
        let phi = ((t - lift) / (SWING * self.period())).clamp(0.0, 1.0);
        let c = phi - (TAU * phi).sin() / TAU;
        let clearance = 0.08 + (b.z - a.z).abs();
        let mut p = a + (b - a) * c;
        p.z += clearance * 0.5 * (1.0 - (TAU * phi).cos());
        (p, false)
    }

    fn ground(&self, t: f64) -> f64 {
        let m = self.last_landed(t);
        let h = |k: i64| self.footprint(k).z;
        let from = h(m - 1).min(h(m));
        if !(self.spec.speed > 0.0) {
            return from;
        }
        let start = self.landing_time(m) + (1.0 - SWING) * self.period();
        if t < start {
            return from;
        }
        let to = h(m).min(h(m + 1));
        let x = ((t - start) / (self.landing_time(m + 1) - start)).clamp(0.0, 1.0);
        from + (to - from) * x * x * (3.0 - 2.0 * x)
    }

    fn root_xy(&self, t: f64) -> Vector2<f64> {
        let s = self.spec.speed * (t - self.spec.standing_time).max(0.0) - self.foot_ahead;
        self.origin + self.dir * s
    }
}

struct LegChain {
    hip: usize,
    knee: usize,
    ankle: usize,
    foot: usize,
}

fn leg(skel: &SkeletonModel, side: &str) -> Result<LegChain, SimError> {
    let j = |n: &str| {
        skel.joint_index(&format!("{side}_{n}")).ok_or_else(|| SimError::InvalidSpec(format!("skeleton lacks {side}_{n}")))
    };
    Ok(LegChain { hip: j("hip")?, knee: j("knee")?, ankle: j("ankle")?, foot: j("foot")? })
}

/// Walks the body along the path. Stance feet rest exactly on the terrain;
/// swing feet follow a cycloidal profile.
pub fn generate_trajectory(scene: &SceneSpec, gait: &GaitSpec, skel: &SkeletonModel) -> Result<Motion, SimError> {
    scene.validate()?;
    if !(gait.fps > 0.0) || !(gait.duration > 0.0) || gait.speed < 0.0 || !(gait.step_length > 0.0) {
        return Err(SimError::InvalidSpec("gait needs fps > 0, duration > 0, speed ≥ 0, step_length > 0".into()));
    }
    if gait.path.len() < 2 {
        return Err(SimError::InvalidSpec("path needs a start point and a direction point".into()));
    }
    let origin = Vector2::from(gait.path[0]);
    let dir = Vector2::from(gait.path[1]) - origin;
    if dir.norm() < 1e-9 {
        return Err(SimError::InvalidSpec("degenerate path direction".into()));
    }
    let dir = dir.normalize();
    let legs = [leg(skel, "left")?, leg(skel, "right")?];
    let off = |j: usize| skel.joints()[j].offset;
    for l in &legs {
        for j in [l.knee, l.ankle] {
            let o = off(j);
            if o.x.abs() > 1e-12 || o.y.abs() > 1e-12 || o.z >= 0.0 {
                return Err(SimError::InvalidSpec("leg segments must hang straight down".into()));
            }
        }
    }
    let g = Gait {
        scene,
        spec: gait,
        origin,
        dir,
        lateral: [off(legs[0].hip).y, off(legs[1].hip).y],
        foot_ahead: off(legs[0].foot).x,
    };
    let yaw = dir.y.atan2(dir.x);
    let r_root = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
    let n = (gait.duration * gait.fps).round() as usize;
    let mut timestamps = Vec::with_capacity(n);
    let mut qs = Vec::with_capacity(n);
    let mut contacts = Vec::with_capacity(n);
    for f in 0..n {
        let t = f as f64 / gait.fps;
        let mut q = DVector::zeros(skel.dof());
        let xy = g.root_xy(t);
        let root = Vector3::new(xy.x, xy.y, g.ground(t) + gait.root_height) - r_root * off(0);
        q.fixed_rows_mut::<3>(0).copy_from(&root);
        set_joint_rotation(&mut q, 0, &Vector3::new(0.0, 0.0, yaw));
        let pelvis = root + r_root * off(0);
        let mut stance = [false; 2];
        for (side, l) in legs.iter().enumerate() {
            let (target, on) = g.foot(side, t);
            stance[side] = on;
            let hip = pelvis + r_root * off(l.hip);
            let ankle = target - r_root * off(l.foot);
            let d = r_root.inverse() * (ankle - hip);
            let (l1, l2) = (off(l.knee).norm(), off(l.ankle).norm());
            let dist = (d.x * d.x + d.z * d.z).sqrt();
            if d.y.abs() > 1e-9 || dist > l1 + l2 - 1e-9 || dist < (l1 - l2).abs() + 1e-9 {
                return Err(SimError::Unreachable(t));
            }
            let phi = (-d.x).atan2(-d.z);
            let beta = ((l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist)).clamp(-1.0, 1.0).acos();
            let gamma = ((l2 * l2 + dist * dist - l1 * l1) / (2.0 * l2 * dist)).clamp(-1.0, 1.0).acos();
            let (th1, th2) = (phi - beta, beta + gamma);
            set_joint_rotation(&mut q, l.hip, &Vector3::new(0.0, th1, 0.0));
            set_joint_rotation(&mut q, l.knee, &Vector3::new(0.0, th2, 0.0));
            set_joint_rotation(&mut q, l.ankle, &Vector3::new(0.0, -(th1 + th2), 0.0));
        }
        let sway = gait.head_sway;
        set_joint_rotation(
            &mut q,
            skel.head,
            &Vector3::new(0.0, 0.5 * sway * (TAU * 0.4 * t).sin(), sway * (TAU * 0.25 * t).sin()),
        );
        timestamps.push(t);
        qs.push(q);
        contacts.push(stance);
    }
    let states = (0..n)
        .map(|f| {
            let (a, b) = (f.saturating_sub(1), (f + 1).min(n - 1));
            let qdot = if b > a { (&qs[b] - &qs[a]) / ((b - a) as f64 / gait.fps) } else { DVector::zeros(skel.dof()) };
            BodyState { q: qs[f].clone(), qdot }
        })
        .collect();
    Ok(Motion { timestamps, states, contacts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Downward tilt of the optical axis from the head's forward axis.
    pub pitch_deg: f64,
    /// Standard deviation of the random mount yaw and roll, degrees.
    pub mount_jitter_deg: f64,
    /// Camera center in the head frame, meters.
    pub center_in_head: [f64; 3],
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { width: 32, height: 24, fx: 24.0, fy: 24.0, pitch_deg: 45.0, mount_jitter_deg: 3.0, center_in_head: [0.08, 0.0, 0.05] }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SimError> {
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .map_err(|e| SimError::InvalidSpec(e.to_string()))
    }

    /// Head-to-camera transform `X_c = M·X_h`.
    pub fn mount(&self, rng: &mut ChaCha8Rng) -> Pose {
        let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let jitter = Normal::new(0.0, self.mount_jitter_deg.to_radians().max(0.0)).expect("finite jitter");
        let (yaw, roll) = if self.mount_jitter_deg > 0.0 { (jitter.sample(rng), jitter.sample(rng)) } else { (0.0, 0.0) };
        let tilt = Rotation3::from_euler_angles(roll, self.pitch_deg.to_radians(), yaw);
        let r = UnitQuaternion::from_matrix(&(base * tilt.matrix().transpose()));
        let c = Vector3::from(self.center_in_head);
        Pose::new(r, -(r * c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    /// Confidence attached to every correspondence, 1/px².
    pub confidence: f64,
    /// Fraction of correspondences dropped.
    pub dropout: f64,
    /// Extra noise on the stored relative head motion.
    pub prior_sigma_t: f64,
    pub prior_sigma_r: f64,
    /// Standard deviations written into the prior covariance.
    pub prior_cov_t: f64,
    pub prior_cov_r: f64,
    /// Relative noise on the initial inverse depths.
    pub depth_init_sigma: f64,
    /// Probability of flipping each floor-mask pixel.
    pub mask_flip: f64,
    /// Visual-to-metric inverse depth factor of the monocular frontend.
    pub visual_scale: f64,
    pub visual_init_sigma_t: f64,
    pub visual_init_sigma_r: f64,
    pub extrinsic_sigma_t: f64,
    pub extrinsic_sigma_r: f64,
    /// Relative noise of the initial extrinsic scale.
    pub extrinsic_sigma_s: f64,
    pub estimator: EstimatorNoise,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.5,
            confidence: 4.0,
            dropout: 0.0,
            prior_sigma_t: 0.0,
            prior_sigma_r: 0.0,
            prior_cov_t: 0.02,
            prior_cov_r: 0.01,
            depth_init_sigma: 0.05,
            mask_flip: 0.0,
            visual_scale: 0.6,
            visual_init_sigma_t: 0.01,
            visual_init_sigma_r: 0.005,
            extrinsic_sigma_t: 0.02,
            extrinsic_sigma_r: 0.05,
            extrinsic_sigma_s: 0.1,
            estimator: EstimatorNoise::default(),
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_init_sigma: 0.0,
            visual_init_sigma_t: 0.0,
            visual_init_sigma_r: 0.0,
            extrinsic_sigma_t: 0.0,
            extrinsic_sigma_r: 0.0,
            extrinsic_sigma_s: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionSpec {
    pub scene: SceneSpec,
    pub gait: GaitSpec,
    pub camera: CameraSpec,
    pub noise: NoiseSpec,
    /// Mean flow, pixels, above which a frame becomes a keyframe.
    pub keyframe_flow: f64,
    /// Number of earlier keyframes each keyframe is connected to.
    pub edge_span: usize,
    pub seed: u64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            gait: GaitSpec::default(),
            camera: CameraSpec::default(),
            noise: NoiseSpec::default(),
            keyframe_flow: 4.0,
            edge_span: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSession {
    pub dataset: Dataset,
    pub gt: GroundTruth,
    /// True metric inverse depth of each keyframe, 0 where nothing is hit.
    pub gt_inv_depth: BTreeMap<usize, Vec<f64>>,
    /// True world-to-camera poses per frame.
    pub gt_camera_poses: Vec<Pose>,
    pub mount: Pose,
}

const MAX_RANGE: f64 = 30.0;

/// Metric inverse depth of every pixel of a world-to-camera pose.
pub fn render_inverse_depth(scene: &SceneSpec, k: &CameraIntrinsics, g: &Pose) -> Vec<f64> {
    let cam_to_world = g.inverse();
    let c = cam_to_world.translation;
    (0..k.pixel_count())
        .map(|p| {
            let u = Vector2::new((p % k.width) as f64, (p / k.width) as f64);
            let dir = cam_to_world.rotation * k.ray(&u);
            scene.raycast(&c, &dir, MAX_RANGE).map_or(0.0, |t| 1.0 / t)
        })
        .collect()
}

fn mean_flow(k: &CameraIntrinsics, inv: &[f64], g_a: &Pose, g_b: &Pose) -> f64 {
    let rel = g_b.compose(&g_a.inverse());
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &d) in inv.iter().enumerate() {
        if d <= 0.0 {
            continue;
        }
        let u = Vector2::new((p % k.width) as f64, (p / k.width) as f64);
        let x = rel.transform_point(&(k.ray(&u) / d));
        if let Ok(v) = k.project(&x) {
            sum += (v - u).norm();
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(gauss(rng, sigma), gauss(rng, sigma), gauss(rng, sigma))
}

/// Dense correspondences of `src` into `dst` from ground truth, restricted
/// to pixels visible in both frames.
#[allow(clippy::too_many_arguments)]
fn synth_edge(
    scene: &SceneSpec,
    k: &CameraIntrinsics,
    src: (usize, &Pose, &[f64]),
    dst: (usize, &Pose),
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> CorrEdge {
    let (src_id, g_src, inv) = src;
    let (dst_id, g_dst) = dst;
    let rel = g_dst.compose(&g_src.inverse());
    let dst_c = g_dst.inverse().translation;
    let mut pixels = Vec::with_capacity(inv.len());
    for (p, &d) in inv.iter().enumerate() {
        let noise_u = gauss(rng, noise.pixel_sigma);
        let noise_v = gauss(rng, noise.pixel_sigma);
        let drop = noise.dropout > 0.0 && rng.gen::<f64>() < noise.dropout;
        let none = [0.0f32; 4];
        if d <= 0.0 || drop {
            pixels.push(none);
            continue;
        }
        let u = Vector2::new((p % k.width) as f64, (p / k.width) as f64);
        let x = rel.transform_point(&(k.ray(&u) / d));
        let Ok(v) = k.project(&x) else {
            pixels.push(none);
            continue;
        };
        if x.z <= 1e-6 || !k.contains(&v) {
            pixels.push(none);
            continue;
        }
        let dir = g_dst.inverse().rotation * k.ray(&v);
        let visible = scene.raycast(&dst_c, &dir, MAX_RANGE).is_some_and(|t| (t - x.z).abs() <= 1e-6 * x.z.max(1.0));
        if !visible {
            pixels.push(none);
            continue;
        }
        let w = noise.confidence as f32;
        pixels.push([(v.x + noise_u) as f32, (v.y + noise_v) as f32, w, w]);
    }
    CorrEdge { src: src_id, dst: dst_id, pixels }
}

/// Full synthetic session: ground truth plus the dataset the pipeline reads.
pub fn synthesize(spec: &SessionSpec) -> Result<SyntheticSession, SimError> {
    let skel = SkeletonModel::default_body();
    let scene = &spec.scene;
    let cloud = generate_scene(scene)?;
    let motion = generate_trajectory(scene, &spec.gait, &skel)?;
    let noise = &spec.noise;
    if !(noise.visual_scale > 0.0) {
        return Err(SimError::InvalidSpec("visual_scale must be positive".into()));
    }
    let k = spec.camera.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mount = spec.camera.mount(&mut rng);
    let heads: Vec<Pose> = motion.states.iter().map(|s| head_pose(&skel, &s.q)).collect();
    let cams: Vec<Pose> = heads.iter().map(|h| mount.compose(&h.inverse())).collect();

    let mut keyframes = vec![0usize];
    let mut depths = BTreeMap::new();
    depths.insert(0, render_inverse_depth(scene, &k, &cams[0]));
    for f in 1..cams.len() {
        let last = *keyframes.last().unwrap();
        if select_keyframe(mean_flow(&k, &depths[&last], &cams[last], &cams[f]), spec.keyframe_flow) {
            keyframes.push(f);
            depths.insert(f, render_inverse_depth(scene, &k, &cams[f]));
        }
    }

    let estimator = oracle_pose_estimate(
        &motion.states,
        &motion.contacts,
        &motion.timestamps,
        &noise.estimator,
        spec.seed.wrapping_add(0x5eed),
    );
    let est_heads: Vec<Pose> = estimator.iter().map(|e| head_pose(&skel, &e.state.q).inverse()).collect();
    let ground0 = {
        let r = motion.states[0].root_translation();
        scene.height(r.x, r.y)
    };
    let kappa = noise.visual_scale;
    let mut records = BTreeMap::new();
    let mut visual_init = Vec::new();
    for (n, &f) in keyframes.iter().enumerate() {
        let inv = &depths[&f];
        let mut edges = Vec::new();
        for &j in keyframes[n.saturating_sub(spec.edge_span)..n].iter() {
            edges.push(synth_edge(scene, &k, (f, &cams[f], inv), (j, &cams[j]), noise, &mut rng));
            edges.push(synth_edge(scene, &k, (j, &cams[j], &depths[&j]), (f, &cams[f]), noise, &mut rng));
        }
        let cam_to_world = cams[f].inverse();
        let mask = inv
            .iter()
            .enumerate()
            .map(|(p, &d)| {
                let floor = d > 0.0 && {
                    let u = Vector2::new((p % k.width) as f64, (p / k.width) as f64);
                    let x = cam_to_world.transform_point(&(k.ray(&u) / d));
                    (x.z - ground0).abs() < 1e-3 && (scene.height(x.x, x.y) - ground0).abs() < 1e-3
                };
                let flip = noise.mask_flip > 0.0 && rng.gen::<f64>() < noise.mask_flip;
                floor != flip
            })
            .collect();
        let depth_init = inv
            .iter()
            .map(|&d| if d > 0.0 { (kappa * d * (1.0 + gauss(&mut rng, noise.depth_init_sigma))).max(1e-6) } else { 0.0 })
            .collect();
        let prior = (n > 0).then(|| {
            let prev = keyframes[n - 1];
            let rel = est_heads[prev].compose(&est_heads[f].inverse());
            let rel = Pose::new(
                rel.rotation * rotation_exp(&gauss3(&mut rng, noise.prior_sigma_r)),
                rel.translation + gauss3(&mut rng, noise.prior_sigma_t),
            );
            let mut cov = Matrix6::zeros();
            for a in 0..3 {
                cov[(a, a)] = noise.prior_cov_t.powi(2);
                cov[(a + 3, a + 3)] = noise.prior_cov_r.powi(2);
            }
            PriorRecord { relative: rel, covariance: cov }
        });
        let rel = cams[f].compose(&cams[0].inverse());
        let vis = Pose::new(
            rel.rotation * rotation_exp(&gauss3(&mut rng, noise.visual_init_sigma_r)),
            rel.translation / kappa + gauss3(&mut rng, noise.visual_init_sigma_t / kappa),
        );
        visual_init.push(Stamped { timestamp: motion.timestamps[f], pose: vis.inverse() });
        records.insert(f, KeyframeRecord { frame: f, edges, prior, mask, depth_init });
    }

    let true_t = Sim3Transform::new(1.0 / kappa, mount.rotation, mount.translation / kappa)
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let init_t = Sim3Transform::new(
        true_t.scale() * (1.0 + gauss(&mut rng, noise.extrinsic_sigma_s)).max(0.1),
        mount.rotation * rotation_exp(&gauss3(&mut rng, noise.extrinsic_sigma_r)),
        true_t.translation + gauss3(&mut rng, noise.extrinsic_sigma_t / kappa),
    )
    .map_err(|e| SimError::InvalidSpec(e.to_string()))?;

    let stamped = |poses: &mut dyn Iterator<Item = Pose>| -> Vec<Stamped> {
        poses.zip(&motion.timestamps).map(|(pose, &timestamp)| Stamped { timestamp, pose }).collect()
    };
    let gt = GroundTruth {
        camera: stamped(&mut cams.iter().map(Pose::inverse)),
        head: stamped(&mut heads.iter().copied()),
        root: stamped(&mut motion.states.iter().map(|s| skel.forward_kinematics(&s.q).joint_pose(0))),
        states: motion.states.clone(),
        contacts: motion.contacts.clone(),
        scene: scene.clone(),
        cloud,
        extrinsic: true_t,
    };
    let dataset = Dataset {
        info: DatasetInfo { fps: spec.gait.fps, frame_count: motion.states.len(), keyframes, camera: k },
        skeleton: skel,
        keyframes: records,
        estimator,
        visual_init,
        extrinsic_init: init_t,
    };
    Ok(SyntheticSession { dataset, gt, gt_inv_depth: depths, gt_camera_poses: cams, mount })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SceneKind) -> SceneSpec {
        SceneSpec { kind, ..SceneSpec::default() }
    }

    #[test]
    fn analytic_heights() {
        let flat = spec(SceneKind::Flat);
        assert_eq!(flat.height(3.0, -1.0), 0.0);
        let step = spec(SceneKind::Step { x: 1.0, height: 0.3 });
        assert_eq!(step.height(0.9, 0.0), 0.0);
        assert_eq!(step.height(1.1, 0.0), 0.3);
        let stairs = spec(SceneKind::Stairs { start_x: 1.0, count: 5, rise: 0.15, run: 0.3 });
        for k in 1..=5 {
            let x = 1.0 + (k as f64 - 0.5) * 0.3;
            assert!((stairs.height(x, 0.0) - 0.15 * k as f64).abs() < 1e-12);
        }
        assert!((stairs.height(10.0, 0.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        let s = spec(SceneKind::Step { x: 1.0, height: 0.0 });
        assert!(matches!(generate_scene(&s), Err(SimError::InvalidSpec(_))));
        let s = SceneSpec { sample_density: 0.0, ..SceneSpec::default() };
        assert!(matches!(generate_scene(&s), Err(SimError::InvalidSpec(_))));
    }

    #[test]
    fn raycast_hits_riser_and_tread() {
        let s = spec(SceneKind::Step { x: 1.0, height: 0.3 });
        let o = Vector3::new(0.0, 0.0, 0.1);
        let t = s.raycast(&o, &Vector3::new(1.0, 0.0, 0.0), 5.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        let t = s.raycast(&Vector3::new(2.0, 0.0, 1.3), &Vector3::new(0.0, 0.0, -1.0), 5.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standing_still_is_static_with_both_feet_down() {
        let skel = SkeletonModel::default_body();
        let gait = GaitSpec { speed: 0.0, head_sway: 0.0, duration: 2.0, ..GaitSpec::default() };
        let m = generate_trajectory(&spec(SceneKind::Flat), &gait, &skel).unwrap();
        assert!(m.contacts.iter().all(|c| c[0] && c[1]));
        assert!(m.states.windows(2).all(|w| w[0].q == w[1].q));
    }

    #[test]
    fn stance_feet_on_stair_treads() {
        let skel = SkeletonModel::default_body();
        let scene = spec(SceneKind::Stairs { start_x: 0.9, count: 5, rise: 0.15, run: 0.4 });
        let gait = GaitSpec { speed: 0.5, step_length: 0.4, duration: 8.0, ..GaitSpec::default() };
        let m = generate_trajectory(&scene, &gait, &skel).unwrap();
        let feet = skel.contact_bodies;
        let mut on_upper = 0;
        for (s, c) in m.states.iter().zip(&m.contacts) {
            let kin = skel.forward_kinematics(&s.q);
            for side in 0..2 {
                if c[side] {
                    let p = kin.positions[feet[side]];
                    let h = scene.height(p.x, p.y);
                    assert!((p.z - h).abs() < 1e-9, "stance foot off terrain by {}", p.z - h);
                    if h > 0.5 {
                        on_upper += 1;
                    }
                }
            }
        }
        assert!(on_upper > 0);
    }

    #[test]
    fn flat_walk_covers_distance() {
        let skel = SkeletonModel::default_body();
        let gait = GaitSpec { speed: 1.0, step_length: 0.5, standing_time: 0.0, duration: 10.0, ..GaitSpec::default() };
        let m = generate_trajectory(&spec(SceneKind::Flat), &gait, &skel);
        // long steps at 0.88 m pelvis height exceed the leg length
        assert!(matches!(m, Err(SimError::Unreachable(_))));
        let gait = GaitSpec { step_length: 0.4, root_height: 0.86, ..gait };
        let m = generate_trajectory(&spec(SceneKind::Flat), &gait, &skel).unwrap();
        let start = m.states[0].root_translation();
        let end = m.states.last().unwrap().root_translation();
        let expected = 1.0 * (m.timestamps.last().unwrap() - m.timestamps[0]);
        assert!(((end - start).x - expected).abs() < 1e-9);
    }
}
