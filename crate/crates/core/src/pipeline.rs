//! Full localization and mapping loop over a dataset directory, plus the
//! simulation and evaluation entry points used by the command line.
//!
//! Keyframe optimization runs in the visual frame of the first camera. The
//! estimated head-to-camera similarity `T` converts between that frame and
//! the metric world of the body estimator, anchored at the first keyframe.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    read_state_file, read_trajectory_file, write_sim3, write_state_file, write_trajectory_file, Dataset, DatasetError,
    GroundTruth,
};
use crate::elevation::{ElevationError, ElevationMap, ElevationState};
use crate::geometry::{CameraIntrinsics, Pose, Sim3Transform, Stamped};
use crate::map::GlobalMap;
use crate::mdba::{
    extract_depth_covariance, solve_mdba, FrameGraphEdge, InertialPrior, Keyframe, MdbaError, MdbaOptions, MdbaProblem,
    MdbaReport,
};
use crate::metrics::{
    absolute_position_error, mapping_error, penetration_depth, Alignment, MetricsError, MetricsReport, RuntimeStats,
};
use crate::physics::{
    head_pose, physical_correction, reference_velocity, search_contacts, settle_on_terrain, CorrectionParams,
};
use crate::sim::{synthesize, SessionSpec, SimError};
use crate::skeleton::{BodyState, SkeletonModel};
use crate::vim_init::{
    align_sim3, virtual_foot_plane, AlignReport, FloorMaskSource, InitError, InitWeights, InitializationBundle,
};
use crate::volume::{extract_global_map, integrate_keyframe, FusionParams, TsdfVolume};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("initialization failed: {0}")]
    InitializationFailure(#[from] InitError),
    #[error("bundle adjustment failed: {0}")]
    Mdba(#[from] MdbaError),
    #[error(transparent)]
    Elevation(#[from] ElevationError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit code: 2 config, 3 dataset, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Sim(SimError::InvalidSpec(_)) => 2,
            PipelineError::Dataset(_) | PipelineError::Metrics(_) | PipelineError::Output { .. } => 3,
            PipelineError::InitializationFailure(_)
            | PipelineError::Mdba(_)
            | PipelineError::Elevation(_)
            | PipelineError::Sim(_) => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Number of leading keyframes used for the alignment.
    pub keyframes: usize,
    pub weights: InitWeights,
    /// Refine the leading keyframes with a visual-only solve first.
    pub visual_refine: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { keyframes: 8, weights: InitWeights::default(), visual_refine: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElevationConfig {
    pub extent: f64,
    pub cells: usize,
}

impl Default for ElevationConfig {
    fn default() -> Self {
        Self { extent: 2.0, cells: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub mocap_constraints: bool,
    pub physics: bool,
    pub plane_term: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { mocap_constraints: true, physics: true, plane_term: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Weight of the inertial term.
    pub lambda: f64,
    /// Optimizable keyframes per sliding-window solve.
    pub window: usize,
    /// Older keyframes held fixed at the start of each window.
    pub fixed_keyframes: usize,
    pub init: InitConfig,
    pub mdba: MdbaOptions,
    pub fusion: FusionParams,
    pub elevation: ElevationConfig,
    pub physics: CorrectionParams,
    pub ablation: AblationConfig,
    /// Session generated by `sim` and `all`.
    pub sim: SessionSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 1.0,
            window: 8,
            fixed_keyframes: 2,
            init: InitConfig::default(),
            mdba: MdbaOptions::default(),
            fusion: FusionParams::default(),
            elevation: ElevationConfig::default(),
            physics: CorrectionParams::default(),
            ablation: AblationConfig::default(),
            sim: SessionSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if self.window < 2 {
            return bad(format!("window must be ≥ 2, got {}", self.window));
        }
        if self.init.keyframes < 2 {
            return bad(format!("init.keyframes must be ≥ 2, got {}", self.init.keyframes));
        }
        if self.init.weights.validate().is_err() {
            return bad(format!("invalid init weights {:?}", self.init.weights));
        }
        if !(self.fusion.voxel_size > 0.0) || !(self.fusion.truncation_voxels > 0.0) || !(self.fusion.weight_cap > 0.0) {
            return bad("fusion voxel size, truncation and weight cap must be positive".into());
        }
        if self.elevation.cells < 2 || !(self.elevation.extent > 0.0) {
            return bad("elevation needs cells ≥ 2 and extent > 0".into());
        }
        if self.mdba.huber_delta <= 0.0 || self.mdba.inv_depth_min <= 0.0 || self.mdba.inv_depth_max <= self.mdba.inv_depth_min
        {
            return bad("invalid mdba options".into());
        }
        Ok(())
    }
}

/// Everything a run produces, before it is written to disk.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Camera-to-world poses of the keyframes.
    pub camera: Vec<Stamped>,
    /// Root-to-world poses of every frame.
    pub root: Vec<Stamped>,
    pub states: Vec<BodyState>,
    pub timestamps: Vec<f64>,
    pub map: GlobalMap,
    /// Final keyframes in metric units, world-to-camera.
    pub keyframes: Vec<Keyframe>,
    pub extrinsic: Sim3Transform,
    /// Elevation maps rebuilt at keyframes, keyed by frame.
    pub elevation: Vec<(usize, ElevationMap)>,
    pub reports: Vec<MdbaReport>,
    pub stats: RuntimeStats,
    pub log: Vec<String>,
}

fn edge_from_record(e: &crate::dataset::CorrEdge) -> FrameGraphEdge {
    FrameGraphEdge {
        src: e.src,
        dst: e.dst,
        target: e.pixels.iter().map(|p| Vector2::new(p[0] as f64, p[1] as f64)).collect(),
        weight: e.pixels.iter().map(|p| Vector2::new(p[2] as f64, p[3] as f64)).collect(),
    }
}

/// Initial inverse depths with missing pixels set to the median of the rest.
fn initial_depth(depth: &[f64]) -> Vec<f64> {
    let mut valid: Vec<f64> = depth.iter().copied().filter(|d| *d > 0.0).collect();
    valid.sort_by(f64::total_cmp);
    let fill = valid.get(valid.len() / 2).copied().unwrap_or(1.0);
    depth.iter().map(|&d| if d > 0.0 { d } else { fill }).collect()
}

/// Conversions between the visual frame and the metric world.
#[derive(Clone, Copy, Debug)]
struct Frames {
    extrinsic: Sim3Transform,
    /// World to visual frame.
    world_to_visual: Sim3Transform,
    /// Head to camera, metric.
    mount: Pose,
}

impl Frames {
    fn new(extrinsic: Sim3Transform, first_head: &Pose) -> Self {
        let s = extrinsic.scale();
        Self {
            extrinsic,
            world_to_visual: extrinsic.compose(&Sim3Transform::from_pose(&first_head.inverse())),
            mount: Pose::new(extrinsic.rotation, extrinsic.translation / s),
        }
    }

    fn scale(&self) -> f64 {
        self.extrinsic.scale()
    }

    /// Metric world-to-camera pose of a visual world-to-camera pose.
    fn metric_pose(&self, g: &Pose) -> Pose {
        let unscale = Sim3Transform::new(1.0 / self.scale(), nalgebra::UnitQuaternion::identity(), Vector3::zeros())
            .expect("positive scale");
        unscale.compose(&Sim3Transform::from_pose(g)).compose(&self.world_to_visual).rigid()
    }

    fn metric_keyframe(&self, kf: &Keyframe) -> Keyframe {
        let s = self.scale();
        Keyframe {
            pose: self.metric_pose(&kf.pose),
            inv_depth: kf.inv_depth.iter().map(|d| d * s).collect(),
            depth_var: kf.depth_var.iter().map(|v| v * s * s).collect(),
            ..kf.clone()
        }
    }

    /// Head-to-world pose implied by a visual keyframe pose.
    fn implied_head(&self, g: &Pose) -> Pose {
        self.metric_pose(g).inverse().compose(&self.mount)
    }

    /// Camera relative motion `G_a ∘ G_b⁻¹` (visual units) for a relative head
    /// motion given as world-to-head poses.
    fn camera_prior(&self, src: usize, dst: usize, head_a: &Pose, head_b: &Pose, cov_t: &Matrix3<f64>, cov_r: &Matrix3<f64>) -> InertialPrior {
        self.prior_from_relative(src, dst, &head_a.compose(&head_b.inverse()), cov_t, cov_r)
    }

    fn prior_from_relative(&self, src: usize, dst: usize, rel: &Pose, cov_t: &Matrix3<f64>, cov_r: &Matrix3<f64>) -> InertialPrior {
        let t = &self.extrinsic;
        let cam = t.compose(&Sim3Transform::from_pose(rel)).compose(&t.inverse()).rigid();
        let r = t.rotation.to_rotation_matrix().into_inner();
        let s = t.scale();
        InertialPrior {
            src,
            dst,
            rel_translation: cam.translation,
            rel_rotation: cam.rotation,
            cov_t: r * cov_t * r.transpose() * (s * s),
            cov_r: r * cov_r * r.transpose(),
        }
    }
}

fn anchored(state: &BodyState, offset: &Vector3<f64>) -> BodyState {
    let mut s = state.clone();
    s.set_root_translation(&(state.root_translation() + offset));
    s
}

fn shift_root(state: &mut BodyState, delta: &Vector3<f64>) {
    let t = state.root_translation() + delta;
    state.set_root_translation(&t);
}

struct Mapper {
    params: FusionParams,
    volume: TsdfVolume,
    fused: usize,
}

impl Mapper {
    fn new(params: &FusionParams) -> Self {
        Self { params: params.clone(), volume: TsdfVolume::from_params(params), fused: 0 }
    }

    /// Fuses keyframes `[fused, upto)` permanently.
    fn finalize(&mut self, kfs: &[Keyframe], upto: usize, frames: &Frames) {
        while self.fused < upto {
            integrate_keyframe(&mut self.volume, &frames.metric_keyframe(&kfs[self.fused]), &self.params.filter);
            self.fused += 1;
        }
    }

    /// Map of the fused volume plus the keyframes still being optimized.
    fn snapshot(&self, kfs: &[Keyframe], frames: &Frames) -> GlobalMap {
        let mut vol = self.volume.clone();
        for kf in &kfs[self.fused..] {
            integrate_keyframe(&mut vol, &frames.metric_keyframe(kf), &self.params.filter);
        }
        extract_global_map(&vol, self.params.weight_min)
    }
}

fn edges_by_frame(ds: &Dataset) -> BTreeMap<usize, Vec<FrameGraphEdge>> {
    ds.keyframes.iter().map(|(&f, r)| (f, r.edges.iter().map(edge_from_record).collect())).collect()
}

/// Edges whose both ends are in `ids`.
fn select_edges(edges: &BTreeMap<usize, Vec<FrameGraphEdge>>, ids: &BTreeSet<usize>) -> Vec<FrameGraphEdge> {
    ids.iter()
        .flat_map(|f| edges[f].iter())
        .filter(|e| ids.contains(&e.src) && ids.contains(&e.dst))
        .cloned()
        .collect()
}

/// Result of the start-up stage on the first keyframes.
#[derive(Clone, Debug)]
pub struct Initialization {
    /// Init keyframes in visual units, world = first camera.
    pub keyframes: Vec<Keyframe>,
    pub alignment: AlignReport,
    /// Wall time of visual refinement plus alignment.
    pub elapsed_s: f64,
    pub log: Vec<String>,
}

/// Visual-only refinement of the first keyframes followed by the Sim(3)
/// alignment of head and camera frames.
pub fn initialize(ds: &Dataset, cfg: &PipelineConfig) -> Result<Initialization, PipelineError> {
    let skel = &ds.skeleton;
    let cam: CameraIntrinsics = ds.info.camera;
    let kf_frames = &ds.info.keyframes;
    let n_init = cfg.init.keyframes.min(kf_frames.len());
    if n_init < 2 {
        return Err(InitError::InvalidInput(format!("{} keyframes, need at least 2", kf_frames.len())).into());
    }
    let weights = if cfg.ablation.plane_term { cfg.init.weights } else { InitWeights { alpha: 0.0, ..cfg.init.weights } };
    let mut log = Vec::new();
    let edges = edges_by_frame(ds);
    let mut kfs: Vec<Keyframe> = Vec::with_capacity(kf_frames.len());
    for (n, &f) in kf_frames.iter().take(n_init).enumerate() {
        let pose = ds.visual_init.get(n).ok_or_else(|| DatasetError::Malformed {
            path: PathBuf::from("visual_init.txt"),
            reason: format!("no pose for keyframe {n}"),
        })?;
        kfs.push(Keyframe::new(f, ds.info.timestamp(f), pose.pose.inverse(), initial_depth(&ds.keyframes[&f].depth_init), cam));
    }

    let started = Instant::now();
    let init_ids: BTreeSet<usize> = kfs.iter().map(|k| k.id).collect();
    if cfg.init.visual_refine {
        let problem = MdbaProblem::new(kfs.clone(), select_edges(&edges, &init_ids), Vec::new(), 0.0);
        let opts = MdbaOptions { fixed: BTreeSet::from([kfs[0].id]), ..cfg.mdba.clone() };
        let (solved, report) = solve_mdba(&problem, &opts)?;
        log.push(format!("visual refinement: cost {:.6e} → {:.6e}", report.initial.total(), report.final_cost.total()));
        let vars = extract_depth_covariance(&solved, &opts)?;
        kfs = solved.keyframes;
        for (kf, var) in kfs.iter_mut().zip(vars) {
            if let Some(v) = var {
                kf.depth_var = v;
            }
        }
    }
    let raw_heads: Vec<Pose> = ds.estimator.iter().map(|e| head_pose(skel, &e.state.q)).collect();
    let first = kf_frames[0];
    let up_head = raw_heads[first].rotation.inverse() * Vector3::z();
    let mut floor_points = Vec::new();
    for kf in &kfs {
        let mask = &ds.keyframes[&kf.id].mask;
        let to_first = kf.pose.inverse();
        for (p, &m) in mask.iter().enumerate() {
            // floor pixels with poorly constrained depth would tilt the plane fit
            let confident = !cfg.init.visual_refine || cfg.fusion.filter.keeps(kf.inv_depth[p], kf.depth_var[p]);
            if m && confident && ds.keyframes[&kf.id].depth_init[p] > 0.0 {
                floor_points.push(to_first.transform_point(&(cam.ray(&kf.pixel(p)) / kf.inv_depth[p])));
            }
        }
    }
    let bundle = InitializationBundle {
        camera_poses: kfs.iter().map(|k| k.pose).collect(),
        head_poses: kfs.iter().map(|k| raw_heads[k.id].inverse()).collect(),
        floor_points,
        camera_up: ds.extrinsic_init.rotation * up_head,
        foot_plane: virtual_foot_plane(&ds.estimator[first].state, skel),
        floor_mask_source: FloorMaskSource::External,
    };
    let aligned = align_sim3(&bundle, &weights, &ds.extrinsic_init)?;
    let elapsed_s = started.elapsed().as_secs_f64();
    log.push(format!(
        "initialization: scale {:.6}, {} iterations, objective {:.3e}, {:.3} s",
        aligned.transform.scale(),
        aligned.iterations,
        aligned.objective,
        elapsed_s
    ));
    Ok(Initialization { keyframes: kfs, alignment: aligned, elapsed_s, log })
}


/// Runs the full loop on an in-memory dataset.
pub fn process(ds: &Dataset, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut log = Vec::new();
    let mut note = |line: String| {
        log::info!("{line}");
        log.push(line);
    };
    let skel = &ds.skeleton;
    let cam: CameraIntrinsics = ds.info.camera;
    let kf_frames = &ds.info.keyframes;
    let n_frames = ds.info.frame_count;
    if ds.estimator.len() != n_frames {
        return Err(DatasetError::Malformed {
            path: PathBuf::from("estimator.txt"),
            reason: format!("{} states for {} frames", ds.estimator.len(), n_frames),
        }
        .into());
    }
    let n_init = cfg.init.keyframes.min(kf_frames.len());
    if n_init < 2 {
        return Err(InitError::InvalidInput(format!("{} keyframes, need at least 2", kf_frames.len())).into());
    }
    let dt = 1.0 / ds.info.fps;
    let lambda = if cfg.ablation.mocap_constraints { cfg.lambda } else { 0.0 };
    note(format!(
        "{} frames, {} keyframes, λ = {lambda}, physics {}, plane term {}",
        n_frames,
        kf_frames.len(),
        cfg.ablation.physics,
        cfg.ablation.plane_term
    ));

    let edges = edges_by_frame(ds);
    let window_edges = |ids: &BTreeSet<usize>| select_edges(&edges, ids);
    let prior_cov = |f: usize| -> Result<(Matrix3<f64>, Matrix3<f64>), PipelineError> {
        let p = ds.keyframes[&f].prior.as_ref().ok_or_else(|| DatasetError::Malformed {
            path: PathBuf::from(format!("frames/{f:06}.prior")),
            reason: "missing prior".into(),
        })?;
        Ok((p.covariance.fixed_view::<3, 3>(0, 0).into_owned(), p.covariance.fixed_view::<3, 3>(3, 3).into_owned()))
    };

    let mut stats = RuntimeStats { frames: n_frames, keyframes: kf_frames.len(), ..Default::default() };
    let mut reports = Vec::new();
    let init = initialize(ds, cfg)?;
    for line in &init.log {
        note(line.clone());
    }
    stats.init_time_s = init.elapsed_s;
    let mut kfs = init.keyframes;
    let aligned = init.alignment;
    let solve_opts = |fixed: BTreeSet<usize>| MdbaOptions { fixed, ..cfg.mdba.clone() };
    let raw_heads: Vec<Pose> = ds.estimator.iter().map(|e| head_pose(skel, &e.state.q)).collect();
    let first = kf_frames[0];
    let frames = Frames::new(aligned.transform, &raw_heads[first]);

    // inertial priors between consecutive keyframes, keyed by the later one
    let mut priors: BTreeMap<usize, InertialPrior> = BTreeMap::new();
    for w in kf_frames[..n_init].windows(2) {
        let (ct, cr) = prior_cov(w[1])?;
        let rec = ds.keyframes[&w[1]].prior.as_ref().expect("checked above");
        priors.insert(w[1], frames.prior_from_relative(w[0], w[1], &rec.relative, &ct, &cr));
    }

    let mut mapper = Mapper::new(&cfg.fusion);
    let mut solve_window = |kfs: &mut Vec<Keyframe>,
                            priors: &BTreeMap<usize, InertialPrior>,
                            stats: &mut RuntimeStats|
     -> Result<(), PipelineError> {
        let len = kfs.len();
        let lo = len.saturating_sub(cfg.window);
        let start = lo.saturating_sub(cfg.fixed_keyframes);
        let mut fixed: BTreeSet<usize> = kfs[start..lo].iter().map(|k| k.id).collect();
        if fixed.is_empty() {
            fixed.insert(kfs[start].id);
        }
        let ids: BTreeSet<usize> = kfs[start..].iter().map(|k| k.id).collect();
        let window_priors: Vec<InertialPrior> =
            kfs[start + 1..].iter().filter_map(|k| priors.get(&k.id)).cloned().collect();
        let problem = MdbaProblem::new(kfs[start..].to_vec(), window_edges(&ids), window_priors, lambda);
        let opts = solve_opts(fixed);
        let (solved, report) = solve_mdba(&problem, &opts)?;
        let vars = extract_depth_covariance(&solved, &opts)?;
        for (i, (kf, var)) in solved.keyframes.into_iter().zip(vars).enumerate() {
            let slot = &mut kfs[start + i];
            let depth_var = var.unwrap_or_else(|| slot.depth_var.clone());
            *slot = Keyframe { depth_var, ..kf };
        }
        stats.mdba_solves += 1;
        stats.mdba_iterations += report.iterations;
        stats.mdba_final_cost += report.final_cost.total();
        reports.push(report);
        Ok(())
    };
    solve_window(&mut kfs, &priors, &mut stats)?;

    let kf_index: BTreeMap<usize, usize> = kf_frames.iter().enumerate().map(|(n, &f)| (f, n)).collect();
    let down = Unit::new_normalize(-Vector3::z());
    let feet_height = |s: &BodyState| {
        let kin = skel.forward_kinematics(&s.q);
        skel.contact_bodies.iter().map(|&b| kin.positions[b].z).fold(f64::INFINITY, f64::min)
    };
    let mut elev_state = ElevationState::new(cfg.elevation.extent, cfg.elevation.cells, down, feet_height(&ds.estimator[0].state));
    let mut elevation = Vec::new();

    let mut offset = Vector3::zeros();
    let mut reference_prev = BodyState { qdot: BodyState::rest(skel).qdot, ..ds.estimator[0].state.clone() };
    let mut state = reference_prev.clone();
    let mut corrected: Vec<BodyState> = Vec::with_capacity(n_frames);
    let mut last_kf_head: Option<Pose> = None;
    // the leading keyframes are optimized before any frame is corrected
    let mut current_map = elev_state.refresh_on_keyframe(&mapper.snapshot(&kfs, &frames), &state.root_translation())?;
    for f in 0..n_frames {
        let target = anchored(&ds.estimator[f].state, &offset);
        let reference = if f == 0 {
            reference_prev.clone()
        } else {
            BodyState { qdot: reference_velocity(&reference_prev.q, &target.q, dt), q: target.q }
        };
        if f > 0 {
            state = if cfg.ablation.physics {
                let contacts =
                    search_contacts(skel, &state.q, &state.qdot, ds.estimator[f].contact_probabilities, &current_map, &cfg.physics);
                match physical_correction(skel, &reference, &reference_prev, &state, &contacts, dt, &cfg.physics) {
                    Ok(s) if s.is_finite() => s,
                    _ => {
                        stats.physics_failures += 1;
                        reference.clone()
                    }
                }
            } else {
                reference.clone()
            };
        }
        reference_prev = reference;

        if let Some(&n) = kf_index.get(&f) {
            if n >= n_init {
                let prev = kf_frames[n - 1];
                let (ct, cr) = prior_cov(f)?;
                let prior = match (&last_kf_head, cfg.ablation.physics) {
                    (Some(prev_head), true) => {
                        frames.camera_prior(prev, f, &prev_head.inverse(), &head_pose(skel, &state.q).inverse(), &ct, &cr)
                    }
                    _ => {
                        let rec = ds.keyframes[&f].prior.as_ref().expect("checked by prior_cov");
                        frames.prior_from_relative(prev, f, &rec.relative, &ct, &cr)
                    }
                };
                let measured = Pose::new(prior.rel_rotation, prior.rel_translation);
                let pose = measured.inverse().compose(&kfs[n - 1].pose);
                priors.insert(f, prior);
                kfs.push(Keyframe::new(f, ds.info.timestamp(f), pose, initial_depth(&ds.keyframes[&f].depth_init), cam));
                solve_window(&mut kfs, &priors, &mut stats)?;
                mapper.finalize(&kfs, kfs.len().saturating_sub(cfg.window), &frames);
            }
            let elev = elev_state.refresh_on_keyframe(&mapper.snapshot(&kfs, &frames), &state.root_translation())?;
            elevation.push((f, (*elev).clone()));
            current_map = elev;
            // re-anchor the estimator on the camera
            let implied = frames.implied_head(&kfs[n].pose).translation;
            let new_offset = implied - raw_heads[f].translation;
            let delta = new_offset - offset;
            offset = new_offset;
            shift_root(&mut state, &delta);
            shift_root(&mut reference_prev, &delta);
            last_kf_head = Some(head_pose(skel, &state.q));
        }
        if f == 0 && cfg.ablation.physics {
            let contacts =
                search_contacts(skel, &state.q, &state.qdot, ds.estimator[0].contact_probabilities, &current_map, &cfg.physics);
            state = settle_on_terrain(&state, &contacts);
            last_kf_head = last_kf_head.map(|_| head_pose(skel, &state.q));
        }
        corrected.push(state.clone());
    }
    mapper.finalize(&kfs, kfs.len(), &frames);
    let map = extract_global_map(&mapper.volume, cfg.fusion.weight_min);
    note(format!("map: {} points from {} keyframes", map.len(), kfs.len()));

    let timestamps: Vec<f64> = (0..n_frames).map(|f| ds.info.timestamp(f)).collect();
    let camera = kfs.iter().map(|k| Stamped { timestamp: k.timestamp, pose: frames.metric_pose(&k.pose).inverse() }).collect();
    let root = corrected
        .iter()
        .zip(&timestamps)
        .map(|(s, &timestamp)| Stamped { timestamp, pose: skel.forward_kinematics(&s.q).joint_pose(0) })
        .collect();
    stats.wall_time_s = started.elapsed().as_secs_f64();
    note(format!(
        "{} solves, {} iterations, final cost sum {:.6e}, {} physics fallbacks, {:.3} s",
        stats.mdba_solves, stats.mdba_iterations, stats.mdba_final_cost, stats.physics_failures, stats.wall_time_s
    ));
    Ok(RunOutput {
        camera,
        root,
        states: corrected,
        timestamps,
        map,
        keyframes: kfs.iter().map(|k| frames.metric_keyframe(k)).collect(),
        extrinsic: aligned.transform,
        elevation,
        reports,
        stats,
        log,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Output { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, PipelineError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Writes a run's outputs into `out`.
pub fn write_outputs(out: &Path, run: &RunOutput) -> Result<(), PipelineError> {
    let elev_dir = out.join("elevation");
    fs::create_dir_all(&elev_dir).map_err(io_err(&elev_dir))?;
    write_trajectory_file(&out.join("camera.txt"), &run.camera)?;
    write_trajectory_file(&out.join("root.txt"), &run.root)?;
    write_state_file(&out.join("states.txt"), &run.timestamps, &run.states)?;
    let ply = out.join("map.ply");
    run.map.write_ply(create(&ply)?).map_err(io_err(&ply))?;
    let ext = out.join("extrinsic.txt");
    write_sim3(create(&ext)?, &run.extrinsic).map_err(io_err(&ext))?;
    for (f, e) in &run.elevation {
        let p = elev_dir.join(format!("{f:06}.txt"));
        e.write_grid(create(&p)?).map_err(io_err(&p))?;
    }
    let log = out.join("run.log");
    fs::write(&log, run.log.join("\n") + "\n").map_err(io_err(&log))?;
    let stats = out.join("runtime.json");
    fs::write(&stats, serde_json::to_string_pretty(&run.stats).expect("plain struct")).map_err(io_err(&stats))?;
    Ok(())
}

/// Reads the dataset in `dataset_dir`, runs the loop and writes the outputs
/// into `out`. When the dataset carries ground truth the metrics report is
/// written as well.
pub fn run_pipeline(dataset_dir: &Path, cfg: &PipelineConfig, out: &Path) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let ds = Dataset::read(dataset_dir)?;
    let run = process(&ds, cfg)?;
    write_outputs(out, &run)?;
    if dataset_dir.join("gt").is_dir() {
        run_eval(out, dataset_dir)?;
    }
    Ok(run)
}

/// Generates a synthetic session from `cfg.sim` with `cfg.seed` and writes
/// the dataset (with ground truth) into `out`.
pub fn run_sim(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let spec = SessionSpec { seed: cfg.seed, ..cfg.sim.clone() };
    let session = synthesize(&spec)?;
    session.dataset.write(out)?;
    session.gt.write(out)?;
    Ok(())
}

/// Keeps the entries of `gt` whose timestamps match `est`.
fn matching(est: &[Stamped], gt: &[Stamped]) -> Result<Vec<Stamped>, MetricsError> {
    let mut out = Vec::with_capacity(est.len());
    let mut j = 0;
    for e in est {
        while j < gt.len() && gt[j].timestamp < e.timestamp - 1e-6 {
            j += 1;
        }
        match gt.get(j) {
            Some(g) if (g.timestamp - e.timestamp).abs() <= 1e-6 => out.push(*g),
            _ => return Err(MetricsError::LengthMismatch { est: est.len(), gt: out.len() }),
        }
    }
    Ok(out)
}

/// Computes the metrics of a run against the ground truth of a dataset and
/// writes `metrics.json` into `out`.
pub fn run_eval(out: &Path, dataset_dir: &Path) -> Result<MetricsReport, PipelineError> {
    let skel = SkeletonModel::from_file(&dataset_dir.join("skeleton.txt")).map_err(|e| DatasetError::Malformed {
        path: dataset_dir.join("skeleton.txt"),
        reason: e.to_string(),
    })?;
    let gt = GroundTruth::read(dataset_dir, &skel)?;
    let camera = read_trajectory_file(&out.join("camera.txt"))?;
    let root = read_trajectory_file(&out.join("root.txt"))?;
    let (_, states) = read_state_file(&out.join("states.txt"), skel.dof())?;
    let ply = out.join("map.ply");
    let file = fs::File::open(&ply).map_err(|source| DatasetError::Io { path: ply.clone(), source })?;
    let map = GlobalMap::read_ply(std::io::BufReader::new(file))
        .map_err(|e| DatasetError::Malformed { path: ply.clone(), reason: e.to_string() })?;
    let runtime = fs::read_to_string(out.join("runtime.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let report = evaluate(&camera, &root, &states, &map, &gt, &skel, runtime)?;
    let path = out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&report).expect("plain struct")).map_err(io_err(&path))?;
    Ok(report)
}

/// Metrics of estimated trajectories, states and map against ground truth.
pub fn evaluate(
    camera: &[Stamped],
    root: &[Stamped],
    states: &[BodyState],
    map: &GlobalMap,
    gt: &GroundTruth,
    skel: &SkeletonModel,
    runtime: RuntimeStats,
) -> Result<MetricsReport, PipelineError> {
    let cam = absolute_position_error(camera, &matching(camera, &gt.camera)?, Alignment::None)?;
    let root_err = absolute_position_error(root, &gt.root, Alignment::None)?;
    let map_err = mapping_error(map, &gt.cloud)?;
    let pen = penetration_depth(skel, states, &gt.contacts, |x, y| gt.scene.height(x, y));
    Ok(MetricsReport {
        root_ape_mean: root_err.mean,
        root_ape_rmse: root_err.rmse,
        cam_ape_mean: cam.mean,
        cam_ape_rmse: cam.rmse,
        map_p2p_mean: map_err.mean,
        map_p2p_median: map_err.median,
        penetration_max: pen.max,
        penetration_mean: pen.mean,
        runtime,
    })
}
