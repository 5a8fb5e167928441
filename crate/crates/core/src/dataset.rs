//! Dataset directory layout.
//!
//! ```text
//! config.toml                 session description (fps, frames, keyframes, camera)
//! skeleton.txt                `name parent_index ox oy oz` per joint
//! extrinsic_init              `s qx qy qz qw tx ty tz`, head-to-camera similarity
//! estimator.txt               per frame: `t p_left p_right q[..] qdot[..]`
//! visual_init.txt             keyframe camera poses (camera-to-world, visual scale)
//! frames/NNNNNN.corr          correspondence edges of keyframe NNNNNN
//! frames/NNNNNN.prior         relative head motion from the previous keyframe
//! frames/NNNNNN.mask          floor mask
//! frames/NNNNNN.depth         initial inverse depth (visual scale)
//! gt/camera.txt gt/head.txt gt/root.txt   frame-to-world trajectories
//! gt/states.txt               ground-truth generalized coordinates per frame
//! gt/contacts.csv             `frame,left,right`
//! gt/scene.ply gt/scene.toml  scene samples and analytic description
//! gt/extrinsic.txt            true head-to-camera similarity
//! ```
//!
//! Binary records are little-endian:
//!
//! * `corr`: `u32 edge_count`, then per edge `u32 src_frame, u32 dst_frame,
//!   u32 width, u32 height` followed by `width·height` pixels of
//!   `f32 u, f32 v, f32 w_u, f32 w_v` in row-major order.
//! * `prior`: `f64 t[3], f64 q[4] (x y z w), f64 cov[36]` (row-major 6×6,
//!   translation block first).
//! * `mask`: `u32 width, u32 height`, then one byte (0 or 1) per pixel.
//! * `depth`: `u32 width, u32 height`, then one `f64` per pixel; 0 marks a
//!   pixel without an initial depth.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Matrix6, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{read_trajectory, write_trajectory, CameraIntrinsics, Pose, Sim3Transform, Stamped};
use crate::physics::PoseEstimate;
use crate::skeleton::{BodyState, SkeletonModel};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing dataset component {0}")]
    MissingDatasetComponent(PathBuf),
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed { path: path.to_path_buf(), reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub fps: f64,
    pub frame_count: usize,
    pub keyframes: Vec<usize>,
    pub camera: CameraIntrinsics,
}

impl DatasetInfo {
    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }
}

/// Per-pixel correspondence `(u, v, w_u, w_v)` from `src` into `dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrEdge {
    pub src: usize,
    pub dst: usize,
    pub pixels: Vec<[f32; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorRecord {
    /// `G_h(prev) ∘ G_h(cur)⁻¹` with world-to-head poses.
    pub relative: Pose,
    pub covariance: Matrix6<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeRecord {
    pub frame: usize,
    pub edges: Vec<CorrEdge>,
    pub prior: Option<PriorRecord>,
    pub mask: Vec<bool>,
    pub depth_init: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub skeleton: SkeletonModel,
    pub keyframes: BTreeMap<usize, KeyframeRecord>,
    pub estimator: Vec<PoseEstimate>,
    /// Camera-to-world keyframe poses in visual scale.
    pub visual_init: Vec<Stamped>,
    pub extrinsic_init: Sim3Transform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Frame-to-world poses, metric.
    pub camera: Vec<Stamped>,
    pub head: Vec<Stamped>,
    pub root: Vec<Stamped>,
    pub states: Vec<BodyState>,
    pub contacts: Vec<[bool; 2]>,
    pub scene: crate::sim::SceneSpec,
    pub cloud: crate::map::GlobalMap,
    pub extrinsic: Sim3Transform,
}

pub fn frame_path(dir: &Path, frame: usize, ext: &str) -> PathBuf {
    dir.join("frames").join(format!("{frame:06}.{ext}"))
}

fn require(path: PathBuf) -> Result<PathBuf, DatasetError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(DatasetError::MissingDatasetComponent(path))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DatasetError> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| malformed(self.path, "truncated record"))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }
    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take::<1>()?[0])
    }
    fn finish(&self) -> Result<(), DatasetError> {
        if self.pos != self.bytes.len() {
            return Err(malformed(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn check_dims(path: &Path, w: u32, h: u32, cam: &CameraIntrinsics) -> Result<usize, DatasetError> {
    if w as usize != cam.width || h as usize != cam.height {
        return Err(malformed(path, format!("grid {w}x{h} does not match camera {}x{}", cam.width, cam.height)));
    }
    Ok(cam.pixel_count())
}

pub fn encode_corr(edges: &[CorrEdge], cam: &CameraIntrinsics) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((edges.len() as u32).to_le_bytes());
    for e in edges {
        for v in [e.src as u32, e.dst as u32, cam.width as u32, cam.height as u32] {
            out.extend(v.to_le_bytes());
        }
        for p in &e.pixels {
            for c in p {
                out.extend(c.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_corr(bytes: &[u8], path: &Path, cam: &CameraIntrinsics) -> Result<Vec<CorrEdge>, DatasetError> {
    let mut r = Reader { bytes, pos: 0, path };
    let n = r.u32()?;
    let mut edges = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let (src, dst) = (r.u32()? as usize, r.u32()? as usize);
        let count = check_dims(path, r.u32()?, r.u32()?, cam)?;
        let mut pixels = Vec::with_capacity(count);
        for _ in 0..count {
            let px = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
            if px[2] < 0.0 || px[3] < 0.0 || px.iter().any(|v| !v.is_finite()) {
                return Err(malformed(path, "negative or non-finite correspondence"));
            }
            pixels.push(px);
        }
        edges.push(CorrEdge { src, dst, pixels });
    }
    r.finish()?;
    Ok(edges)
}

pub fn encode_prior(p: &PriorRecord) -> Vec<u8> {
    let q = p.relative.rotation.quaternion();
    let t = p.relative.translation;
    let mut vals = vec![t.x, t.y, t.z, q.i, q.j, q.k, q.w];
    for r in 0..6 {
        for c in 0..6 {
            vals.push(p.covariance[(r, c)]);
        }
    }
    vals.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_prior(bytes: &[u8], path: &Path) -> Result<PriorRecord, DatasetError> {
    let mut r = Reader { bytes, pos: 0, path };
    let mut vals = [0.0; 43];
    for v in vals.iter_mut() {
        *v = r.f64()?;
    }
    r.finish()?;
    let q = Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(malformed(path, "prior quaternion is not unit"));
    }
    let covariance = Matrix6::from_row_slice(&vals[7..43]);
    // renormalizing a stored unit quaternion can flip low bits, so leave it
    let rotation = if (q.norm() - 1.0).abs() < 4.0 * f64::EPSILON {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    };
    Ok(PriorRecord {
        relative: Pose::new(rotation, Vector3::new(vals[0], vals[1], vals[2])),
        covariance,
    })
}

pub fn encode_mask(mask: &[bool], cam: &CameraIntrinsics) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mask.len());
    out.extend((cam.width as u32).to_le_bytes());
    out.extend((cam.height as u32).to_le_bytes());
    out.extend(mask.iter().map(|&m| m as u8));
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path, cam: &CameraIntrinsics) -> Result<Vec<bool>, DatasetError> {
    let mut r = Reader { bytes, pos: 0, path };
    let n = check_dims(path, r.u32()?, r.u32()?, cam)?;
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        match r.u8()? {
            0 => mask.push(false),
            1 => mask.push(true),
            b => return Err(malformed(path, format!("mask byte {b}"))),
        }
    }
    r.finish()?;
    Ok(mask)
}

pub fn encode_depth(depth: &[f64], cam: &CameraIntrinsics) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * depth.len());
    out.extend((cam.width as u32).to_le_bytes());
    out.extend((cam.height as u32).to_le_bytes());
    for d in depth {
        out.extend(d.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path, cam: &CameraIntrinsics) -> Result<Vec<f64>, DatasetError> {
    let mut r = Reader { bytes, pos: 0, path };
    let n = check_dims(path, r.u32()?, r.u32()?, cam)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let d = r.f64()?;
        if !(d >= 0.0) || !d.is_finite() {
            return Err(malformed(path, "negative or non-finite inverse depth"));
        }
        out.push(d);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_sim3<W: Write>(mut w: W, t: &Sim3Transform) -> std::io::Result<()> {
    let q = t.rotation.quaternion();
    writeln!(
        w,
        "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
        t.scale(),
        q.i,
        q.j,
        q.k,
        q.w,
        t.translation.x,
        t.translation.y,
        t.translation.z
    )
}

pub fn parse_sim3(text: &str, path: &Path) -> Result<Sim3Transform, DatasetError> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e: std::num::ParseFloatError| malformed(path, e.to_string()))?;
    if v.len() != 8 {
        return Err(malformed(path, format!("expected 8 values, found {}", v.len())));
    }
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[4], v[1], v[2], v[3]));
    Sim3Transform::new(v[0], q, Vector3::new(v[5], v[6], v[7])).map_err(|e| malformed(path, e.to_string()))
}

fn write_states<W: Write>(mut w: W, times: &[f64], states: &[BodyState], probs: Option<&[[f64; 2]]>) -> std::io::Result<()> {
    for (i, (t, s)) in times.iter().zip(states).enumerate() {
        write!(w, "{t:.17e}")?;
        if let Some(p) = probs {
            write!(w, " {:.17e} {:.17e}", p[i][0], p[i][1])?;
        }
        for v in s.q.iter().chain(s.qdot.iter()) {
            write!(w, " {v:.17e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Parses state lines written by [`write_states`]; returns timestamps,
/// optional contact probabilities and states.
fn read_states(text: &str, path: &Path, dof: usize, with_probs: bool) -> Result<Vec<(f64, [f64; 2], BodyState)>, DatasetError> {
    let extra = if with_probs { 3 } else { 1 };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| malformed(path, format!("line {}: {e}", n + 1)))?;
        if v.len() != extra + 2 * dof {
            return Err(malformed(path, format!("line {}: expected {} values, found {}", n + 1, extra + 2 * dof, v.len())));
        }
        let probs = if with_probs { [v[1], v[2]] } else { [0.0; 2] };
        let q = DVector::from_column_slice(&v[extra..extra + dof]);
        let qdot = DVector::from_column_slice(&v[extra + dof..]);
        out.push((v[0], probs, BodyState { q, qdot }));
    }
    Ok(out)
}

/// Writes `t q[..] qdot[..]` lines.
pub fn write_state_file(path: &Path, times: &[f64], states: &[BodyState]) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    write_states(&mut w, times, states, None).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_state_file(path: &Path, dof: usize) -> Result<(Vec<f64>, Vec<BodyState>), DatasetError> {
    let text = read_text(&require(path.to_path_buf())?)?;
    let rows = read_states(&text, path, dof, false)?;
    Ok(rows.into_iter().map(|(t, _, s)| (t, s)).unzip())
}

pub fn write_trajectory_file(path: &Path, traj: &[Stamped]) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    write_trajectory(&mut w, traj).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_trajectory_file(path: &Path) -> Result<Vec<Stamped>, DatasetError> {
    let path = require(path.to_path_buf())?;
    let f = fs::File::open(&path).map_err(io_err(&path))?;
    read_trajectory(BufReader::new(f)).map_err(|e| malformed(&path, e.to_string()))
}

pub fn write_contacts(path: &Path, contacts: &[[bool; 2]]) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "frame,left,right")?;
        for (i, c) in contacts.iter().enumerate() {
            writeln!(w, "{i},{},{}", c[0] as u8, c[1] as u8)?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn read_contacts(path: &Path) -> Result<Vec<[bool; 2]>, DatasetError> {
    let text = read_text(&require(path.to_path_buf())?)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || malformed(path, format!("line {}: expected `frame,left,right`", n + 1));
        if f.len() != 3 || f[0].parse::<usize>().map_err(|_| bad())? != out.len() {
            return Err(bad());
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad()),
        };
        out.push([flag(f[1])?, flag(f[2])?]);
    }
    Ok(out)
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir.join("frames")).map_err(io_err(dir))?;
        let cfg = toml::to_string(&self.info).map_err(|e| malformed(&dir.join("config.toml"), e.to_string()))?;
        write_file(&dir.join("config.toml"), cfg.as_bytes())?;
        write_file(&dir.join("skeleton.txt"), self.skeleton.to_text().as_bytes())?;
        let mut buf = Vec::new();
        write_sim3(&mut buf, &self.extrinsic_init).expect("in-memory write");
        write_file(&dir.join("extrinsic_init"), &buf)?;
        let times: Vec<f64> = (0..self.estimator.len()).map(|f| self.info.timestamp(f)).collect();
        let states: Vec<BodyState> = self.estimator.iter().map(|e| e.state.clone()).collect();
        let probs: Vec<[f64; 2]> = self.estimator.iter().map(|e| e.contact_probabilities).collect();
        let path = dir.join("estimator.txt");
        let mut w = create(&path)?;
        write_states(&mut w, &times, &states, Some(&probs)).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        write_trajectory_file(&dir.join("visual_init.txt"), &self.visual_init)?;
        let cam = &self.info.camera;
        for (frame, rec) in &self.keyframes {
            write_file(&frame_path(dir, *frame, "corr"), &encode_corr(&rec.edges, cam))?;
            write_file(&frame_path(dir, *frame, "mask"), &encode_mask(&rec.mask, cam))?;
            write_file(&frame_path(dir, *frame, "depth"), &encode_depth(&rec.depth_init, cam))?;
            if let Some(p) = &rec.prior {
                write_file(&frame_path(dir, *frame, "prior"), &encode_prior(p))?;
            }
        }
        Ok(())
    }

    /// Loads and validates a dataset directory. A missing file is reported
    /// by path.
    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        let cfg_path = require(dir.join("config.toml"))?;
        let info: DatasetInfo =
            toml::from_str(&read_text(&cfg_path)?).map_err(|e| malformed(&cfg_path, e.to_string()))?;
        info.camera.validate().map_err(|e| malformed(&cfg_path, e.to_string()))?;
        if !(info.fps > 0.0) {
            return Err(malformed(&cfg_path, "fps must be positive"));
        }
        if info.keyframes.is_empty() || info.keyframes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(malformed(&cfg_path, "keyframes must be non-empty and strictly increasing"));
        }
        if *info.keyframes.last().unwrap() >= info.frame_count {
            return Err(malformed(&cfg_path, "keyframe index beyond frame count"));
        }
        let skel_path = require(dir.join("skeleton.txt"))?;
        let skeleton = SkeletonModel::from_file(&skel_path).map_err(|e| malformed(&skel_path, e.to_string()))?;
        let ext_path = require(dir.join("extrinsic_init"))?;
        let extrinsic_init = parse_sim3(&read_text(&ext_path)?, &ext_path)?;
        let est_path = require(dir.join("estimator.txt"))?;
        let rows = read_states(&read_text(&est_path)?, &est_path, skeleton.dof(), true)?;
        if rows.len() != info.frame_count {
            return Err(malformed(&est_path, format!("{} frames, config says {}", rows.len(), info.frame_count)));
        }
        let estimator = rows
            .into_iter()
            .map(|(_, p, state)| PoseEstimate { state, contact_probabilities: p })
            .collect();
        let visual_init = read_trajectory_file(&dir.join("visual_init.txt"))?;
        if visual_init.len() != info.keyframes.len() {
            return Err(malformed(&dir.join("visual_init.txt"), "one pose per keyframe expected"));
        }
        let cam = &info.camera;
        let mut keyframes = BTreeMap::new();
        for (n, &frame) in info.keyframes.iter().enumerate() {
            let corr_path = require(frame_path(dir, frame, "corr"))?;
            let edges = decode_corr(&read_bytes(&corr_path)?, &corr_path, cam)?;
            for e in &edges {
                if !info.keyframes.contains(&e.src) || !info.keyframes.contains(&e.dst) || e.src == e.dst {
                    return Err(malformed(&corr_path, format!("edge {} -> {} between unknown keyframes", e.src, e.dst)));
                }
            }
            let mask_path = require(frame_path(dir, frame, "mask"))?;
            let mask = decode_mask(&read_bytes(&mask_path)?, &mask_path, cam)?;
            let depth_path = require(frame_path(dir, frame, "depth"))?;
            let depth_init = decode_depth(&read_bytes(&depth_path)?, &depth_path, cam)?;
            let prior = if n > 0 {
                let p = require(frame_path(dir, frame, "prior"))?;
                Some(decode_prior(&read_bytes(&p)?, &p)?)
            } else {
                None
            };
            keyframes.insert(frame, KeyframeRecord { frame, edges, prior, mask, depth_init });
        }
        Ok(Dataset { info, skeleton, keyframes, estimator, visual_init, extrinsic_init })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

impl GroundTruth {
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        let gt = dir.join("gt");
        write_trajectory_file(&gt.join("camera.txt"), &self.camera)?;
        write_trajectory_file(&gt.join("head.txt"), &self.head)?;
        write_trajectory_file(&gt.join("root.txt"), &self.root)?;
        let times: Vec<f64> = self.camera.iter().map(|s| s.timestamp).collect();
        write_state_file(&gt.join("states.txt"), &times, &self.states)?;
        write_contacts(&gt.join("contacts.csv"), &self.contacts)?;
        let ply = gt.join("scene.ply");
        let mut w = create(&ply)?;
        self.cloud.write_ply(&mut w).map_err(io_err(&ply))?;
        w.flush().map_err(io_err(&ply))?;
        let spec = toml::to_string(&self.scene).map_err(|e| malformed(&gt.join("scene.toml"), e.to_string()))?;
        write_file(&gt.join("scene.toml"), spec.as_bytes())?;
        let mut buf = Vec::new();
        write_sim3(&mut buf, &self.extrinsic).expect("in-memory write");
        write_file(&gt.join("extrinsic.txt"), &buf)
    }

    pub fn read(dir: &Path, skeleton: &SkeletonModel) -> Result<Self, DatasetError> {
        let gt = dir.join("gt");
        let camera = read_trajectory_file(&gt.join("camera.txt"))?;
        let head = read_trajectory_file(&gt.join("head.txt"))?;
        let root = read_trajectory_file(&gt.join("root.txt"))?;
        let (_, states) = read_state_file(&gt.join("states.txt"), skeleton.dof())?;
        let contacts = read_contacts(&gt.join("contacts.csv"))?;
        let ply = require(gt.join("scene.ply"))?;
        let f = fs::File::open(&ply).map_err(io_err(&ply))?;
        let cloud = crate::map::GlobalMap::read_ply(BufReader::new(f)).map_err(|e| malformed(&ply, e.to_string()))?;
        let spec_path = require(gt.join("scene.toml"))?;
        let scene = toml::from_str(&read_text(&spec_path)?).map_err(|e| malformed(&spec_path, e.to_string()))?;
        let ext = require(gt.join("extrinsic.txt"))?;
        let extrinsic = parse_sim3(&read_text(&ext)?, &ext)?;
        Ok(Self { camera, head, root, states, contacts, scene, cloud, extrinsic })
    }
}

/// Whether a directory has the top-level entries of a dataset.
pub fn looks_like_dataset(dir: &Path) -> bool {
    dir.join("config.toml").exists() && dir.join("frames").is_dir()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(4.0, 4.0, 1.5, 1.0, 4, 3).unwrap()
    }

    #[test]
    fn corr_round_trip() {
        let e = CorrEdge { src: 3, dst: 1, pixels: (0..12).map(|i| [i as f32, 0.5, 1.0, 0.0]).collect() };
        let bytes = encode_corr(std::slice::from_ref(&e), &cam());
        assert_eq!(bytes.len(), 4 + 16 + 12 * 16);
        let back = decode_corr(&bytes, Path::new("x"), &cam()).unwrap();
        assert_eq!(back, vec![e]);
        assert!(decode_corr(&bytes[..bytes.len() - 1], Path::new("x"), &cam()).is_err());
    }

    #[test]
    fn prior_round_trip() {
        let p = PriorRecord {
            relative: Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)),
            covariance: Matrix6::identity() * 0.5,
        };
        let bytes = encode_prior(&p);
        assert_eq!(bytes.len(), 43 * 8);
        let back = decode_prior(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.covariance, p.covariance);
        assert!((back.relative.translation - p.relative.translation).norm() == 0.0);
        assert!(back.relative.rotation.angle_to(&p.relative.rotation) < 1e-15);
    }

    #[test]
    fn mask_and_depth_round_trip() {
        let m: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        assert_eq!(decode_mask(&encode_mask(&m, &cam()), Path::new("x"), &cam()).unwrap(), m);
        let d: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        assert_eq!(decode_depth(&encode_depth(&d, &cam()), Path::new("x"), &cam()).unwrap(), d);
        let bad = CameraIntrinsics::new(4.0, 4.0, 1.5, 1.0, 5, 3).unwrap();
        assert!(decode_mask(&encode_mask(&m, &cam()), Path::new("x"), &bad).is_err());
    }

    #[test]
    fn sim3_text_round_trip() {
        let t = Sim3Transform::new(1.7, UnitQuaternion::from_euler_angles(0.0, 0.0, 0.5), Vector3::new(0.1, 0.0, 0.05))
            .unwrap();
        let mut buf = Vec::new();
        write_sim3(&mut buf, &t).unwrap();
        let back = parse_sim3(std::str::from_utf8(&buf).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.scale(), t.scale());
        assert_eq!(back.translation, t.translation);
    }

    #[test]
    fn contacts_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_contacts(&p, &[[true, false], [false, true]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "frame,left,right\n0,1,0\n1,0,1\n");
        assert_eq!(read_contacts(&p).unwrap(), vec![[true, false], [false, true]]);
    }
}
