//! Hashed TSDF volume fused from keyframe depths, zero-crossing map
//! extraction, and loop closing with a full map refresh.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix6, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, MIN_PROJECTION_DEPTH};
use crate::map::GlobalMap;
use crate::mdba::{
    pose_only_mdba, FrameGraphEdge, InertialPrior, Keyframe, MdbaError, MdbaOptions, MdbaProblem, MdbaReport,
    RelativePoseFactor,
};

pub const BLOCK_SIDE: usize = 8;
const BLOCK_VOXELS: usize = BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE;
// 2x2 neighbourhoods whose inverse depths spread by more than this fall
// back to the nearest pixel. A tilted floor seen at 2 deg per pixel near
// the horizon already spreads ~12%.
const DISCONTINUITY_RATIO: f64 = 1.25;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Voxel {
    pub tsdf: f64,
    pub weight: f64,
}

pub type Block = Box<[Voxel; BLOCK_VOXELS]>;

/// Which depths are fused.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFilter {
    /// Skip pixels whose inverse-depth variance exceeds this value, (1/m)².
    Absolute(f64),
    /// Keep pixels whose metric depth standard deviation is below
    /// `ratio · depth`.
    Relative(f64),
}

impl Default for DepthFilter {
    fn default() -> Self {
        DepthFilter::Relative(0.1)
    }
}

impl DepthFilter {
    pub fn keeps(&self, inv_depth: f64, inv_var: f64) -> bool {
        if !(inv_depth > 0.0) || !(inv_var > 0.0) || !inv_var.is_finite() {
            return false;
        }
        match *self {
            DepthFilter::Absolute(t) => inv_var <= t,
            // σ_z = σ_d / d², so σ_z < r·z  ⇔  var_d < r²·d²
            DepthFilter::Relative(r) => inv_var < r * r * inv_depth * inv_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    pub voxel_size: f64,
    /// Truncation distance as a multiple of the voxel size.
    pub truncation_voxels: f64,
    pub weight_cap: f64,
    pub filter: DepthFilter,
    pub weight_min: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { voxel_size: 0.05, truncation_voxels: 4.0, weight_cap: 100.0, filter: DepthFilter::default(), weight_min: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TsdfVolume {
    pub voxel_size: f64,
    pub truncation: f64,
    pub weight_cap: f64,
    blocks: HashMap<[i32; 3], Block>,
}

impl TsdfVolume {
    pub fn new(voxel_size: f64, truncation: f64, weight_cap: f64) -> Self {
        Self { voxel_size, truncation, weight_cap, blocks: HashMap::new() }
    }

    pub fn from_params(p: &FusionParams) -> Self {
        Self::new(p.voxel_size, p.truncation_voxels * p.voxel_size, p.weight_cap)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_keys(&self) -> Vec<[i32; 3]> {
        let mut keys: Vec<_> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    fn block_span(&self) -> f64 {
        self.voxel_size * BLOCK_SIDE as f64
    }

    /// Global voxel index containing a world point.
    pub fn voxel_index(&self, p: &Vector3<f64>) -> [i64; 3] {
        [
            (p.x / self.voxel_size).floor() as i64,
            (p.y / self.voxel_size).floor() as i64,
            (p.z / self.voxel_size).floor() as i64,
        ]
    }

    pub fn voxel_center(&self, idx: [i64; 3]) -> Vector3<f64> {
        Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * self.voxel_size
    }

    pub fn voxel(&self, idx: [i64; 3]) -> Option<Voxel> {
        let side = BLOCK_SIDE as i64;
        let key = [idx[0].div_euclid(side) as i32, idx[1].div_euclid(side) as i32, idx[2].div_euclid(side) as i32];
        let local = [idx[0].rem_euclid(side), idx[1].rem_euclid(side), idx[2].rem_euclid(side)];
        self.blocks.get(&key).map(|b| b[local_offset(local)])
    }

    /// Every observed voxel as (global index, state), in index order.
    pub fn observed_voxels(&self) -> Vec<([i64; 3], Voxel)> {
        let mut out = Vec::new();
        for key in self.block_keys() {
            let b = &self.blocks[&key];
            for (n, v) in b.iter().enumerate() {
                if v.weight > 0.0 {
                    out.push((global_index(key, n), *v));
                }
            }
        }
        out
    }
}

fn local_offset(l: [i64; 3]) -> usize {
    (l[0] as usize * BLOCK_SIDE + l[1] as usize) * BLOCK_SIDE + l[2] as usize
}

fn global_index(key: [i32; 3], n: usize) -> [i64; 3] {
    let side = BLOCK_SIDE as i64;
    let (x, y, z) = (n / (BLOCK_SIDE * BLOCK_SIDE), (n / BLOCK_SIDE) % BLOCK_SIDE, n % BLOCK_SIDE);
    [key[0] as i64 * side + x as i64, key[1] as i64 * side + y as i64, key[2] as i64 * side + z as i64]
}

/// Fusable depth sample of a keyframe at a continuous pixel location:
/// metric depth and its fusion weight.
struct DepthLookup<'a> {
    kf: &'a Keyframe,
    keep: Vec<bool>,
}

impl<'a> DepthLookup<'a> {
    fn new(kf: &'a Keyframe, filter: &DepthFilter) -> Self {
        let keep = kf.inv_depth.iter().zip(&kf.depth_var).map(|(d, v)| filter.keeps(*d, *v)).collect();
        Self { kf, keep }
    }

    fn sample(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let k = &self.kf.intrinsics;
        let (w, h) = (k.width as f64, k.height as f64);
        if !(u >= -0.5 && u < w - 0.5 && v >= -0.5 && v < h - 0.5) {
            return None;
        }
        let nu = (u.round() as usize).min(k.width - 1);
        let nv = (v.round() as usize).min(k.height - 1);
        let nearest = nv * k.width + nu;
        if !self.keep[nearest] {
            return None;
        }
        let d_near = self.kf.inv_depth[nearest];
        let weight = d_near.powi(4) / self.kf.depth_var[nearest];
        // inverse depth is affine in pixel coordinates on a plane, so
        // bilinear interpolation is exact there
        // within half a pixel of the border the outermost cell is extrapolated
        let u0 = (u.max(0.0).floor() as usize).min(k.width.saturating_sub(2));
        let v0 = (v.max(0.0).floor() as usize).min(k.height.saturating_sub(2));
        let (u1, v1) = ((u0 + 1).min(k.width - 1), (v0 + 1).min(k.height - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let idx = [v0 * k.width + u0, v0 * k.width + u1, v1 * k.width + u0, v1 * k.width + u1];
        let missing: Vec<usize> = (0..4).filter(|&c| !self.keep[idx[c]]).collect();
        let near_center = (u - nu as f64).abs() <= 0.25 && (v - nv as f64).abs() <= 0.25;
        if missing.len() > 1 {
            return near_center.then(|| (1.0 / d_near, weight));
        }
        let mut d = idx.map(|i| self.kf.inv_depth[i]);
        if let Some(&c) = missing.first() {
            // affine completion d00 + d11 = d10 + d01
            d[c] = d[c ^ 1] + d[c ^ 2] - d[c ^ 3];
            if d[c] <= 0.0 {
                return near_center.then(|| (1.0 / d_near, weight));
            }
        }
        let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
        let inv = if hi > DISCONTINUITY_RATIO * lo {
            if !near_center {
                return None;
            }
            d_near
        } else {
            (1.0 - fv) * ((1.0 - fu) * d[0] + fu * d[1]) + fv * ((1.0 - fu) * d[2] + fu * d[3])
        };
        Some((1.0 / inv, weight))
    }
}

/// Fuses one keyframe. Each voxel near an observed surface is projected
/// into the keyframe and receives the projective signed distance
/// `depth(π(x)) − z(x)`, weighted by the inverse metric depth variance.
pub fn integrate_keyframe(vol: &mut TsdfVolume, kf: &Keyframe, filter: &DepthFilter) {
    let lookup = DepthLookup::new(kf, filter);
    let k = &kf.intrinsics;
    let cam_to_world = kf.pose.inverse();
    let span = vol.block_span();
    let trunc = vol.truncation;
    let mut keys = BTreeSet::new();
    for p in 0..kf.inv_depth.len() {
        if !lookup.keep[p] {
            continue;
        }
        let z = 1.0 / kf.inv_depth[p];
        let ray = k.ray(&kf.pixel(p));
        let steps = ((2.0 * trunc) / (0.5 * vol.voxel_size)).ceil() as usize;
        for s in 0..=steps {
            let depth = (z - trunc + s as f64 * 0.5 * vol.voxel_size).max(MIN_PROJECTION_DEPTH);
            let w = cam_to_world.transform_point(&(ray * depth));
            keys.insert([(w.x / span).floor() as i32, (w.y / span).floor() as i32, (w.z / span).floor() as i32]);
        }
    }
    for key in &keys {
        vol.blocks.entry(*key).or_insert_with(|| Box::new([Voxel::default(); BLOCK_VOXELS]));
    }
    let voxel_size = vol.voxel_size;
    let cap = vol.weight_cap;
    let mut work: Vec<(&[i32; 3], &mut Block)> = vol.blocks.iter_mut().filter(|(k, _)| keys.contains(*k)).collect();
    work.par_iter_mut().for_each(|(key, block)| {
        for (n, vox) in block.iter_mut().enumerate() {
            let g = global_index(**key, n);
            let c = Vector3::new(g[0] as f64 + 0.5, g[1] as f64 + 0.5, g[2] as f64 + 0.5) * voxel_size;
            let xc = kf.pose.transform_point(&c);
            if xc.z <= MIN_PROJECTION_DEPTH {
                continue;
            }
            let u = k.fx * xc.x / xc.z + k.cx;
            let v = k.fy * xc.y / xc.z + k.cy;
            let Some((depth, w_new)) = lookup.sample(u, v) else { continue };
            let sdf = depth - xc.z;
            if sdf < -trunc {
                continue;
            }
            let sdf = sdf.min(trunc);
            let w = vox.weight;
            vox.tsdf = ((w * vox.tsdf + w_new * sdf) / (w + w_new)).clamp(-trunc, trunc);
            vox.weight = (w + w_new).min(cap);
        }
    });
    vol.blocks.retain(|_, b| b.iter().any(|v| v.weight > 0.0));
}

/// One point per sign change between axis-adjacent voxels whose weights
/// both reach `weight_min`, placed by linear interpolation of the tsdf.
pub fn extract_global_map(vol: &TsdfVolume, weight_min: f64) -> GlobalMap {
    let mut map = GlobalMap::new();
    for (idx, v) in vol.observed_voxels() {
        if v.weight < weight_min || v.weight <= 0.0 {
            continue;
        }
        for axis in 0..3 {
            let mut n = idx;
            n[axis] += 1;
            let Some(nv) = vol.voxel(n) else { continue };
            if nv.weight < weight_min || nv.weight <= 0.0 {
                continue;
            }
            if (v.tsdf >= 0.0) == (nv.tsdf >= 0.0) {
                continue;
            }
            let t = v.tsdf / (v.tsdf - nv.tsdf);
            let a = vol.voxel_center(idx);
            let b = vol.voxel_center(n);
            map.push(a + (b - a) * t, v.weight.min(nv.weight));
        }
    }
    map
}

/// Rebuilds a volume from scratch from the given keyframes.
pub fn integrate_all(params: &FusionParams, keyframes: &[Keyframe]) -> TsdfVolume {
    let mut vol = TsdfVolume::from_params(params);
    for kf in keyframes {
        integrate_keyframe(&mut vol, kf, &params.filter);
    }
    vol
}

pub const LOOP_INFORMATION: f64 = 1e4;

/// Loop constraint on `G_src ∘ G_dst⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopEdge {
    pub src: usize,
    pub dst: usize,
    pub relative: Pose,
    pub information: Matrix6<f64>,
}

impl LoopEdge {
    pub fn factor(&self) -> Result<RelativePoseFactor, MdbaError> {
        let sym = (self.information + self.information.transpose()) * 0.5;
        let chol = sym
            .cholesky()
            .ok_or_else(|| MdbaError::InvalidProblem(format!("loop {}->{} information not PD", self.src, self.dst)))?;
        Ok(RelativePoseFactor { src: self.src, dst: self.dst, measured: self.relative, sqrt_info: chol.l().transpose() })
    }
}

/// Pose-only refinement over the full graph plus the loop edges, then a
/// full re-integration of the volume with the corrected poses.
pub fn close_loop(
    keyframes: &[Keyframe],
    edges: &[FrameGraphEdge],
    priors: &[InertialPrior],
    lambda: f64,
    loop_edges: &[LoopEdge],
    fusion: &FusionParams,
    opts: &MdbaOptions,
) -> Result<(Vec<Keyframe>, TsdfVolume, MdbaReport), MdbaError> {
    if loop_edges.is_empty() {
        return Err(MdbaError::InvalidProblem("close_loop needs at least one loop edge".into()));
    }
    let mut problem = MdbaProblem::new(keyframes.to_vec(), edges.to_vec(), priors.to_vec(), lambda);
    problem.extra_factors = loop_edges.iter().map(LoopEdge::factor).collect::<Result<_, _>>()?;
    let (solved, report) = pose_only_mdba(&problem, opts)?;
    let vol = integrate_all(fusion, &solved.keyframes);
    Ok((solved.keyframes, vol, report))
}

/// Proposes loop edges from ground truth: for each keyframe, the closest
/// earlier keyframe at least `gap_min` indices back whose true camera center
/// lies within `radius`. The relative pose is taken from ground truth.
pub fn detect_loops_oracle(keyframes: &[Keyframe], gt_poses: &[Pose], gap_min: usize, radius: f64) -> Vec<LoopEdge> {
    let n = keyframes.len().min(gt_poses.len());
    let mut out = Vec::new();
    for dst in 0..n {
        let cd = gt_poses[dst].center();
        let mut best: Option<(usize, f64)> = None;
        for src in 0..dst {
            if dst - src < gap_min.max(1) {
                continue;
            }
            let dist = (gt_poses[src].center() - cd).norm();
            if dist < radius && best.map_or(true, |(_, b)| dist < b) {
                best = Some((src, dist));
            }
        }
        if let Some((src, _)) = best {
            out.push(LoopEdge {
                src: keyframes[src].id,
                dst: keyframes[dst].id,
                relative: gt_poses[src].compose(&gt_poses[dst].inverse()),
                information: Matrix6::identity() * LOOP_INFORMATION,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;

    fn plane_kf(id: usize, pose: Pose, depth: f64, var_z: f64) -> Keyframe {
        let k = CameraIntrinsics::new(16.0, 16.0, 7.5, 5.5, 16, 12).unwrap();
        let d = 1.0 / depth;
        let mut kf = Keyframe::new(id, 0.0, pose, vec![d; k.pixel_count()], k);
        kf.depth_var = vec![var_z * d.powi(4); k.pixel_count()];
        kf
    }

    #[test]
    fn relative_filter_rule() {
        let f = DepthFilter::Relative(0.1);
        // depth 2 m, std 0.1 m → keep; std 0.3 m → drop
        assert!(f.keeps(0.5, 0.01 * 0.5f64.powi(4)));
        assert!(!f.keeps(0.5, 0.09 * 0.5f64.powi(4)));
        assert!(!f.keeps(0.5, 1.0 / crate::mdba::DEPTH_DAMPING));
    }

    #[test]
    fn plane_zero_crossing() {
        let mut vol = TsdfVolume::new(0.05, 0.2, 100.0);
        let kf = plane_kf(0, Pose::identity(), 2.0, 0.01);
        integrate_keyframe(&mut vol, &kf, &DepthFilter::Relative(0.1));
        let map = extract_global_map(&vol, 0.0);
        assert!(map.len() > 50);
        for p in &map.points {
            assert!((p.z - 2.0).abs() <= 0.025 + 1e-12, "{p}");
        }
        for v in vol.observed_voxels() {
            assert!(v.1.tsdf.abs() <= vol.truncation);
            assert!(v.1.weight <= vol.weight_cap);
        }
    }

    #[test]
    fn two_observations_are_inverse_variance_weighted() {
        let mut vol = TsdfVolume::new(0.05, 0.2, 1e9);
        let a = plane_kf(0, Pose::identity(), 2.0, 0.01);
        let b = plane_kf(1, Pose::identity(), 2.06, 0.04);
        integrate_keyframe(&mut vol, &a, &DepthFilter::Absolute(f64::INFINITY));
        integrate_keyframe(&mut vol, &b, &DepthFilter::Absolute(f64::INFINITY));
        let idx = vol.voxel_index(&Vector3::new(0.01, 0.01, 1.98));
        let z = vol.voxel_center(idx).z;
        let (s1, s2) = (2.0 - z, 2.06 - z);
        let expected = (s1 / 0.01 + s2 / 0.04) / (1.0 / 0.01 + 1.0 / 0.04);
        let v = vol.voxel(idx).unwrap();
        assert!((v.tsdf - expected).abs() < 1e-9);
        assert!((v.weight - 125.0).abs() < 1e-9);
    }

    #[test]
    fn filtered_pixel_touches_nothing() {
        let mut vol = TsdfVolume::new(0.05, 0.2, 100.0);
        let mut kf = plane_kf(0, Pose::identity(), 2.0, 0.01);
        for v in kf.depth_var.iter_mut() {
            *v = 1e6;
        }
        integrate_keyframe(&mut vol, &kf, &DepthFilter::Relative(0.1));
        assert_eq!(vol.block_count(), 0);
        assert!(extract_global_map(&vol, 0.0).is_empty());
    }

    #[test]
    fn weight_min_dominates() {
        let mut vol = TsdfVolume::new(0.05, 0.2, 100.0);
        integrate_keyframe(&mut vol, &plane_kf(0, Pose::identity(), 2.0, 0.01), &DepthFilter::Relative(0.1));
        assert!(extract_global_map(&vol, 101.0).is_empty());
        assert!(extract_global_map(&TsdfVolume::new(0.05, 0.2, 100.0), 0.0).is_empty());
    }

    #[test]
    fn oracle_loops() {
        let k = CameraIntrinsics::new(16.0, 16.0, 7.5, 5.5, 16, 12).unwrap();
        let line: Vec<Pose> = (0..10).map(|i| Pose::from_translation(Vector3::new(-(i as f64), 0.0, 0.0))).collect();
        let kfs: Vec<Keyframe> = (0..10).map(|i| Keyframe::new(i, 0.0, line[i], vec![1.0; 192], k.clone())).collect();
        assert!(detect_loops_oracle(&kfs, &line, 5, 0.5).is_empty());
        let circle: Vec<Pose> = (0..10)
            .map(|i| {
                let a = i as f64 / 10.0 * std::f64::consts::TAU;
                Pose::from_translation(-Vector3::new(a.cos(), a.sin(), 0.0))
            })
            .chain(std::iter::once(Pose::from_translation(-Vector3::new(1.0, 0.0, 0.0))))
            .collect();
        let kfs: Vec<Keyframe> = (0..11).map(|i| Keyframe::new(i, 0.0, circle[i], vec![1.0; 192], k.clone())).collect();
        let loops = detect_loops_oracle(&kfs, &circle, 5, 0.1);
        assert_eq!(loops.len(), 1);
        assert!(loops[0].dst - loops[0].src >= 5);
        assert!(detect_loops_oracle(&kfs, &circle, 5, 0.0).is_empty());
    }
}
