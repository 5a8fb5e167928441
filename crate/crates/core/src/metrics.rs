//! Trajectory, map and contact metrics.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Stamped;
use crate::map::GlobalMap;
use crate::skeleton::{BodyState, SkeletonModel};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trajectory lengths differ: {est} estimated vs {gt} ground truth")]
    LengthMismatch { est: usize, gt: usize },
    #[error("timestamps differ at index {index}: {est} vs {gt}")]
    TimestampMismatch { index: usize, est: f64, gt: f64 },
    #[error("empty map")]
    EmptyMap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    None,
    Rigid,
    Similarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApeReport {
    pub mean: f64,
    pub rmse: f64,
    pub per_frame: Vec<f64>,
}

/// Least-squares `dst ≈ s·R·src + t`; `s` is fixed to 1 unless
/// `with_scale`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> (f64, UnitQuaternion<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a - mu_s, b - mu_d);
        cov += db * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let s = if with_scale && var_s > 0.0 { (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s } else { 1.0 };
    let t = mu_d - s * r * mu_s;
    (s, UnitQuaternion::from_matrix(&r), t)
}

/// Per-frame position error of `est` against `gt` after the requested
/// alignment of `est` onto `gt`.
pub fn absolute_position_error(est: &[Stamped], gt: &[Stamped], align: Alignment) -> Result<ApeReport, MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    for (index, (a, b)) in est.iter().zip(gt).enumerate() {
        if (a.timestamp - b.timestamp).abs() > 1e-6 {
            return Err(MetricsError::TimestampMismatch { index, est: a.timestamp, gt: b.timestamp });
        }
    }
    if est.is_empty() {
        return Ok(ApeReport { mean: 0.0, rmse: 0.0, per_frame: Vec::new() });
    }
    let p_est: Vec<Vector3<f64>> = est.iter().map(|s| s.pose.translation).collect();
    let p_gt: Vec<Vector3<f64>> = gt.iter().map(|s| s.pose.translation).collect();
    let (s, r, t) = match align {
        Alignment::None => (1.0, UnitQuaternion::identity(), Vector3::zeros()),
        Alignment::Rigid => umeyama(&p_est, &p_gt, false),
        Alignment::Similarity => umeyama(&p_est, &p_gt, true),
    };
    let per_frame: Vec<f64> = p_est.iter().zip(&p_gt).map(|(a, b)| (s * (r * a) + t - b).norm()).collect();
    let n = per_frame.len() as f64;
    Ok(ApeReport {
        mean: per_frame.iter().sum::<f64>() / n,
        rmse: (per_frame.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        per_frame,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapError {
    pub mean: f64,
    pub median: f64,
}

/// Distance from each estimated point to its nearest ground-truth point.
pub fn mapping_error(est: &GlobalMap, gt: &GlobalMap) -> Result<MapError, MetricsError> {
    if est.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyMap);
    }
    let pts: Vec<[f64; 3]> = gt.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&pts);
    let mut d: Vec<f64> = est
        .points
        .par_iter()
        .map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt())
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    let median = if d.len() % 2 == 1 { d[m] } else { 0.5 * (d[m - 1] + d[m]) };
    Ok(MapError { mean, median })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Penetration {
    pub max: f64,
    /// Mean over contact-labeled (frame, foot) samples.
    pub mean: f64,
    pub samples: usize,
}

/// Depth of contact-labeled feet below the terrain, `max(0, h(x, y) − z)`.
pub fn penetration_depth(
    skeleton: &SkeletonModel,
    states: &[BodyState],
    contacts: &[[bool; 2]],
    height: impl Fn(f64, f64) -> f64,
) -> Penetration {
    let mut out = Penetration::default();
    let mut sum = 0.0;
    for (s, labels) in states.iter().zip(contacts) {
        let kin = skeleton.forward_kinematics(&s.q);
        for (side, &body) in skeleton.contact_bodies.iter().enumerate() {
            if !labels[side] {
                continue;
            }
            let p = kin.positions[body];
            let depth = (height(p.x, p.y) - p.z).max(0.0);
            out.max = out.max.max(depth);
            sum += depth;
            out.samples += 1;
        }
    }
    if out.samples > 0 {
        out.mean = sum / out.samples as f64;
    }
    out
}

/// Runtime statistics recorded by a pipeline run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeStats {
    pub wall_time_s: f64,
    pub init_time_s: f64,
    pub frames: usize,
    pub keyframes: usize,
    pub mdba_solves: usize,
    pub mdba_iterations: usize,
    pub mdba_final_cost: f64,
    pub physics_failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub root_ape_mean: f64,
    pub root_ape_rmse: f64,
    pub cam_ape_mean: f64,
    pub cam_ape_rmse: f64,
    pub map_p2p_mean: f64,
    pub map_p2p_median: f64,
    pub penetration_max: f64,
    pub penetration_mean: f64,
    pub runtime: RuntimeStats,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    fn traj(points: &[Vector3<f64>]) -> Vec<Stamped> {
        points.iter().enumerate().map(|(i, p)| Stamped { timestamp: i as f64 * 0.1, pose: Pose::from_translation(*p) }).collect()
    }

    fn spiral() -> Vec<Vector3<f64>> {
        (0..20).map(|i| Vector3::new((i as f64 * 0.3).cos(), (i as f64 * 0.3).sin(), 0.05 * i as f64)).collect()
    }

    #[test]
    fn identical_is_zero() {
        let t = traj(&spiral());
        let r = absolute_position_error(&t, &t, Alignment::None).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn offset_removed_by_rigid() {
        let gt = spiral();
        let est: Vec<_> = gt.iter().map(|p| p + Vector3::new(0.1, 0.0, 0.0)).collect();
        let none = absolute_position_error(&traj(&est), &traj(&gt), Alignment::None).unwrap();
        assert!((none.mean - 0.1).abs() < 1e-12);
        let rigid = absolute_position_error(&traj(&est), &traj(&gt), Alignment::Rigid).unwrap();
        assert!(rigid.mean < 1e-9);
    }

    #[test]
    fn scale_removed_by_similarity() {
        let gt = spiral();
        let est: Vec<_> = gt.iter().map(|p| p * 2.0).collect();
        let r = absolute_position_error(&traj(&est), &traj(&gt), Alignment::Similarity).unwrap();
        assert!(r.mean < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        let a = traj(&spiral());
        let err = absolute_position_error(&a[..3], &a, Alignment::None).unwrap_err();
        assert_eq!(err, MetricsError::LengthMismatch { est: 3, gt: 20 });
    }

    #[test]
    fn plane_shift_and_outlier() {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                pts.push(Vector3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0));
            }
        }
        let gt = GlobalMap::from_points(pts.clone());
        let inner: Vec<_> = pts.iter().filter(|p| p.x > 0.05 && p.x < 0.2 && p.y > 0.05 && p.y < 0.2).collect();
        let shifted = GlobalMap::from_points(inner.iter().map(|p| *p + Vector3::new(0.0, 0.0, 0.05)).collect());
        let e = mapping_error(&shifted, &gt).unwrap();
        assert!((e.mean - 0.05).abs() < 1e-12);
        let mut with_outlier = GlobalMap::from_points(inner.iter().map(|p| **p).collect());
        with_outlier.push(Vector3::new(0.1, 0.1, 3.0), 1.0);
        let e = mapping_error(&with_outlier, &gt).unwrap();
        assert!((e.mean - 3.0 / with_outlier.len() as f64).abs() < 1e-12);
        assert_eq!(mapping_error(&GlobalMap::new(), &gt).unwrap_err(), MetricsError::EmptyMap);
    }

    #[test]
    fn penetration_is_one_sided() {
        let sk = SkeletonModel::default_body();
        let standing = BodyState::standing(&sk);
        let lowered = {
            let mut s = standing.clone();
            s.q[2] -= 0.03;
            s
        };
        let p = penetration_depth(&sk, &[standing.clone(), standing.clone()], &[[true, true]; 2], |_, _| 0.0);
        assert!(p.max < 1e-12);
        let p = penetration_depth(&sk, &[lowered.clone(), lowered], &[[true, true]; 2], |_, _| 0.0);
        assert!((p.max - 0.03).abs() < 1e-12 && (p.mean - 0.03).abs() < 1e-12);
        let raised = {
            let mut s = standing;
            s.q[2] += 0.1;
            s
        };
        assert_eq!(penetration_depth(&sk, &[raised], &[[true, true]], |_, _| 0.0).max, 0.0);
    }
}
