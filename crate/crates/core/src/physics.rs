//! Map-aware body pose correction.
//!
//! A per-frame step solves a weighted linear least-squares problem over the
//! generalized accelerations `q̈` with three objective groups:
//!
//! * joint-rotation PD toward the estimated joint rotations,
//! * joint-position PD toward the estimated world joint positions,
//! * for every active foot contact, the gravity-axis row `J_c↓ q̈ = r̈_c↓`
//!   with `r̈_c↓ = k_p (h − r_c↓) − k_d ṙ_c↓` and `h` read from the elevation
//!   map.
//!
//! The state is then advanced with semi-implicit Euler, composing joint
//! rotations on the rotation manifold.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elevation::ElevationMap;
use crate::geometry::{right_jacobian_inv, rotation_exp, rotation_log, Pose};
use crate::skeleton::{joint_rotation, set_joint_rotation, BodyState, SkeletonModel};

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("correction system is ill-conditioned even after regularization")]
    IllConditionedSystem,
    #[error("time step must be positive, got {0}")]
    NonPositiveTimestep(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionParams {
    pub contact_kp: f64,
    pub contact_kd: f64,
    pub joint_kp: f64,
    pub joint_kd: f64,
    pub w_contact: f64,
    pub w_track: f64,
    /// Probability at or above which a foot may be in contact.
    pub p_contact: f64,
    /// Maximum distance between foot and terrain for a contact, meters.
    pub h_snap: f64,
    /// Horizon over which a foot's current velocity is extrapolated to
    /// catch it before it sinks below the terrain, seconds.
    pub lookahead: f64,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self {
            contact_kp: 400.0,
            contact_kd: 40.0,
            joint_kp: 100.0,
            joint_kd: 20.0,
            w_contact: 100.0,
            w_track: 1.0,
            p_contact: 0.5,
            h_snap: 0.1,
            lookahead: 0.05,
        }
    }
}

/// Gravity-axis contact PD law.
pub fn contact_pd_acceleration(h: f64, r_down: f64, rdot_down: f64, kp: f64, kd: f64) -> f64 {
    kp * (h - r_down) - kd * rdot_down
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    pub body: usize,
    pub probability: f64,
    pub active: bool,
    pub target_height: f64,
    pub position: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    /// Unit vector opposite to gravity.
    pub up: Vector3<f64>,
}

impl ContactSet {
    pub fn none(up: Vector3<f64>) -> Self {
        Self { contacts: Vec::new(), up }
    }

    pub fn active(&self) -> impl Iterator<Item = &Contact> {
        self.contacts.iter().filter(|c| c.active)
    }
}

/// Marks a foot active when its contact probability reaches `p_contact` and
/// it is within `h_snap` of the terrain under it. A foot that is below the
/// terrain, or will be within `lookahead` at its current velocity, is active
/// regardless of its probability. The target height is the higher of the
/// terrain under the foot and under its extrapolated position.
pub fn search_contacts(
    skeleton: &SkeletonModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    probabilities: [f64; 2],
    elev: &ElevationMap,
    params: &CorrectionParams,
) -> ContactSet {
    let kin = skeleton.forward_kinematics(q);
    let frame = elev.frame;
    let contacts = skeleton
        .contact_bodies
        .iter()
        .zip(probabilities)
        .map(|(&body, probability)| {
            let position = kin.positions[body];
            let velocity = skeleton.point_jacobian_with(&kin, q, body, &Vector3::zeros()) * qdot;
            let ahead = position + velocity * params.lookahead;
            // a foot moving toward a higher cell (a stair edge) aims for its top
            let target_height = elev
                .query_height(&frame.horizontal(&position))
                .max(elev.query_height(&frame.horizontal(&ahead)));
            let gap = frame.height(&position) - target_height;
            let sinking = gap.min(frame.height(&ahead) - target_height) < 0.0;
            Contact {
                body,
                probability,
                active: (probability >= params.p_contact || sinking) && gap.abs() <= params.h_snap,
                target_height,
                position,
            }
        })
        .collect();
    ContactSet { contacts, up: frame.up }
}

/// Shifts the root along gravity so the active contacts sit on the terrain
/// on average. Used to start the correction from a contact-consistent state.
pub fn settle_on_terrain(state: &BodyState, contacts: &ContactSet) -> BodyState {
    let gaps: Vec<f64> = contacts.active().map(|c| c.target_height - contacts.up.dot(&c.position)).collect();
    let mut out = state.clone();
    if !gaps.is_empty() {
        let lift = gaps.iter().sum::<f64>() / gaps.len() as f64;
        out.set_root_translation(&(state.root_translation() + contacts.up * lift));
    }
    out
}

/// Generalized velocity that carries `from` to `to` in one
/// [`BodyState::integrate_position`] step of length `dt`.
pub fn reference_velocity(from: &DVector<f64>, to: &DVector<f64>, dt: f64) -> DVector<f64> {
    let mut v = DVector::zeros(from.len());
    for k in 0..3 {
        v[k] = (to[k] - from[k]) / dt;
    }
    for k in 0..(from.len() - 3) / 3 {
        let a = joint_rotation(from, k);
        let body = rotation_log(&(rotation_exp(&a).inverse() * rotation_exp(&joint_rotation(to, k))));
        set_joint_rotation(&mut v, k, &(right_jacobian_inv(&a) * body / dt));
    }
    v
}

/// One correction step. `reference` and `reference_prev` are consecutive
/// estimator states whose `qdot` fields hold their reference velocities
/// (see [`reference_velocity`]); `state_prev` is the corrected state of the
/// previous frame. The tracking groups drive the deviation of `state_prev`
/// from `reference_prev` to zero with feed-forward of the reference
/// acceleration, so a state on the reference stays on it exactly.
pub fn physical_correction(
    skeleton: &SkeletonModel,
    reference: &BodyState,
    reference_prev: &BodyState,
    state_prev: &BodyState,
    contacts: &ContactSet,
    dt: f64,
    params: &CorrectionParams,
) -> Result<BodyState, PhysicsError> {
    if !(dt > 0.0) {
        return Err(PhysicsError::NonPositiveTimestep(dt));
    }
    let feed_forward = (&reference.qdot - &reference_prev.qdot) / dt;
    let qddot = solve_accelerations(skeleton, reference_prev, &feed_forward, state_prev, contacts, dt, params)?;
    let qdot = &state_prev.qdot + &qddot * dt;
    let advanced = BodyState { q: state_prev.q.clone(), qdot };
    let mut out = BodyState { q: advanced.integrate_position(dt), qdot: advanced.qdot };
    // position-level projection: whatever the PD step left below the terrain
    // is lifted out rigidly
    let kin = skeleton.forward_kinematics(&out.q);
    let sunk = contacts
        .active()
        .map(|c| c.target_height - contacts.up.dot(&kin.positions[c.body]))
        .fold(0.0, f64::max);
    if sunk > 0.0 {
        let t = out.root_translation() + contacts.up * sunk;
        out.set_root_translation(&t);
    }
    Ok(out)
}

fn solve_accelerations(
    skeleton: &SkeletonModel,
    target: &BodyState,
    feed_forward: &DVector<f64>,
    cur: &BodyState,
    contacts: &ContactSet,
    dt: f64,
    params: &CorrectionParams,
) -> Result<DVector<f64>, PhysicsError> {
    let n = skeleton.dof();
    let mut lhs = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);

    // (a) joint rotations, one identity row block per joint
    for k in 0..skeleton.joint_count() {
        let theta = joint_rotation(&cur.q, k);
        let body_err = rotation_log(&(rotation_exp(&theta).inverse() * rotation_exp(&joint_rotation(&target.q, k))));
        let err = right_jacobian_inv(&theta) * body_err;
        let rate_err = joint_rotation(&target.qdot, k) - joint_rotation(&cur.qdot, k);
        let desired = joint_rotation(feed_forward, k) + params.joint_kp * err + params.joint_kd * rate_err;
        for a in 0..3 {
            let i = 3 + 3 * k + a;
            lhs[(i, i)] += params.w_track;
            rhs[i] += params.w_track * desired[a];
        }
    }

    // (b) world joint positions
    let kin_cur = skeleton.forward_kinematics(&cur.q);
    let kin_target = skeleton.forward_kinematics(&target.q);
    for k in 0..skeleton.joint_count() {
        let jac = skeleton.point_jacobian_with(&kin_cur, &cur.q, k, &Vector3::zeros());
        let jac_target = skeleton.point_jacobian_with(&kin_target, &target.q, k, &Vector3::zeros());
        let err = kin_target.positions[k] - kin_cur.positions[k];
        let rate_err = &jac_target * &target.qdot - &jac * &cur.qdot;
        let desired = &jac * feed_forward + params.joint_kp * err + params.joint_kd * rate_err;
        lhs.gemm_tr(params.w_track, &jac, &jac, 1.0);
        rhs.gemv_tr(params.w_track, &jac, &desired, 1.0);
    }

    // (c) contacts along gravity; the point acceleration is J·q̈ + J̇·q̇.
    // The PD law is evaluated at the end of the step (height r + ṙ·dt + a·dt²,
    // rate ṙ + a·dt) and solved for a, which keeps stiff gains stable at the
    // frame rate.
    let implicit = 1.0 + params.contact_kp * dt * dt + params.contact_kd * dt;
    let (side_a, side_b) = horizontal_basis(&contacts.up);
    for c in contacts.active() {
        let jac = skeleton.point_jacobian_with(&kin_cur, &cur.q, c.body, &Vector3::zeros());
        let drift = jacobian_drift(skeleton, cur, c.body);
        let row = jac.transpose() * contacts.up;
        let height = contacts.up.dot(&kin_cur.positions[c.body]);
        let rate = row.dot(&cur.qdot);
        let accel =
            contact_pd_acceleration(c.target_height, height + rate * dt, rate, params.contact_kp, params.contact_kd)
                / implicit;
        lhs.ger(params.w_contact, &row, &row, 1.0);
        rhs.axpy(params.w_contact * (accel - contacts.up.dot(&drift)), &row, 1.0);
        // a planted foot does not slide: its horizontal velocity is stopped
        // within the step
        if c.probability >= params.p_contact {
            for axis in [side_a, side_b] {
                let row = jac.transpose() * axis;
                let accel = -row.dot(&cur.qdot) / dt;
                lhs.ger(params.w_contact, &row, &row, 1.0);
                rhs.axpy(params.w_contact * (accel - axis.dot(&drift)), &row, 1.0);
            }
        }
    }

    for reg in [1e-9, 1e-6] {
        let mut damped = lhs.clone();
        for i in 0..n {
            damped[(i, i)] += reg;
        }
        if let Some(chol) = damped.cholesky() {
            let sol = chol.solve(&rhs);
            if sol.iter().all(|v| v.is_finite()) {
                return Ok(sol);
            }
        }
    }
    Err(PhysicsError::IllConditionedSystem)
}

fn horizontal_basis(up: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = (seed - up * up.dot(&seed)).normalize();
    (a, up.cross(&a))
}

/// `J̇·q̇` of a joint position, by a central difference along the motion.
fn jacobian_drift(skeleton: &SkeletonModel, state: &BodyState, body: usize) -> Vector3<f64> {
    let h = 1e-6;
    let speed = state.qdot.norm();
    if speed == 0.0 {
        return Vector3::zeros();
    }
    let eps = h / speed;
    let shifted = |s: f64| {
        let q = state.integrate_position(s);
        skeleton.point_jacobian(&q, body, &Vector3::zeros()) * &state.qdot
    };
    (shifted(eps) - shifted(-eps)) / (2.0 * eps)
}

/// Head-to-world pose of a body state.
pub fn head_pose(skeleton: &SkeletonModel, q: &DVector<f64>) -> Pose {
    skeleton.forward_kinematics(q).joint_pose(skeleton.head)
}

/// Noise model of the stand-in pose estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorNoise {
    /// Constant root offset, meters.
    pub root_offset: [f64; 3],
    /// Root drift velocity, meters per second.
    pub root_drift_rate: [f64; 3],
    pub root_sigma: f64,
    pub joint_sigma: f64,
    /// Probability of flipping each contact label.
    pub flip_rate: f64,
}

impl Default for EstimatorNoise {
    fn default() -> Self {
        Self { root_offset: [0.0; 3], root_drift_rate: [0.0; 3], root_sigma: 0.0, joint_sigma: 0.0, flip_rate: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub state: BodyState,
    pub contact_probabilities: [f64; 2],
}

/// Ground truth corrupted by drift, Gaussian noise and label flips.
pub fn oracle_pose_estimate(
    gt_states: &[BodyState],
    gt_contacts: &[[bool; 2]],
    timestamps: &[f64],
    noise: &EstimatorNoise,
    seed: u64,
) -> Vec<PoseEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = Vector3::from(noise.root_offset);
    let rate = Vector3::from(noise.root_drift_rate);
    let t0 = timestamps.first().copied().unwrap_or(0.0);
    let root_n = Normal::new(0.0, noise.root_sigma.max(0.0)).expect("finite sigma");
    let joint_n = Normal::new(0.0, noise.joint_sigma.max(0.0)).expect("finite sigma");
    gt_states
        .iter()
        .zip(gt_contacts)
        .zip(timestamps)
        .map(|((gt, labels), &t)| {
            let mut state = gt.clone();
            let drift = offset + rate * (t - t0);
            for a in 0..3 {
                let jitter = if noise.root_sigma > 0.0 { root_n.sample(&mut rng) } else { 0.0 };
                state.q[a] += drift[a] + jitter;
                state.qdot[a] += rate[a];
            }
            if noise.joint_sigma > 0.0 {
                for i in 3..state.q.len() {
                    state.q[i] += joint_n.sample(&mut rng);
                }
            }
            let mut probs = [0.0; 2];
            for (p, &label) in probs.iter_mut().zip(labels) {
                let flip = noise.flip_rate > 0.0 && rng.gen::<f64>() < noise.flip_rate;
                *p = if label != flip { 1.0 } else { 0.0 };
            }
            PoseEstimate { state, contact_probabilities: probs }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elevation::build_elevation_map;
    use crate::map::GlobalMap;
    use nalgebra::Unit;

    fn flat(h: f64) -> ElevationMap {
        let mut pts = Vec::new();
        for i in -60..=60 {
            for j in -60..=60 {
                pts.push(Vector3::new(i as f64 * 0.02, j as f64 * 0.02, h));
            }
        }
        build_elevation_map(
            &GlobalMap::from_points(pts),
            &Vector3::new(0.05, 0.0, 1.0),
            &Unit::new_normalize(Vector3::new(0.0, 0.0, -1.0)),
            2.0,
            100,
            h,
        )
        .unwrap()
    }

    #[test]
    fn pd_law_values() {
        assert_eq!(contact_pd_acceleration(0.0, 0.0, 0.0, 100.0, 20.0), 0.0);
        assert_eq!(contact_pd_acceleration(0.0, 0.1, 0.0, 100.0, 20.0), -10.0);
        assert_eq!(contact_pd_acceleration(0.0, 0.0, 1.0, 100.0, 20.0), -20.0);
    }

    #[test]
    fn contact_search_rules() {
        let sk = SkeletonModel::default_body();
        let elev = flat(0.0);
        let params = CorrectionParams::default();
        let mut s = BodyState::standing(&sk);
        s.q[2] += 0.03;
        let set = search_contacts(&sk, &s.q, &s.qdot, [0.0, 1.0], &elev, &params);
        assert!(!set.contacts[0].active);
        assert!(set.contacts[1].active);
        assert!(set.contacts[1].target_height.abs() < 1e-12);
        // a falling foot is caught before it reaches the terrain
        s.qdot[2] = -1.0;
        let set = search_contacts(&sk, &s.q, &s.qdot, [0.0, 0.0], &elev, &params);
        assert!(set.contacts.iter().all(|c| c.active));
        s.qdot[2] = 0.0;
        s.q[2] += 0.47;
        let set = search_contacts(&sk, &s.q, &s.qdot, [1.0, 1.0], &elev, &params);
        assert!(set.active().next().is_none());
    }

    #[test]
    fn fixed_point_without_contacts() {
        let sk = SkeletonModel::default_body();
        let mut s = BodyState::standing(&sk);
        s.q[10] = 0.2;
        let out = physical_correction(&sk, &s, &s, &s, &ContactSet::none(Vector3::z()), 1.0 / 60.0, &CorrectionParams::default())
            .unwrap();
        assert!((&out.q - &s.q).norm() < 1e-9);
        assert!(out.qdot.norm() < 1e-9);
    }

    #[test]
    fn on_reference_motion_is_reproduced() {
        let sk = SkeletonModel::default_body();
        let dt = 1.0 / 30.0;
        let states: Vec<DVector<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 * dt;
                let mut s = BodyState::standing(&sk);
                s.q[0] = 0.5 * t * t;
                s.q[2] += 0.05 * (3.0 * t).sin();
                s.q[3 + 3 * 4 + 1] = 0.4 * (4.0 * t).sin();
                s.q[5] = 0.3 * t;
                s.q
            })
            .collect();
        let refs: Vec<BodyState> = (0..states.len())
            .map(|i| {
                let prev = &states[i.saturating_sub(1)];
                BodyState { q: states[i].clone(), qdot: reference_velocity(prev, &states[i], dt) }
            })
            .collect();
        let mut cur = refs[0].clone();
        for i in 1..refs.len() {
            let c = ContactSet::none(Vector3::z());
            cur = physical_correction(&sk, &refs[i], &refs[i - 1], &cur, &c, dt, &CorrectionParams::default()).unwrap();
            assert!((&cur.q - &refs[i].q).norm() < 1e-8, "frame {i}: {}", (&cur.q - &refs[i].q).norm());
        }
    }

    #[test]
    fn rejects_bad_timestep() {
        let sk = SkeletonModel::default_body();
        let s = BodyState::standing(&sk);
        let err = physical_correction(&sk, &s, &s, &s, &ContactSet::none(Vector3::z()), 0.0, &CorrectionParams::default());
        assert_eq!(err.unwrap_err(), PhysicsError::NonPositiveTimestep(0.0));
    }

    #[test]
    fn oracle_zero_noise_is_ground_truth() {
        let sk = SkeletonModel::default_body();
        let states = vec![BodyState::standing(&sk); 3];
        let labels = vec![[true, false]; 3];
        let est = oracle_pose_estimate(&states, &labels, &[0.0, 0.1, 0.2], &EstimatorNoise::default(), 7);
        for e in &est {
            assert_eq!(e.state, states[0]);
            assert_eq!(e.contact_probabilities, [1.0, 0.0]);
        }
    }

    #[test]
    fn oracle_drift_grows_linearly() {
        let sk = SkeletonModel::default_body();
        let n = 11;
        let states = vec![BodyState::standing(&sk); n];
        let labels = vec![[true, true]; n];
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let noise = EstimatorNoise { root_drift_rate: [0.01, 0.0, 0.0], ..Default::default() };
        let est = oracle_pose_estimate(&states, &labels, &times, &noise, 1);
        // integrate the drift velocity with the trapezoid rule
        let mut integrated = 0.0;
        for i in 0..n {
            if i > 0 {
                integrated += 0.5 * (est[i].state.qdot[0] + est[i - 1].state.qdot[0]) * 0.5;
            }
            let err = est[i].state.q[0] - states[i].q[0];
            assert!((err - integrated).abs() < 1e-12);
        }
    }
}
