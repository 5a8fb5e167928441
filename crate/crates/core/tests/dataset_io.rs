use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use egohdm::dataset::{frame_path, Dataset, DatasetError, GroundTruth};
use egohdm::geometry::{read_trajectory, write_trajectory, Pose, Stamped};
use egohdm::sim::{synthesize, SessionSpec};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

fn short_spec(seed: u64) -> SessionSpec {
    let mut spec = SessionSpec { seed, ..SessionSpec::default() };
    spec.gait.duration = 3.0;
    spec
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn assert_text_close(name: &str, a: &[u8], b: &[u8]) {
    let (a, b) = (String::from_utf8_lossy(a), String::from_utf8_lossy(b));
    let (ta, tb): (Vec<&str>, Vec<&str>) = (a.split_whitespace().collect(), b.split_whitespace().collect());
    assert_eq!(ta.len(), tb.len(), "{name}");
    for (x, y) in ta.iter().zip(&tb) {
        match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(x), Ok(y)) => assert!((x - y).abs() < 1e-8, "{name}: {x} vs {y}"),
            _ => assert_eq!(x, y, "{name}"),
        }
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let a = synthesize(&short_spec(4)).unwrap();
    let b = synthesize(&short_spec(4)).unwrap();
    let c = synthesize(&short_spec(5)).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.gt, b.gt);
    assert_ne!(a.dataset.keyframes, c.dataset.keyframes);
}

#[test]
fn dataset_round_trip_is_stable() {
    let session = synthesize(&short_spec(9)).unwrap();
    let first = tempfile::tempdir().unwrap();
    session.dataset.write(first.path()).unwrap();
    session.gt.write(first.path()).unwrap();

    let ds = Dataset::read(first.path()).unwrap();
    let gt = GroundTruth::read(first.path(), &ds.skeleton).unwrap();
    assert_eq!(ds.keyframes.len(), session.dataset.keyframes.len());
    assert_eq!(ds.estimator.len(), session.dataset.estimator.len());
    assert_eq!(ds.skeleton, session.dataset.skeleton);
    assert_eq!(ds.info, session.dataset.info);
    for (f, rec) in &session.dataset.keyframes {
        assert_eq!(ds.keyframes[f].mask, rec.mask);
        assert_eq!(ds.keyframes[f].edges.len(), rec.edges.len());
    }
    for (a, b) in ds.estimator.iter().zip(&session.dataset.estimator) {
        assert!((&a.state.q - &b.state.q).amax() < 1e-6);
    }

    let second = tempfile::tempdir().unwrap();
    ds.write(second.path()).unwrap();
    gt.write(second.path()).unwrap();
    let (a, b) = (read_tree(first.path()), read_tree(second.path()));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        if name.ends_with(".txt") {
            // text is rounded, so re-reading renormalizes quaternions
            assert_text_close(name, bytes, &b[name]);
        } else {
            assert!(bytes == &b[name], "{name} changed after a round trip");
        }
    }
}

#[test]
fn missing_mask_is_reported_by_path() {
    let session = synthesize(&short_spec(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    session.dataset.write(dir.path()).unwrap();
    let frame = *session.dataset.keyframes.keys().nth(1).unwrap();
    let mask = frame_path(dir.path(), frame, "mask");
    fs::remove_file(&mask).unwrap();

    match Dataset::read(dir.path()) {
        Err(e @ DatasetError::MissingDatasetComponent(_)) => {
            let name = mask.file_name().unwrap().to_string_lossy().into_owned();
            assert!(e.to_string().contains(&name), "{e}");
        }
        other => panic!("expected a missing component error, got {other:?}"),
    }
}

#[test]
fn malformed_config_is_reported() {
    let session = synthesize(&short_spec(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    session.dataset.write(dir.path()).unwrap();
    fs::write(dir.path().join("config.toml"), "fps = \"fast\"\n").unwrap();
    assert!(matches!(Dataset::read(dir.path()), Err(DatasetError::Malformed { .. })));
}

proptest! {
    #[test]
    fn trajectory_text_round_trip(
        samples in prop::collection::vec(
            (0.0..100.0f64, -50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64, -3.0..3.0f64, -1.5..1.5f64, -3.0..3.0f64),
            1..20,
        )
    ) {
        let traj: Vec<Stamped> = samples
            .iter()
            .map(|&(t, x, y, z, r, p, w)| Stamped {
                timestamp: t,
                pose: Pose::new(UnitQuaternion::from_euler_angles(r, p, w), Vector3::new(x, y, z)),
            })
            .collect();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let back = read_trajectory(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), traj.len());
        for (a, b) in back.iter().zip(&traj) {
            prop_assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            prop_assert!((a.pose.translation - b.pose.translation).norm() < 1e-6);
            prop_assert!(a.pose.rotation.angle_to(&b.pose.rotation) < 1e-6);
        }
    }
}
