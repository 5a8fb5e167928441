use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SHORT: &str = "[sim.gait]\nduration = 3.0\n";

fn egohdm(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_egohdm"));
    cmd.args(args);
    if let Some(n) = threads {
        cmd.env("EGOHDM_THREADS", n);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lamda = 1.0\n");
    let out = dir.path().join("out");
    let o = egohdm(&["sim", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_dataset_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = egohdm(&["run", dir.path().join("nothing").to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config.toml"));
}

#[test]
fn all_writes_outputs_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("out");
    let o = egohdm(&["all", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let output = out.join("output");
    for f in ["camera.txt", "root.txt", "states.txt", "map.ply", "extrinsic.txt", "runtime.json", "metrics.json"] {
        assert!(output.join(f).exists(), "{f}");
    }
    assert!(fs::read_dir(output.join("elevation")).unwrap().count() > 0);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(output.join("metrics.json")).unwrap()).unwrap();
    for key in ["root_ape_mean", "cam_ape_mean", "map_p2p_mean", "penetration_max", "runtime"] {
        assert!(metrics.get(key).is_some(), "{key}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let data = dir.path().join("data");
    let o = egohdm(&["sim", "--config", &cfg, "--seed", "8", "--out", data.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));

    let mut runs = Vec::new();
    for (name, threads) in [("one", Some("1")), ("two", Some("2")), ("default", None)] {
        let out = dir.path().join(name);
        let o = egohdm(&["run", data.to_str().unwrap(), "--config", &cfg, "--out", out.to_str().unwrap()], threads);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out);
    }
    for f in ["camera.txt", "root.txt", "states.txt", "map.ply", "extrinsic.txt"] {
        let first = fs::read(runs[0].join(f)).unwrap();
        for r in &runs[1..] {
            assert_eq!(first, fs::read(r.join(f)).unwrap(), "{f} differs");
        }
    }
}

#[test]
fn ablation_flags_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let data = dir.path().join("data");
    assert_eq!(egohdm(&["sim", "--config", &cfg, "--out", data.to_str().unwrap()], None).status.code(), Some(0));
    let full = dir.path().join("full");
    let bare = dir.path().join("bare");
    assert_eq!(egohdm(&["run", data.to_str().unwrap(), "--config", &cfg, "--out", full.to_str().unwrap()], None).status.code(), Some(0));
    let o = egohdm(&["run", data.to_str().unwrap(), "--config", &cfg, "--no-physics", "--out", bare.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(fs::read(full.join("states.txt")).unwrap(), fs::read(bare.join("states.txt")).unwrap());
}
