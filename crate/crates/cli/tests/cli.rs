//! Drives the `occ` binary on small synthetic datasets.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn occ(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occ"))
        .args(args)
        .current_dir(dir)
        .env_remove("OCC_WORKERS")
        .output()
        .expect("spawn occ")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SCENE: &str = r#"
seed = 4
frames = 2

[rig]
width = 64
height = 40

[random]
cars = 2
pedestrians = 1
traffic_cones = 0
barriers = 1
walls = 1
vegetation = 1
"#;

fn small_dataset(dir: &Path) {
    fs::write(dir.join("scene.toml"), SMALL_SCENE).unwrap();
    let o = occ(&["synth", "--spec", "scene.toml", "--out", "ds"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_run_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    assert!(dir.join("ds/manifest").exists());
    assert!(dir.join("ds/gt/1.grid").exists());

    let o = occ(
        &[
            "run",
            "ds",
            "--out",
            "pred",
            "--report",
            "run.json",
            "--dump-stage",
            "3",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("frame 1:"));
    for f in [
        "pred/0.grid",
        "pred/1.grid",
        "pred/1.stage3.grid",
        "run.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(report["samples"].as_array().unwrap().len(), 2);
    assert_eq!(report["samples"][1]["window"], serde_json::json!([0, 1]));

    let o = occ(
        &[
            "evaluate", "pred", "ds/gt", "--mask", "ds/gt", "--out", "eval",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("eval/report.txt")).unwrap();
    assert_eq!(text, stdout(&o));
    for section in ["per-class IoU", "mIoU", "RayIoU", "RayPQ", "@1m", "@4m"] {
        assert!(text.contains(section), "{section} missing from report");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval/summary.json")).unwrap()).unwrap();
    let miou = summary["summary"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let o = occ(&["evaluate", "ds/gt", "ds/gt", "--out", "self"], dir);
    assert!(o.status.success());
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("self/summary.json")).unwrap()).unwrap();
    for key in ["miou", "iou_occ", "rayiou", "raypq"] {
        assert_eq!(s["summary"][key].as_f64(), Some(1.0), "{key}");
    }
}

#[test]
fn missing_prediction_is_reported_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    fs::create_dir_all(dir.join("pred")).unwrap();
    fs::copy(dir.join("ds/gt/0.grid"), dir.join("pred/0.grid")).unwrap();
    let o = occ(&["evaluate", "pred", "ds/gt", "--out", "eval"], dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("missing prediction: 1.grid"));
    assert!(fs::read_to_string(dir.join("eval/report.txt"))
        .unwrap()
        .contains("missing prediction: 1.grid"));
}

#[test]
fn invalid_configuration_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);

    let o = occ(&["run", "--print-config"], dir);
    assert!(o.status.success());
    let defaults = stdout(&o);
    assert!(defaults.contains("tau_ov = 0.45"));
    fs::write(dir.join("ok.toml"), &defaults).unwrap();
    let o = occ(
        &["run", "ds", "-c", "ok.toml", "--targets", "0", "--out", "p"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(
        dir.join("bad.toml"),
        defaults.replace("tau_ov = 0.45", "tau_ov = 1.5"),
    )
    .unwrap();
    let o = occ(&["run", "ds", "-c", "bad.toml"], dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau_ov"), "{}", stderr(&o));

    fs::write(dir.join("typo.toml"), "windw = \"causal\"\n").unwrap();
    assert_eq!(
        occ(&["run", "ds", "-c", "typo.toml"], dir).status.code(),
        Some(1)
    );
    assert_eq!(
        occ(&["run", "ds", "--targets", "9"], dir).status.code(),
        Some(1)
    );
    assert_eq!(occ(&["run", "no-such-dataset"], dir).status.code(), Some(1));
    assert_eq!(occ(&["frobnicate"], dir).status.code(), Some(1));
    assert_eq!(occ(&["--help"], dir).status.code(), Some(0));
}

#[test]
fn worker_count_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    let run = |workers: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_occ"))
            .args(["run", "ds", "--out", out])
            .current_dir(dir)
            .env("OCC_WORKERS", workers)
            .output()
            .unwrap()
    };
    assert_eq!(run("0", "p0").status.code(), Some(1));
    assert!(run("1", "p1").status.success());
    assert!(run("3", "p3").status.success());
    for t in 0..2 {
        let a = fs::read(dir.join(format!("p1/{t}.grid"))).unwrap();
        let b = fs::read(dir.join(format!("p3/{t}.grid"))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn sample_failures_exit_two_and_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    fs::write(dir.join("ds/1/0/depth.f32"), b"short").unwrap();
    let o = occ(&["run", "ds", "--out", "pred"], dir);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("frame 1") && err.contains("ingest"), "{err}");
    assert!(err.contains("depth.f32"), "{err}");
    assert!(dir.join("pred/0.grid").exists());
}

#[test]
fn export_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_dataset(dir);
    let o = occ(&["export", "ds/gt/0.grid", "--out", "points.txt"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("points.txt")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# x y z class_id class instance"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(' ').collect()).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r.len(), 6);
        for v in &r[..3] {
            v.parse::<f64>().unwrap();
        }
        assert_ne!(r[4], "free");
    }
    assert!(rows.iter().any(|r| r[4] == "driveable_surface"));

    let o = occ(&["inspect", "ds", "--target", "1", "--out", "insp"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for stage in ["voxelize", "fill", "warmup", "coherence", "cleanup"] {
        assert!(out.contains(stage), "{stage} missing:\n{out}");
    }
    assert!(out.contains("window [0, 1]"));

    let o = occ(&["inspect", "ds/gt/0.grid", "--json"], dir);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["0.grid"]["occupied"].as_u64().unwrap() > 0);

    assert_eq!(occ(&["export", "missing.grid"], dir).status.code(), Some(1));
}
