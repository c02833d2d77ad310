use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nsadm::geometry::DistanceMatrix;
use nsadm::io::read_dm;

const TINY: &str = r#"{
  "seed": 5,
  "grid": {"w": 16, "h": 16},
  "schedule": {"T": 3},
  "denoiser": {"widths": [4, 8, 8], "groups": 2, "feature_channels": [2, 2, 2]},
  "train": {"epochs": 2, "batch_size": 2},
  "dataset": {"n_scenes": 4, "split": [0.5, 0.0, 0.5], "train_power_dbm": [8.0]},
  "sweep": {"power_dbm": [3.0, 13.0], "detection_ratio": [0.3, 0.6], "variance_scale": [1.0, 2.0]},
  "validation": {"trials": 1000, "crb_snr": [1000.0]}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nsadm"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.json");
    if !cfg.exists() {
        std::fs::write(&cfg, TINY).unwrap();
    }
    bin()
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .env("NSADM_OUTPUT_DIR", dir.join("run"))
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_is_reproducible_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(dir.path(), &["--jobs", "1", "generate", "--out", a.to_str().unwrap()]));
    ok(&run(dir.path(), &["--jobs", "2", "generate", "--out", b.to_str().unwrap()]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 1 + 4 * 7);
    assert_eq!(ta, tb);
    let manifest: serde_json::Value = serde_json::from_slice(&ta[Path::new("manifest.json")]).unwrap();
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 4);
}

#[test]
fn different_seed_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(dir.path(), &["generate", "--out", a.to_str().unwrap()]));
    ok(&run(dir.path(), &["--seed", "6", "generate", "--out", b.to_str().unwrap()]));
    assert_ne!(
        std::fs::read(a.join("scenes/00000/gt.dm")).unwrap(),
        std::fs::read(b.join("scenes/00000/gt.dm")).unwrap()
    );
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": {"split": [0.5, 0.5, 0.5]}}"#).unwrap();
    let out = bin().arg("--config").arg(&bad).arg("generate").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = run(dir.path(), &["infer", "--method", "dncnn"]);
    assert_eq!(out.status.code(), Some(2), "clap usage errors use status 2");
    let out = bin().arg("generate").env("NSADM_TRAIN_NOPE", "1").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--dataset", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
    let out = bin().arg("--config").arg(dir.path().join("nope.json")).arg("generate").output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unreachable_admissibility_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["generate", "--out", dir.path().join("x").to_str().unwrap()])
        .env("NSADM_SENSING_RHO0", "1.0")
        .env("NSADM_DATASET_MAX_RETRIES", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("admissibility exhausted"));
}

#[test]
fn validate_stats_reports_insufficient_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["validate-stats", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("insufficient samples"));
}

fn read(p: &Path) -> DistanceMatrix {
    read_dm(p).unwrap()
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |s: &str| d.join(s).to_str().unwrap().to_string();
    ok(&run(d, &["generate"]));
    ok(&run(d, &["--jobs", "1", "train"]));
    ok(&run(d, &["--jobs", "2", "train", "--out", &p("model2")]));
    assert_eq!(tree(&d.join("run/model")), tree(&d.join("model2")));
    let loss = std::fs::read_to_string(d.join("run/model/loss.csv")).unwrap();
    assert!(loss.starts_with("step,mse_term,perceptual_term,total\n"));

    for m in ["nsadm", "mt", "passthrough"] {
        ok(&run(d, &["infer", "--method", m, "--power-dbm", "8"]));
    }
    ok(&run(d, &["--jobs", "1", "infer", "--method", "nsadm", "--power-dbm", "8", "--out", &p("again")]));
    assert_eq!(tree(&d.join("run/predictions/nsadm")), tree(&d.join("again/nsadm")));

    let tag = "power_dbm_+8.000";
    let test_ids = ["00002", "00003"];
    for id in test_ids {
        let degraded = read(&d.join(format!("run/dataset/scenes/{id}/degraded.dm")));
        let pass = read(&d.join(format!("run/predictions/passthrough/{tag}/{id}.dm")));
        assert_eq!(pass, degraded);
        let mt = read(&d.join(format!("run/predictions/mt/{tag}/{id}.dm")));
        assert!(mt.valid_count() >= degraded.valid_count());
        let ns = read(&d.join(format!("run/predictions/nsadm/{tag}/{id}.dm")));
        assert!(ns.is_fully_valid());
        assert!(d.join(format!("run/predictions/nsadm/{tag}/{id}.ply")).exists());
    }

    let out = run(d, &["evaluate"]);
    ok(&out);
    let csv = std::fs::read_to_string(d.join("run/eval/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("scene_id,method,power,rmse_m,chamfer_m2,coverage"));
    assert_eq!(lines.len(), 1 + 3 * test_ids.len());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/eval/summary.json")).unwrap()).unwrap();
    let axis = &summary["axes"][0];
    assert_eq!(axis["axis"], "power_dbm");
    assert_eq!(axis["curves"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_covers_every_axis() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(d, &["generate"]));
    let out = run(d, &["sweep", "--method", "mt,passthrough", "--power-dbm=-2,8"]);
    ok(&out);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/sweep/summary.json")).unwrap()).unwrap();
    let axes = summary["axes"].as_array().unwrap();
    assert_eq!(axes.len(), 3);
    assert_eq!(axes[0]["values"], serde_json::json!([-2.0, 8.0]));
    for a in axes {
        for c in a["curves"].as_array().unwrap() {
            assert_eq!(c["rmse_m"].as_array().unwrap().len(), a["values"].as_array().unwrap().len());
        }
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("variance_scale"));
}
