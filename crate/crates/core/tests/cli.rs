//! The `mimi` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = r#"{
  "model": {"patch_size": 4, "image_side": 8, "stages": [[16, 2]], "heads_per_stage": [2], "num_classes": 3},
  "adapters": {"per_stage_sigma": [4]},
  "schedule": {"sigma0": 4, "sigma_target": 16, "rho": 0.5, "epochs_per_cycle": 2, "warmup_epochs": 1},
  "train": {"lr_peak": 0.01, "batch_size": 16},
  "dataset": {"source": "synthetic", "num_classes": 3, "samples_per_class": 20, "image_side": 8, "noise_std": 0.3, "seed": 5},
  "output_dir": "out"
}"#;

fn mimi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mimi"))
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = dir.join("run.json");
    fs::write(&cfg, CONFIG).unwrap();
    let status = mimi()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(extra)
        .env("REPRODUCIBLE", "1")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    dir.join("out")
}

#[test]
fn reproducible_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (train(a.path(), &[]), train(b.path(), &[]));
    let names = files(&ra);
    assert_eq!(names, files(&rb));
    for expected in ["metrics.csv", "cycles.csv", "allocation.csv", "cost.csv", "checkpoints/cycle-02/tensors.bin"] {
        assert!(names.contains(&PathBuf::from(expected)), "{expected} missing");
    }
    for n in &names {
        assert_eq!(fs::read(ra.join(n)).unwrap(), fs::read(rb.join(n)).unwrap(), "{} differs", n.display());
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(a.path(), &["--seed", "1"]);
    let rb = train(b.path(), &["--seed", "2"]);
    assert_ne!(fs::read(ra.join("metrics.csv")).unwrap(), fs::read(rb.join("metrics.csv")).unwrap());
}

#[test]
fn vanilla_mode_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path(), &["--mode", "vanilla"]);
    let cycles = fs::read_to_string(out.join("cycles.csv")).unwrap();
    assert_eq!(cycles.lines().count(), 2);

    let ck = out.join("checkpoints/cycle-00");
    let report = mimi().args(["report", "--checkpoint"]).arg(&ck).output().unwrap();
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.starts_with("# flops"));
    assert!(text.contains("layer_index,slot,M,N_initial,N_current,percent_remaining"));

    let score = mimi()
        .args(["score", "--scorer", "grad", "--checkpoint"])
        .arg(&ck)
        .arg("--config")
        .arg(tmp.path().join("run.json"))
        .output()
        .unwrap();
    assert!(score.status.success());
    let text = String::from_utf8(score.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("adapter_id,layer_index,slot,neuron_index,score,scorer_id"));
    // 4 adapters with 4 neurons each
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn unreproducible_runs_get_their_own_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, CONFIG).unwrap();
    let status = mimi()
        .args(["train", "--config"])
        .arg(&cfg)
        .env_remove("REPRODUCIBLE")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let runs: Vec<_> = fs::read_dir(tmp.path().join("out")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].to_string_lossy().starts_with("run-"));
}

#[test]
fn verify_and_gaussian_subcommands() {
    let v = mimi().args(["verify", "cycle-formula"]).output().unwrap();
    assert!(v.status.success());
    assert!(String::from_utf8(v.stdout).unwrap().starts_with("PASS cycle-formula"));

    let g = mimi().args(["gaussian", "--samples", "5000"]).output().unwrap();
    assert!(g.status.success());
    let text = String::from_utf8(g.stdout).unwrap();
    let (stats, kl) = text.split_once("\n\n").unwrap();
    assert_eq!(stats.lines().count(), 1 + 3 + 4);
    assert_eq!(kl.lines().count(), 1 + 3);

    let bad = mimi().args(["gaussian", "--m", "2", "--n", "3"]).output().unwrap();
    assert!(!bad.status.success());
}
