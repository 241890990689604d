//! Checkpoints written by a full training run.

use std::fs;
use std::path::Path;

use mimi::checkpoint::{load_checkpoint, read_manifest, BLOB_FILE, MANIFEST_FILE};
use mimi::config::RunConfig;
use mimi::engine::accuracy;
use mimi::runner::{train, TrainOptions};
use mimi::Error;

const CONFIG: &str = r#"{
  "model": {"patch_size": 4, "image_side": 8, "stages": [[16, 2]], "heads_per_stage": [2], "num_classes": 3},
  "adapters": {"per_stage_sigma": [2]},
  "schedule": {"sigma0": 2, "sigma_target": 8, "rho": 0.5, "epochs_per_cycle": 2, "warmup_epochs": 1},
  "train": {"lr_peak": 0.01, "batch_size": 16, "precision": "f64"},
  "dataset": {"source": "synthetic", "num_classes": 3, "samples_per_class": 20, "image_side": 8, "noise_std": 0.3, "seed": 2},
  "output_dir": "out"
}"#;

fn trained(dir: &Path) -> RunConfig {
    let path = dir.join("run.json");
    fs::write(&path, CONFIG).unwrap();
    let cfg = RunConfig::from_path(&path).unwrap();
    train(
        &cfg,
        &TrainOptions {
            reproducible: true,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    cfg
}

#[test]
fn every_cycle_checkpoint_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let data = cfg.dataset.load().unwrap();
    let root = tmp.path().join("out/checkpoints");
    let mut dirs: Vec<_> = fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 3);
    for (i, dir) in dirs.iter().enumerate() {
        let ck = load_checkpoint::<f64>(dir).unwrap();
        let history = &ck.manifest.history;
        assert_eq!(history.len(), i + 1);
        let last = history.last().unwrap();
        let hidden: Vec<(usize, usize)> = ck.model.adapters().iter().map(|(s, a)| (*s, a.hidden())).collect();
        assert_eq!(hidden, last.hidden_after);
        assert_eq!(ck.model.trainable_param_count(), last.trainable_params);
        // The restored weights reproduce the accuracy measured during the run.
        assert_eq!(accuracy(&ck.model, &data.test, 16).unwrap(), last.test_acc);
        assert_eq!(accuracy(&ck.model, &data.val, 16).unwrap(), last.val_acc);
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    let dir = tmp.path().join("out/checkpoints/cycle-02");

    let blob = fs::read(dir.join(BLOB_FILE)).unwrap();
    fs::write(dir.join(BLOB_FILE), &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&dir), Err(Error::TruncatedBlob { .. })));
    fs::write(dir.join(BLOB_FILE), &blob).unwrap();

    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    let mut manifest = read_manifest(&dir).unwrap();
    manifest.format_version += 1;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&dir), Err(Error::VersionMismatch { .. })));

    let mut manifest: mimi::checkpoint::CheckpointManifest = serde_json::from_str(&text).unwrap();
    manifest.model_spec.num_classes += 1;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&dir), Err(Error::HashMismatch { .. })));

    fs::write(dir.join(MANIFEST_FILE), text).unwrap();
    assert!(load_checkpoint::<f64>(&dir).is_ok());
}
