use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scargan::dataset::{read_dataset, slice_paths, Manifest, Provenance};
use scargan::evalkit::{RegimeReport, SegEvaluation};
use scargan::study::{StudyStats, StudyStore, Truth};

fn scargan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scargan"))
        .current_dir(dir)
        .env_remove("SCARGAN_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = r#"{
  "maskgan": { "steps": 4, "snapshot_every": 2, "batch_size": 2, "log_every": 1,
               "net": { "initial_filters": 4, "depth": 2, "disc_filters": 4, "input_size": 32 } },
  "refinegan": { "steps": 2, "snapshot_every": 2, "batch_size": 2, "log_every": 1,
                 "net": { "initial_filters": 4, "depth": 2, "disc_filters": 4, "input_size": 32 } },
  "pretrain": { "n_slices": 8, "train": { "steps": 2, "batch_size": 2, "net": { "initial_filters": 4, "depth": 2, "input_size": 32 } } },
  "finetune": { "steps": 2, "batch_size": 2, "net": { "initial_filters": 4, "depth": 2, "input_size": 32 } },
  "cv": { "fold_count": 2 }
}"#;

fn phantoms(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let seed = seed.to_string();
    let n = n.to_string();
    ok(&scargan(dir, &["phantom-gen", "--out", name, "--n", &n, "--scar-fraction", "0.43", "--seed", &seed, "--size", "32", "--zoom", "1.6"]));
    dir.join(name)
}

#[test]
fn phantom_gen_writes_requested_scar_proportion() {
    let tmp = tempfile::tempdir().unwrap();
    let d = phantoms(tmp.path(), "d", 50, 7);
    let m = Manifest::load(&d).unwrap();
    assert_eq!(m.slices.len(), 50);
    // round(50 * 0.43) = round(21.5)
    assert_eq!(m.slices.iter().filter(|e| e.has_scar).count(), 22);
    assert!(d.join("config.resolved.json").exists());
}

#[test]
fn identical_configs_give_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let a = phantoms(tmp.path(), "a", 12, 3);
    let b = phantoms(tmp.path(), "b", 12, 3);
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    let first = &Manifest::load(&a).unwrap().slices[0].slice_id;
    let img = |d: &Path| std::fs::read(slice_paths(&d.join("slices"), first).0).unwrap();
    assert_eq!(img(&a), img(&b));

    // Rerunning from the resolved config reproduces the dataset.
    let cfg = a.join("config.resolved.json");
    ok(&scargan(tmp.path(), &["--config", cfg.to_str().unwrap(), "phantom-gen", "--out", "c"]));
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(tmp.path().join("c/manifest.json")).unwrap());

    let other = phantoms(tmp.path(), "other", 12, 4);
    assert_ne!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(other.join("manifest.json")).unwrap());
}

#[test]
fn missing_snapshots_fail_validation() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), "d", 8, 1);
    let out = scargan(tmp.path(), &["simulate", "--data", "d", "--out", "s", "--regime", "5x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("need 5 snapshots"), "{}", stderr(&out));
    assert!(!tmp.path().join("s/manifest.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(scargan(tmp.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(scargan(tmp.path(), &["phantom-gen", "--out", "d", "--bogus"]).status.code(), Some(2));
    assert_eq!(scargan(tmp.path(), &["simulate", "--data", "d", "--out", "s", "--regime", "2x"]).status.code(), Some(2));
    std::fs::write(tmp.path().join("c.json"), r#"{"maskgan": {"alpha": 1, "gamma": 2}}"#).unwrap();
    let out = scargan(tmp.path(), &["--config", "c.json", "phantom-gen", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gamma"));
}

#[test]
fn data_root_is_the_base_for_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let elsewhere = tmp.path().join("cwd");
    std::fs::create_dir_all(&elsewhere).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_scargan"))
        .current_dir(&elsewhere)
        .env("SCARGAN_DATA_ROOT", &root)
        .args(["phantom-gen", "--out", "d", "--n", "4", "--size", "32", "--zoom", "1.6"])
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("d/manifest.json").exists());
    assert!(std::fs::read_dir(&elsewhere).unwrap().next().is_none());
}

fn snapshot_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn pipeline_runs_end_to_end_at_toy_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    std::fs::write(t.join("tiny.json"), TINY).unwrap();
    let c = ["--config", "tiny.json"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = c.iter().chain(args).copied().collect();
        let out = scargan(t, &all);
        ok(&out);
        out
    };
    phantoms(t, "d", 24, 5);

    run(&["train-maskgan", "--data", "d", "--out", "mask"]);
    let masks = snapshot_files(&t.join("mask/snapshots"));
    assert_eq!(masks.len(), 2);
    assert!(t.join("mask/log.jsonl").exists() && t.join("mask/config.resolved.json").exists());

    let mask = masks[1].to_str().unwrap();
    run(&["train-refinegan", "--data", "d", "--out", "ref", "--mask-snapshot", mask]);
    let refiner = snapshot_files(&t.join("ref/snapshots")).pop().unwrap();
    let refiner = refiner.to_str().unwrap();
    run(&["train-refinegan", "--data", "d", "--out", "ref2", "--mask-snapshot", "mask/snapshots"]);
    assert_eq!(snapshot_files(&t.join("ref2/snapshots")).len(), 1);

    run(&["simulate", "--data", "d", "--out", "sim", "--regime", "1x", "--snapshot", mask, "--refiner", refiner]);
    let (m, slices) = read_dataset(&t.join("sim")).unwrap();
    let free = Manifest::load(&t.join("d")).unwrap().slices.iter().filter(|e| !e.has_scar).count();
    assert_eq!(slices.len(), free);
    assert!(m.slices.iter().all(|e| e.provenance == Some(Provenance::Simulated) && e.source_slice_id.is_some()));

    run(&["build-dataset", "--data", "d", "--out", "x2", "--regime", "1x", "--snapshot-dir", "mask/snapshots", "--refiner", refiner]);
    let m = Manifest::load(&t.join("x2")).unwrap();
    assert_eq!(m.slices.iter().filter(|e| e.provenance == Some(Provenance::Real)).count(), 24 - free);
    assert_eq!(m.slices.iter().filter(|e| e.provenance == Some(Provenance::Simulated)).count(), free);
    assert!(t.join("x2/contact_sheet.pgm").exists() && t.join("x2/selection.json").exists());

    run(&["train-seg", "--data", "d", "--out", "seg", "--regime", "1x", "--snapshot", mask, "--refiner", refiner, "--folds-parallel", "2"]);
    assert!(t.join("seg/pretrain").is_dir());
    assert_eq!(snapshot_files(&t.join("seg/snapshots")).len(), 2);
    let (_, preds) = read_dataset(&t.join("seg/predictions")).unwrap();
    assert_eq!(preds.len(), 24);

    run(&["evaluate", "--pred", "seg/predictions", "--gt", "d"]);
    let e: SegEvaluation = serde_json::from_slice(&std::fs::read(t.join("seg/predictions/evaluation.json")).unwrap()).unwrap();
    assert_eq!(e.slices, 24);
    assert!((0.0..=1.0).contains(&e.dice_endo) && (0.0..=1.0).contains(&e.dice_epi));

    let out = run(&["evaluate", "--folds", "seg", "--out", "report.json"]);
    let reports: Vec<RegimeReport> = serde_json::from_slice(&std::fs::read(t.join("report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].n, 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ScarGAN 1x"));
}

#[test]
fn evaluate_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    phantoms(tmp.path(), "d", 10, 2);
    ok(&scargan(tmp.path(), &["evaluate", "--pred", "d", "--gt", "d", "--out", "e.json"]));
    let e: SegEvaluation = serde_json::from_slice(&std::fs::read(tmp.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(e.dice_endo, 1.0);
    assert_eq!(e.dice_epi, 1.0);
    assert_eq!(e.pct_scar_in_myo, 100.0);
    assert_eq!(e.pct_scar_in_endo, 0.0);
}

#[test]
fn study_stats_reads_the_response_log() {
    let tmp = tempfile::tempdir().unwrap();
    let d = phantoms(tmp.path(), "d", 12, 9);
    let (_, slices) = read_dataset(&d).unwrap();
    let pool: Vec<_> = slices.into_iter().filter(|s| s.has_scar).collect();
    let mut store = StudyStore::open(tmp.path().join("study")).unwrap();
    let session = store.create_study("s1", &pool, &pool, 2, 0).unwrap();
    for item in &session.header.items {
        store.record_response("s1", "r1", &item.item_id, item.truth).unwrap();
    }
    drop(store);
    let out = scargan(tmp.path(), &["study-stats", "--root", "study", "--session", "s1"]);
    ok(&out);
    let stats: StudyStats = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats.raters.len(), 1);
    assert_eq!(stats.raters[0].correct, 4);
    assert!(session.header.items.iter().any(|i| i.truth == Truth::Simulated));

    let out = scargan(tmp.path(), &["study-stats", "--root", "study", "--session", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}
