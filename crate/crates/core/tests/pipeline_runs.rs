mod common;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use erc_fuse::corpus::{load_manifest, SplitAssignment};
use erc_fuse::pipeline::{Pipeline, RunConfig};
use erc_fuse::Error;

fn write_predictions(path: &Path, labels: &[String], rows: &BTreeMap<String, Vec<f64>>) {
    let mut out = format!("id,{}\n", labels.join(","));
    for (id, p) in rows {
        let cells: Vec<String> = p.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{id},{}", cells.join(",")).unwrap();
    }
    std::fs::write(path, out).unwrap();
}

/// Puts `mass` on `target` and spreads the rest evenly.
fn peaked(k: usize, target: usize, mass: f64) -> Vec<f64> {
    (0..k).map(|i| if i == target { mass } else { (1.0 - mass) / (k - 1) as f64 }).collect()
}

#[test]
fn external_predictions_alone_are_fused_and_scored() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_manifest(dir.path(), 10);
    let corpus = load_manifest(&manifest).unwrap();
    let labels: Vec<String> = corpus.label_set().labels().to_vec();
    let k = labels.len();
    let gold = corpus.gold();

    // "a" is right on even positions, "b" on odd ones but more confident when right.
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for (i, (id, &y)) in gold.iter().enumerate() {
        let wrong = (y + 1) % k;
        let (ya, yb) = if i % 2 == 0 { (y, wrong) } else { (wrong, y) };
        a.insert(id.clone(), peaked(k, ya, 0.6));
        b.insert(id.clone(), peaked(k, yb, if i % 2 == 0 { 0.5 } else { 0.9 }));
    }
    write_predictions(&dir.path().join("a.csv"), &labels, &a);
    write_predictions(&dir.path().join("b.csv"), &labels, &b);

    let raw = r#"{"manifest": "manifest.json", "external": [
        {"name": "a", "path": "a.csv"}, {"name": "b", "path": "b.csv"}], "output_dir": "out"}"#;
    let pipeline = Pipeline::new(RunConfig::from_json(raw, dir.path()).unwrap()).unwrap();
    let (reports, record) = pipeline.run().unwrap();

    assert!(!record.stage_seconds.contains_key("featurize"));
    assert!(!record.stage_seconds.contains_key("train"));
    assert!(!dir.path().join("out/features").exists());
    assert!(!dir.path().join("out/models").exists());

    let names: Vec<&str> = reports.iter().map(|r| r.model_name.as_str()).collect();
    assert_eq!(names, ["a", "b", "ensemble"]);

    // Hand-computed equal-weight average on the test ids.
    let split = SplitAssignment::read(dir.path().join("out/split.json")).unwrap();
    let correct = split
        .test_ids
        .iter()
        .filter(|id| {
            let avg: Vec<f64> = a[*id].iter().zip(&b[*id]).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
            let best = (0..k).fold(0, |m, j| if avg[j] > avg[m] { j } else { m });
            best == gold[*id]
        })
        .count();
    let ensemble = &reports[2];
    assert_eq!(ensemble.n, split.test_ids.len());
    assert!((ensemble.accuracy - correct as f64 / split.test_ids.len() as f64).abs() < 1e-12);
    assert!(dir.path().join("out/fusion.json").is_file());
}

#[test]
fn weight_search_needs_two_members() {
    let dir = tempfile::tempdir().unwrap();
    common::synthetic_manifest(dir.path(), 10);
    let raw = r#"{"manifest": "manifest.json", "text": {"min_df": 1},
        "fusion": {"method": "search", "step": 0.1}}"#;
    let config = RunConfig::from_json(raw, dir.path()).unwrap();
    match Pipeline::new(config) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "config"),
        other => panic!("expected a config failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn stages_resume_from_artifacts_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_manifest(dir.path(), 10);

    let whole = common::synthetic_config(&manifest, &dir.path().join("whole"), 5, "null");
    Pipeline::new(whole).unwrap().run().unwrap();

    let staged_out = dir.path().join("staged");
    let make = || Pipeline::new(common::synthetic_config(&manifest, &staged_out, 5, "null")).unwrap();
    make().split().unwrap();
    make().featurize().unwrap();
    make().train().unwrap();
    make().predict().unwrap();
    make().evaluate().unwrap();

    // Only a full run writes run.json; the stub lets the helper read the staged side.
    let mut whole = common::artifact_contents(&dir.path().join("whole"));
    whole.remove("run.json");
    std::fs::write(staged_out.join("run.json"), "{}").unwrap();
    let mut staged = common::artifact_contents(&staged_out);
    staged.remove("run.json");
    assert_eq!(whole.keys().collect::<Vec<_>>(), staged.keys().collect::<Vec<_>>());
    for (rel, bytes) in &whole {
        assert_eq!(bytes, &staged[rel], "{rel} differs");
    }
}

#[test]
fn evaluate_before_predict_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_manifest(dir.path(), 10);
    let p = Pipeline::new(common::synthetic_config(&manifest, &dir.path().join("out"), 1, "null")).unwrap();
    p.split().unwrap();
    match p.evaluate() {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "evaluate"),
        other => panic!("expected evaluate failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn seed_override_changes_hash_but_output_dir_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_manifest(dir.path(), 5);
    let base = common::synthetic_config(&manifest, &dir.path().join("out"), 1, "null");

    let mut moved = base.clone();
    moved.apply_overrides(None, Some(dir.path().join("elsewhere")));
    assert_eq!(base.config_hash().unwrap(), moved.config_hash().unwrap());

    let mut reseeded = base.clone();
    reseeded.apply_overrides(Some(99), None);
    assert_ne!(base.config_hash().unwrap(), reseeded.config_hash().unwrap());
    assert_eq!(reseeded.split.seed, 99);
    assert_eq!(reseeded.text.as_ref().unwrap().train.seed, 99);
    assert_eq!(reseeded.audio.as_ref().unwrap().train.seed, 99);
}
