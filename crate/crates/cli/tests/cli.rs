use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_erc-fuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn erc-fuse")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, per_class: usize) -> PathBuf {
    let o = run(&["synth", dir.to_str().unwrap(), "--per-class", &per_class.to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("config.json")
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn validate_aligned_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), 5);
    let o = run(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("utterances        20"), "{out}");
    assert!(out.contains("fully_aligned     20"), "{out}");
    let histogram_total: usize = out
        .lines()
        .skip_while(|l| !l.starts_with("label histogram"))
        .skip(1)
        .filter_map(|l| l.split_whitespace().nth(1)?.parse::<usize>().ok())
        .sum();
    assert_eq!(histogram_total, 20);
}

#[test]
fn validate_missing_wav_fails_with_id() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), 2);
    std::fs::remove_file(dir.path().join("audio/s001_anger.wav")).unwrap();
    let o = run(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("s001_anger"), "{}", stdout(&o));
}

#[test]
fn malformed_manifest_is_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    write(&m, "{ not json");
    let o = run(&["validate", "--manifest", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_writes_reports_and_report_prints_them() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), 10);
    let out = dir.path().join("custom-out");
    let o = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["split.json", "holdout.json", "fusion.json", "run.json", "reports/ensemble.json", "reports/text.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let o = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("model     ensemble"));
    assert!(stdout(&o).contains("0.6297"));
}

#[test]
fn stages_run_independently() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), 10);
    let c = config.to_str().unwrap();
    for stage in ["split", "featurize", "train", "predict", "evaluate"] {
        let o = run(&[stage, "--config", c]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    // Predict again from the saved model only.
    std::fs::remove_dir_all(dir.path().join("out/predictions")).unwrap();
    let o = run(&["predict", "--config", c]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("out/predictions/audio.csv").is_file());
}

#[test]
fn search_with_one_member_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let c = dir.path().join("one.json");
    write(
        &c,
        r#"{"manifest": "manifest.json", "text": {"min_df": 1}, "fusion": {"method": "search", "step": 0.1}}"#,
    );
    let o = run(&["run", "--config", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("search requires at least 2 members"), "{}", stderr(&o));
}

#[test]
fn corrupt_audio_is_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), 10);
    write(&dir.path().join("audio/s000_joy.wav"), "RIFF garbage");
    let o = run(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("featurize") && err.contains("s000_joy"), "{err}");
}

fn prediction_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let header = "id,joy,anger,sadness,neutral\n";
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    let c = dir.join("c.csv");
    write(&a, &format!("{header}s000_joy,0.6,0.2,0.1,0.1\ns000_anger,0.5,0.3,0.1,0.1\n"));
    write(&b, &format!("{header}s000_joy,0.1,0.7,0.1,0.1\ns000_anger,0.1,0.8,0.05,0.05\n"));
    write(&c, &format!("{header}s000_joy,0.7,0.1,0.1,0.1\ns000_anger,0.2,0.2,0.5,0.1\n"));
    (a, b, c)
}

#[test]
fn fuse_weighted_with_gold_attaches_reference() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let (a, b, _) = prediction_files(dir.path());
    let out = dir.path().join("fused/ensemble.csv");
    let o = run(&[
        "fuse",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--weights",
        "0.7,0.3",
        "--output",
        out.to_str().unwrap(),
        "--gold",
        dir.path().join("manifest.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    // 0.7 * 0.6 + 0.3 * 0.1 = 0.45
    assert!(csv.contains("s000_joy,0.45"), "{csv}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fused/ensemble.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["reference"]["matched"]["accuracy"], 0.6297);
    assert_eq!(report["accuracy"], 1.0);
}

#[test]
fn fuse_bad_weights_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, _) = prediction_files(dir.path());
    let o = run(&["fuse", a.to_str().unwrap(), b.to_str().unwrap(), "--weights", "0.7,0.4"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn fuse_vote_three_files_is_one_hot() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = prediction_files(dir.path());
    let out = dir.path().join("vote.csv");
    let o = run(&[
        "fuse",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        c.to_str().unwrap(),
        "--method",
        "vote",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    for line in csv.lines().skip(1) {
        let values: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.iter().filter(|&&v| v == 1.0).count(), 1, "{line}");
        assert_eq!(values.iter().sum::<f64>(), 1.0);
    }
    // s000_joy: votes joy, anger, joy
    assert!(csv.contains("s000_joy,1,0,0,0"), "{csv}");
}

#[test]
fn usage_error_exits_1() {
    assert_eq!(run(&["fuse", "only-one.csv"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
