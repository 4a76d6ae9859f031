#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use erc_fuse::corpus::{Corpus, LabelSet, Utterance};
use erc_fuse::features::FeatureVector;
use erc_fuse::pipeline::RunConfig;
use erc_fuse::synthetic::{write_synthetic_corpus, SyntheticSpec};

pub struct Fixture {
    pub label_set: LabelSet,
    pub features: Vec<FeatureVector>,
    pub targets: Vec<usize>,
}

/// Loads one of the linearly separable fixtures in `tests/fixtures/separable.json`.
pub fn separable(name: &str) -> Fixture {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/separable.json");
    let all: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let f = &all[name];
    let labels: Vec<String> = serde_json::from_value(f["labels"].clone()).unwrap();
    let features: Vec<Vec<f64>> = serde_json::from_value(f["features"].clone()).unwrap();
    let targets: Vec<usize> = serde_json::from_value(f["targets"].clone()).unwrap();
    Fixture {
        label_set: LabelSet::new(labels).unwrap(),
        features: features.into_iter().map(FeatureVector::new).collect(),
        targets,
    }
}

/// Text-only corpus with the given number of utterances per label.
pub fn corpus_from_histogram(label_set: &LabelSet, counts: &[usize]) -> Corpus {
    let mut utterances = Vec::new();
    for (l, &count) in counts.iter().enumerate() {
        let name = label_set.name(l).unwrap();
        for i in 0..count {
            utterances.push(Utterance {
                utterance_id: format!("{name}-{i:03}"),
                conversation_id: format!("c{}", i % 3),
                speaker: "s".into(),
                text: format!("utterance {i}"),
                audio_path: None,
                label: Some(name.to_string()),
            });
        }
    }
    Corpus::new(label_set.clone(), utterances, ".").unwrap()
}

/// Synthetic complementary-modality corpus written into `dir`.
pub fn synthetic_manifest(dir: &Path, per_class: usize) -> PathBuf {
    let spec = SyntheticSpec {
        per_class,
        ..SyntheticSpec::default()
    };
    write_synthetic_corpus(dir, &spec).unwrap()
}

/// Both modalities trained with full-batch gradient descent; `fusion` is a
/// JSON fragment or `null` for equal weights.
pub fn synthetic_config(manifest: &Path, out: &Path, split_seed: u64, fusion: &str) -> RunConfig {
    let raw = format!(
        r#"{{
            "manifest": {manifest:?},
            "split": {{"ratio": 0.8, "seed": {split_seed}}},
            "text": {{"min_df": 1, "train": {{"learning_rate": 0.5, "epochs": 100, "batch_size": 1024}}}},
            "audio": {{"train": {{"learning_rate": 0.5, "epochs": 100, "batch_size": 1024}}}},
            "fusion": {fusion},
            "output_dir": {out:?}
        }}"#
    );
    RunConfig::from_json(&raw, manifest.parent().unwrap()).unwrap()
}

/// Removes wall-clock fields so artifacts from two runs can be compared.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timing_seconds");
            map.remove("stage_seconds");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Every file under `root` keyed by relative path; JSON files have timing
/// fields removed, other files are kept byte for byte.
pub fn artifact_contents(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for rel in erc_fuse::pipeline::list_artifacts(root).unwrap() {
        let bytes = std::fs::read(root.join(&rel)).unwrap();
        let bytes = if rel.ends_with(".json") {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            strip_timing(&mut v);
            serde_json::to_vec(&v).unwrap()
        } else {
            bytes
        };
        out.insert(rel, bytes);
    }
    let mut record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("run.json")).unwrap()).unwrap();
    strip_timing(&mut record);
    out.insert("run.json".into(), serde_json::to_vec(&record).unwrap());
    out
}
