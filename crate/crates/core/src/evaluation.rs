//! Accuracy, macro-F1, confusion matrices, timing and versioned JSON
//! reports, plus the published reference results used for context.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifiers::PredictionTable;
use crate::corpus::LabelSet;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "erc-fuse-report/1";

/// Runs `block` and returns its result with elapsed wall-clock seconds
/// from a monotonic clock.
pub fn measure<R>(block: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let result = block();
    (result, start.elapsed().as_secs_f64())
}

fn check_ids(pred: &BTreeMap<String, usize>, gold: &BTreeMap<String, usize>) -> Result<()> {
    if pred.is_empty() && gold.is_empty() {
        return Err(Error::Metric("no predictions to score".into()));
    }
    let p: BTreeSet<&String> = pred.keys().collect();
    let g: BTreeSet<&String> = gold.keys().collect();
    if p != g {
        return Err(Error::IdMismatch {
            ids: p.symmetric_difference(&g).map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

/// Fraction of ids whose prediction equals the gold label.
pub fn accuracy(pred: &BTreeMap<String, usize>, gold: &BTreeMap<String, usize>) -> Result<f64> {
    check_ids(pred, gold)?;
    let correct = pred.iter().filter(|(id, p)| gold[*id] == **p).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Counts indexed `[gold][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(Vec<Vec<u64>>);

impl ConfusionMatrix {
    pub fn counts(&self) -> &[Vec<u64>] {
        &self.0
    }

    pub fn n_labels(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.0.len()).map(|i| self.0[i][i]).sum()
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.0[gold][predicted]
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Precision, recall and F1 for one label. Undefined ratios are 0.
    pub fn label_metrics(&self, label: usize) -> (f64, f64, f64) {
        let tp = self.0[label][label] as f64;
        let predicted: u64 = self.0.iter().map(|row| row[label]).sum();
        let actual: u64 = self.0[label].iter().sum();
        let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }

    /// Unweighted mean of per-label F1 over every label in the set.
    pub fn macro_f1(&self) -> f64 {
        let n = self.n_labels();
        (0..n).map(|l| self.label_metrics(l).2).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self, labels: &LabelSet) -> String {
        let mut out = String::from("gold\\predicted");
        for l in labels.labels() {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in labels.labels().iter().zip(&self.0) {
            out.push_str(label);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    pred: &BTreeMap<String, usize>,
    gold: &BTreeMap<String, usize>,
    n_labels: usize,
) -> Result<ConfusionMatrix> {
    check_ids(pred, gold)?;
    let mut counts = vec![vec![0u64; n_labels]; n_labels];
    for (id, &p) in pred {
        let g = gold[id];
        if p >= n_labels || g >= n_labels {
            return Err(Error::Metric(format!(
                "label index out of range for {id:?} (gold {g}, predicted {p}, {n_labels} labels)"
            )));
        }
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix(counts))
}

/// Macro-averaged F1 over all `n_labels` labels; a label that never
/// occurs in gold or predictions contributes 0.
pub fn macro_f1(
    pred: &BTreeMap<String, usize>,
    gold: &BTreeMap<String, usize>,
    n_labels: usize,
) -> Result<f64> {
    Ok(confusion_matrix(pred, gold, n_labels)?.macro_f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub model_name: String,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Value given to precision, recall or F1 when its denominator is 0.
    pub f1_zero_division: f64,
    pub labels: Vec<String>,
    pub per_label: Vec<LabelMetrics>,
    /// Rows are gold labels, columns predicted labels.
    pub confusion: ConfusionMatrix,
    pub timing_seconds: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub reference: Option<ReferenceComparison>,
}

impl EvaluationReport {
    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::new(self.labels.clone())
    }

    /// Fixed-width text table for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model     {}", self.model_name);
        let _ = writeln!(out, "n         {}", self.n);
        let _ = writeln!(out, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(out, "macro-F1  {:.4}", self.macro_f1);
        if let Some(t) = self.timing_seconds {
            let _ = writeln!(out, "time      {t:.3} s");
        }
        let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "f1", "support");
        for m in &self.per_label {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.label, m.precision, m.recall, m.f1, m.support
            );
        }
        if let Some(r) = &self.reference {
            out.push_str(&r.summary());
        }
        out
    }
}

/// Scores a prediction table against gold labels.
pub fn evaluate(
    table: &PredictionTable,
    gold: &BTreeMap<String, usize>,
    config_hash: &str,
    seed: u64,
) -> Result<EvaluationReport> {
    let pred = table.predicted_labels();
    let n_labels = table.label_set.len();
    let confusion = confusion_matrix(&pred, gold, n_labels)?;
    let per_label = (0..n_labels)
        .map(|l| {
            let (precision, recall, f1) = confusion.label_metrics(l);
            LabelMetrics {
                label: table.label_set.labels()[l].clone(),
                precision,
                recall,
                f1,
                support: confusion.counts()[l].iter().sum(),
            }
        })
        .collect();
    Ok(EvaluationReport {
        schema: REPORT_SCHEMA.into(),
        model_name: table.model_name.clone(),
        n: pred.len(),
        accuracy: accuracy(&pred, gold)?,
        macro_f1: confusion.macro_f1(),
        f1_zero_division: 0.0,
        labels: table.label_set.labels().to_vec(),
        per_label,
        confusion,
        timing_seconds: table.timing_seconds,
        config_hash: config_hash.into(),
        seed,
        reference: None,
    })
}

pub fn write_report(report: &EvaluationReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = serde_json::to_string_pretty(report).map_err(|e| Error::json("report", e))?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvaluationReport> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::json(format!("report {}", path.display()), e))?;
    let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or_default();
    if schema != REPORT_SCHEMA {
        return Err(Error::SchemaVersion {
            expected: REPORT_SCHEMA.into(),
            found: schema.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::json(format!("report {}", path.display()), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub modality: Modality,
    pub accuracy: f64,
    pub execution_seconds: Option<f64>,
    pub source: String,
}

/// Published accuracies and execution times of the reference system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBaselines {
    entries: Vec<Baseline>,
}

const TEXT_SOURCE: &str = "published text-model results (fine-tuned transformers)";
const AUDIO_SOURCE: &str = "published audio-model results (self-supervised speech encoders)";
const ENSEMBLE_SOURCE: &str = "published late-fusion ensemble of Wav2Vec2 (audio) and RoBERTa (text)";

impl ReferenceBaselines {
    pub fn published() -> Self {
        let b = |name: &str, modality, accuracy, secs, source: &str| Baseline {
            name: name.into(),
            modality,
            accuracy,
            execution_seconds: secs,
            source: source.into(),
        };
        use Modality::*;
        Self {
            entries: vec![
                b("RoBERTa", Text, 0.5068, Some(74.6), TEXT_SOURCE),
                b("DistilBERT", Text, 0.4982, Some(51.25), TEXT_SOURCE),
                b("DeBERTa", Text, 0.4829, Some(21.56), TEXT_SOURCE),
                b("DistilRoBERTa", Text, 0.4183, Some(5.61), TEXT_SOURCE),
                b("HuBERT", Audio, 0.3108, Some(113.6), AUDIO_SOURCE),
                b("Wav2Vec2", Audio, 0.3543, Some(87.25), AUDIO_SOURCE),
                b("Wav2Vec2-large-robust", Audio, 0.3254, Some(97.32), AUDIO_SOURCE),
                b("ensemble", Multimodal, 0.6297, None, ENSEMBLE_SOURCE),
            ],
        }
    }

    pub fn entries(&self) -> &[Baseline] {
        &self.entries
    }

    /// Case-insensitive lookup by model name.
    pub fn find(&self, name: &str) -> Option<&Baseline> {
        self.entries.iter().find(|b| b.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub model_name: String,
    pub accuracy: f64,
    pub matched: Option<Baseline>,
    /// `accuracy - matched.accuracy`.
    pub delta: Option<f64>,
    /// Whole reference table, attached when nothing matched.
    pub table: Option<Vec<Baseline>>,
}

impl ReferenceComparison {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        match (&self.matched, self.delta) {
            (Some(b), Some(d)) => {
                let _ = writeln!(
                    out,
                    "reference {} accuracy {:.4} ({}); delta {:+.4}",
                    b.name, b.accuracy, b.source, d
                );
            }
            _ => {
                let _ = writeln!(out, "reference results (context only):");
                for b in self.table.iter().flatten() {
                    let secs = b.execution_seconds.map_or("-".to_string(), |s| format!("{s} s"));
                    let _ = writeln!(out, "  {:<22} {:.4}  {}", b.name, b.accuracy, secs);
                }
            }
        }
        out
    }
}

/// Informational comparison against published results; never fails.
pub fn compare_to_reference(report: &EvaluationReport, baselines: &ReferenceBaselines) -> ReferenceComparison {
    let matched = baselines.find(&report.model_name).cloned();
    let delta = matched.as_ref().map(|b| report.accuracy - b.accuracy);
    let table = matched.is_none().then(|| baselines.entries().to_vec());
    ReferenceComparison {
        model_name: report.model_name.clone(),
        accuracy: report.accuracy,
        matched,
        delta,
        table,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ProbabilityDistribution;

    fn labels(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(id, l)| (id.to_string(), *l)).collect()
    }

    fn seq(values: &[usize]) -> BTreeMap<String, usize> {
        values.iter().enumerate().map(|(i, &l)| (format!("u{i}"), l)).collect()
    }

    #[test]
    fn accuracy_cases() {
        let gold = seq(&[0, 1, 2, 1, 0]);
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        let pred = seq(&[0, 0, 2, 0, 1]);
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.4);
    }

    #[test]
    fn accuracy_errors() {
        let empty = BTreeMap::new();
        assert!(accuracy(&empty, &empty).is_err());
        let err = accuracy(&labels(&[("a", 0), ("b", 0)]), &labels(&[("a", 0), ("c", 0)])).unwrap_err();
        match err {
            Error::IdMismatch { ids } => assert_eq!(ids, ["b", "c"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn macro_f1_hand_example() {
        // gold a,a,b ; pred a,b,b
        let gold = seq(&[0, 0, 1]);
        let pred = seq(&[0, 1, 1]);
        let f1 = macro_f1(&pred, &gold, 2).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_perfect() {
        let gold = seq(&[0, 1, 2, 2]);
        assert_eq!(macro_f1(&gold, &gold, 3).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_counts_absent_labels_as_zero() {
        let gold = seq(&[0, 1]);
        assert_eq!(macro_f1(&gold, &gold, 4).unwrap(), 0.5);
    }

    #[test]
    fn confusion_basics() {
        let gold = seq(&[0, 0, 1, 2]);
        let cm = confusion_matrix(&gold, &gold, 3).unwrap();
        assert_eq!(cm.counts(), &[vec![2, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let pred = seq(&[1, 0, 1, 0]);
        let cm = confusion_matrix(&pred, &gold, 3).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(2, 0), 1);
        assert_eq!(cm.accuracy(), accuracy(&pred, &gold).unwrap());
        assert!(confusion_matrix(&seq(&[5]), &seq(&[0]), 3).is_err());
    }

    #[test]
    fn confusion_csv() {
        let set = LabelSet::new(["x", "y"]).unwrap();
        let cm = confusion_matrix(&seq(&[0, 1]), &seq(&[0, 0]), 2).unwrap();
        assert_eq!(cm.to_csv(&set), "gold\\predicted,x,y\nx,1,1\ny,0,0\n");
    }

    #[test]
    fn measure_bounds() {
        let ((), t) = measure(|| ());
        assert!((0.0..0.1).contains(&t));
        let ((_, inner), outer) = measure(|| measure(|| (0..10_000).sum::<u64>()));
        assert!(outer >= inner);
    }

    #[test]
    fn baselines_match_published_values() {
        let b = ReferenceBaselines::published();
        let acc: Vec<f64> = b.entries().iter().map(|e| e.accuracy).collect();
        assert_eq!(acc, [0.5068, 0.4982, 0.4829, 0.4183, 0.3108, 0.3543, 0.3254, 0.6297]);
        assert_eq!(b.find("distilroberta").unwrap().execution_seconds, Some(5.61));
    }

    fn report(name: &str, acc: f64) -> EvaluationReport {
        let set = LabelSet::new(["a", "b"]).unwrap();
        let mut t = PredictionTable::new(name, set);
        t.insert("u0", ProbabilityDistribution::new(vec![0.9, 0.1]).unwrap()).unwrap();
        let mut r = evaluate(&t, &seq(&[0]), "hash", 7).unwrap();
        r.accuracy = acc;
        r
    }

    #[test]
    fn compare_matched_name() {
        let c = compare_to_reference(&report("ensemble", 0.60), &ReferenceBaselines::published());
        assert!((c.delta.unwrap() - -0.0297).abs() < 1e-12);
        assert!(c.table.is_none());
    }

    #[test]
    fn compare_unknown_name_attaches_table() {
        let r = report("my-model", 0.5);
        let before = r.clone();
        let c = compare_to_reference(&r, &ReferenceBaselines::published());
        assert_eq!(r, before);
        assert!(c.delta.is_none() && c.matched.is_none());
        assert_eq!(c.table.unwrap().len(), 8);
    }

    #[test]
    fn report_roundtrip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report("RoBERTa", 0.5);
        r.timing_seconds = Some(0.1234567891234);
        r.reference = Some(compare_to_reference(&r, &ReferenceBaselines::published()));
        let path = dir.path().join("r.json");
        write_report(&r, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);

        let raw = std::fs::read_to_string(&path).unwrap().replace(REPORT_SCHEMA, "erc-fuse-report/9");
        std::fs::write(&path, raw).unwrap();
        match read_report(&path) {
            Err(Error::SchemaVersion { found, .. }) => assert_eq!(found, "erc-fuse-report/9"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_mentions_metrics() {
        let text = report("x", 1.0).summary_table();
        assert!(text.contains("accuracy  1.0000"));
        assert!(text.contains("macro-F1"));
    }
}
