//! Probabilistic classifiers: multinomial softmax regression trained by
//! mini-batch gradient descent, and prediction tables, the CSV interchange
//! format for per-utterance class probabilities from any model.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::evaluation::measure;
use crate::features::FeatureVector;
use crate::matrix::Matrix;
use crate::rng::XorShift64Star;

/// Allowed deviation of a distribution's sum from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
/// Imported rows whose sum is within this of 1 are renormalised.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-4;

/// Class probabilities in label-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty distribution".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Distribution(format!("component {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Distribution(format!("components sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Divides non-negative finite weights by their sum.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Distribution("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Distribution("weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| (w / sum).min(1.0)).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut v = vec![0.0; n];
        v[index] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest component; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        Self(probs)
    }
}

impl TryFrom<Vec<f64>> for ProbabilityDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityDistribution> for Vec<f64> {
    fn from(d: ProbabilityDistribution) -> Self {
        d.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Linear softmax classifier: `p = softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    label_set: LabelSet,
    weights: Matrix,
    bias: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(label_set: LabelSet, feature_dim: usize) -> Self {
        let n = label_set.len();
        Self {
            label_set,
            weights: Matrix::zeros(n, feature_dim),
            bias: vec![0.0; n],
        }
    }

    pub fn from_parts(label_set: LabelSet, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != label_set.len() {
            return Err(Error::Dimension {
                expected: label_set.len(),
                found: weights.rows(),
            });
        }
        if bias.len() != label_set.len() {
            return Err(Error::Dimension {
                expected: label_set.len(),
                found: bias.len(),
            });
        }
        if weights.as_slice().iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            label_set,
            weights,
            bias,
        })
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn n_labels(&self) -> usize {
        self.label_set.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim() {
            return Err(Error::Dimension {
                expected: self.feature_dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut z = self.weights.mul_vec(x);
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        Ok(z)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbabilityDistribution> {
        let p = softmax(&self.logits(x)?);
        Ok(ProbabilityDistribution::from_trusted(p))
    }

    pub fn write(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let path = path.as_ref();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            labels: self.label_set.clone(),
            n_labels: self.n_labels(),
            feature_dim: self.feature_dim(),
            weights: self.weights.as_slice().to_vec(),
            bias: self.bias.clone(),
            config_hash: config_hash.into(),
        };
        let body = serde_json::to_string(&file).map_err(|e| Error::json("model", e))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    /// Returns the model and the config hash it was stamped with.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&raw)
            .map_err(|e| Error::json(format!("model {}", path.display()), e))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::SchemaVersion {
                expected: MODEL_FORMAT.into(),
                found: file.format,
            });
        }
        if file.n_labels != file.labels.len() || file.weights.len() != file.n_labels * file.feature_dim
        {
            return Err(Error::Dimension {
                expected: file.labels.len() * file.feature_dim,
                found: file.weights.len(),
            });
        }
        let weights = Matrix::from_vec(file.n_labels, file.feature_dim, file.weights);
        Ok((Self::from_parts(file.labels, weights, file.bias)?, file.config_hash))
    }
}

const MODEL_FORMAT: &str = "erc-fuse-softmax/1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    labels: LabelSet,
    n_labels: usize,
    feature_dim: usize,
    /// Row-major, one row per label.
    weights: Vec<f64>,
    bias: Vec<f64>,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Weight each example by the inverse frequency of its class.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 32,
            l2: 1e-4,
            seed: 0,
            shuffle: true,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

/// Gradient of the training objective, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy over `batch` plus `(l2 / 2) * ||W||^2`, and its exact
/// gradient.
pub fn loss_and_gradient<X: AsRef<[f64]>>(
    model: &SoftmaxModel,
    batch: &[(X, usize)],
    l2: f64,
) -> Result<(f64, Gradient)> {
    loss_and_gradient_weighted(model, batch, l2, None)
}

/// As [`loss_and_gradient`], with an optional per-class example weight;
/// the data term becomes the weighted mean `sum(c_y * nll) / sum(c_y)`.
pub fn loss_and_gradient_weighted<X: AsRef<[f64]>>(
    model: &SoftmaxModel,
    batch: &[(X, usize)],
    l2: f64,
    class_weights: Option<&[f64]>,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n_labels = model.n_labels();
    let mut grad = Gradient {
        weights: Matrix::zeros(n_labels, model.feature_dim()),
        bias: vec![0.0; n_labels],
    };
    let mut data_loss = 0.0;
    let mut total_weight = 0.0;
    for (x, y) in batch {
        let x = x.as_ref();
        let y = *y;
        if y >= n_labels {
            return Err(Error::Config(format!("label index {y} out of range for {n_labels} labels")));
        }
        let c = class_weights.map_or(1.0, |w| w[y]);
        let z = model.logits(x)?;
        data_loss += c * (log_sum_exp(&z) - z[y]);
        total_weight += c;
        let p = softmax(&z);
        for (k, pk) in p.iter().enumerate() {
            let residual = c * (pk - if k == y { 1.0 } else { 0.0 });
            grad.bias[k] += residual;
            for (g, xi) in grad.weights.row_mut(k).iter_mut().zip(x) {
                *g += residual * xi;
            }
        }
    }
    if total_weight <= 0.0 {
        return Err(Error::Config("batch has zero total class weight".into()));
    }
    grad.weights.as_mut_slice().iter_mut().for_each(|g| *g /= total_weight);
    grad.bias.iter_mut().for_each(|g| *g /= total_weight);

    let mut penalty = 0.0;
    if l2 > 0.0 {
        for (g, w) in grad.weights.as_mut_slice().iter_mut().zip(model.weights.as_slice()) {
            *g += l2 * w;
            penalty += w * w;
        }
    }
    Ok((data_loss / total_weight + 0.5 * l2 * penalty, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: SoftmaxModel,
    /// Full-training-set objective after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Inverse-frequency class weights `n / (k * count)`, where `k` counts the
/// classes that occur; absent classes get weight 0.
pub fn inverse_frequency_weights(labels: &[usize], n_labels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_labels];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { labels.len() as f64 / (present * c as f64) })
        .collect()
}

/// Mini-batch gradient descent from zero initialisation with a fixed
/// learning rate. With `shuffle` set, example order is re-shuffled each
/// epoch from one [`XorShift64Star`] stream seeded with `cfg.seed`.
pub fn train_softmax(
    features: &[FeatureVector],
    labels: &[usize],
    label_set: &LabelSet,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            found: labels.len(),
        });
    }
    let n_labels = label_set.len();
    if let Some(y) = labels.iter().find(|&&y| y >= n_labels) {
        return Err(Error::Config(format!("label index {y} out of range for {n_labels} labels")));
    }
    let dim = features[0].dim();
    let mut present = vec![false; n_labels];
    labels.iter().for_each(|&y| present[y] = true);
    for (i, p) in present.iter().enumerate() {
        if !p {
            log::warn!("label {:?} has no training examples", label_set.name(i).unwrap_or("?"));
        }
    }

    let class_weights = cfg
        .class_weighting
        .then(|| inverse_frequency_weights(labels, n_labels));
    let examples: Vec<(&[f64], usize)> = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| (&x[..], y))
        .collect();

    let mut model = SoftmaxModel::zeros(label_set.clone(), dim);
    let mut rng = XorShift64Star::new(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i]));
            let (_, grad) =
                loss_and_gradient_weighted(&model, &batch, cfg.l2, class_weights.as_deref())?;
            let lr = cfg.learning_rate;
            for (w, g) in model.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
                *w -= lr * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
        }
        let (loss, _) =
            loss_and_gradient_weighted(&model, &examples, cfg.l2, class_weights.as_deref())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss (learning rate too large?)".into()));
        }
        loss_trace.push(loss);
    }
    Ok(TrainedModel { model, loss_trace })
}

/// Per-utterance class probabilities from one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub model_name: String,
    pub label_set: LabelSet,
    pub rows: BTreeMap<String, ProbabilityDistribution>,
    pub timing_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub model_name: String,
    #[serde(default)]
    pub timing_seconds: Option<f64>,
}

/// Sidecar path for a prediction CSV: `name.csv` becomes `name.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

impl PredictionTable {
    pub fn new(model_name: impl Into<String>, label_set: LabelSet) -> Self {
        Self {
            model_name: model_name.into(),
            label_set,
            rows: BTreeMap::new(),
            timing_seconds: None,
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, dist: ProbabilityDistribution) -> Result<()> {
        let id = id.into();
        if dist.len() != self.label_set.len() {
            return Err(Error::Dimension {
                expected: self.label_set.len(),
                found: dist.len(),
            });
        }
        if self.rows.contains_key(&id) {
            return Err(Error::Predictions(format!("duplicate utterance id {id:?}")));
        }
        self.rows.insert(id, dist);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.rows.keys().cloned().collect()
    }

    /// Predicted label index per id (argmax, lowest index on ties).
    pub fn predicted_labels(&self) -> BTreeMap<String, usize> {
        self.rows.iter().map(|(id, d)| (id.clone(), d.argmax())).collect()
    }

    /// Table restricted to `ids`; every id must be present.
    pub fn restrict(&self, ids: &BTreeSet<String>) -> Result<PredictionTable> {
        let missing: Vec<String> = ids.iter().filter(|id| !self.rows.contains_key(*id)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Predictions(format!(
                "table {:?} lacks rows for: {}",
                self.model_name,
                missing.join(", ")
            )));
        }
        Ok(PredictionTable {
            model_name: self.model_name.clone(),
            label_set: self.label_set.clone(),
            rows: ids.iter().map(|id| (id.clone(), self.rows[id].clone())).collect(),
            timing_seconds: self.timing_seconds,
        })
    }

    /// Writes `id,<label...>` CSV rows (sorted by id) and the sidecar JSON.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let context = || format!("predictions {}", path.display());
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(context(), e))?;
        let header = std::iter::once("id").chain(self.label_set.labels().iter().map(String::as_str));
        writer.write_record(header).map_err(|e| Error::csv(context(), e))?;
        for (id, dist) in &self.rows {
            let record = std::iter::once(id.clone()).chain(dist.probs().iter().map(|p| p.to_string()));
            writer.write_record(record).map_err(|e| Error::csv(context(), e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;

        let meta = PredictionMeta {
            model_name: self.model_name.clone(),
            timing_seconds: self.timing_seconds,
        };
        let sidecar = sidecar_path(path);
        let body = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("sidecar", e))?;
        std::fs::write(&sidecar, body + "\n").map_err(|e| Error::io(&sidecar, e))
    }
}

/// Predicts every feature vector; rows are keyed by id, so the result does
/// not depend on input order. Timing covers the whole prediction pass.
pub fn predict_table(
    model: &SoftmaxModel,
    features: &BTreeMap<String, FeatureVector>,
    name: &str,
) -> Result<PredictionTable> {
    let (rows, seconds) = measure(|| {
        features
            .par_iter()
            .map(|(id, x)| Ok((id.clone(), model.predict_proba(x)?)))
            .collect::<Result<BTreeMap<_, _>>>()
    });
    Ok(PredictionTable {
        model_name: name.to_string(),
        label_set: model.label_set().clone(),
        rows: rows?,
        timing_seconds: Some(seconds),
    })
}

/// Loads a prediction CSV produced by any model.
///
/// The header is `id` followed by every label exactly once, in any order;
/// columns are permuted into `label_set` order. Rows whose sum is within
/// [`RENORMALIZE_TOLERANCE`] of 1 are divided by their sum, others are
/// rejected. A `name.meta.json` sidecar, if present, supplies the model
/// name and timing; otherwise the file stem names the model.
pub fn load_external_predictions(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<PredictionTable> {
    let path = path.as_ref();
    let context = || format!("predictions {}", path.display());
    let fail = |msg: String| Error::Predictions(format!("{}: {msg}", path.display()));

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(context(), e))?;
    let header = reader.headers().map_err(|e| Error::csv(context(), e))?.clone();
    if header.get(0) != Some("id") {
        return Err(fail("first column must be `id`".into()));
    }
    let mut column_to_label = Vec::with_capacity(header.len() - 1);
    let mut seen = vec![false; label_set.len()];
    for name in header.iter().skip(1) {
        let idx = label_set
            .index_of(name)
            .ok_or_else(|| fail(format!("unknown label column {name:?}")))?;
        if std::mem::replace(&mut seen[idx], true) {
            return Err(fail(format!("duplicate label column {name:?}")));
        }
        column_to_label.push(idx);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(fail(format!(
            "missing label column {:?}",
            label_set.name(missing).unwrap_or_default()
        )));
    }

    let meta_path = sidecar_path(path);
    let meta: Option<PredictionMeta> = if meta_path.is_file() {
        let raw = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&raw).map_err(|e| Error::json(format!("sidecar {}", meta_path.display()), e))?)
    } else {
        None
    };
    let model_name = meta.as_ref().map(|m| m.model_name.clone()).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });

    let mut table = PredictionTable::new(model_name, label_set.clone());
    table.timing_seconds = meta.and_then(|m| m.timing_seconds);
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(context(), e))?;
        let id = record.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(fail("row with empty id".into()));
        }
        let mut probs = vec![0.0; label_set.len()];
        for (col, &label) in column_to_label.iter().enumerate() {
            let cell = record.get(col + 1).unwrap_or_default();
            let value: f64 = cell
                .parse()
                .map_err(|_| fail(format!("row {id:?}: cannot parse probability {cell:?}")))?;
            if !value.is_finite() || value < 0.0 {
                return Err(fail(format!("row {id:?}: invalid probability {value}")));
            }
            probs[label] = value;
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(fail(format!("row {id:?}: probabilities sum to {sum}")));
        }
        let dist = ProbabilityDistribution::normalized(probs)?;
        if table.rows.contains_key(&id) {
            return Err(fail(format!("duplicate utterance id {id:?}")));
        }
        table.insert(id, dist)?;
    }
    Ok(table)
}

/// Plain iteration helper shared by fusion: borrowed rows for one id.
pub(crate) fn rows_for<'a, T: Borrow<PredictionTable>>(tables: &'a [T], id: &str) -> Vec<&'a ProbabilityDistribution> {
    tables.iter().map(|t| &t.borrow().rows[id]).collect()
}
