//! Python bindings for the `erc-fuse` library.
//!
//! Structured results (reports, alignment summaries, baselines) cross the
//! boundary as plain dicts built from their JSON form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use erc::audio_dsp::{self, FrameConfig, Waveform};
use erc::classifiers::{self, TrainConfig};
use erc::corpus;
use erc::evaluation;
use erc::fusion;
use erc::pipeline;
use erc::synthetic;
use erc::text_features;
use erc::Error;

pyo3::create_exception!(erc_fuse, ErcFuseError, pyo3::exceptions::PyException);

fn err(e: Error) -> PyErr {
    ErcFuseError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: for<'de> serde::Deserialize<'de>>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "LabelSet", frozen, from_py_object)]
#[derive(Clone)]
struct PyLabelSet(corpus::LabelSet);

#[pymethods]
impl PyLabelSet {
    #[new]
    #[pyo3(signature = (labels=None))]
    fn new(labels: Option<Vec<String>>) -> PyResult<Self> {
        match labels {
            Some(l) => corpus::LabelSet::new(l).map(Self).map_err(err),
            None => Ok(Self(corpus::LabelSet::default())),
        }
    }

    fn labels(&self) -> Vec<String> {
        self.0.labels().to_vec()
    }

    fn index_of(&self, label: &str) -> Option<usize> {
        self.0.index_of(label)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("LabelSet({:?})", self.0.labels())
    }
}

#[pyclass(name = "ProbabilityDistribution", frozen, from_py_object)]
#[derive(Clone)]
struct PyDistribution(classifiers::ProbabilityDistribution);

#[pymethods]
impl PyDistribution {
    #[new]
    fn new(probs: Vec<f64>) -> PyResult<Self> {
        classifiers::ProbabilityDistribution::new(probs).map(Self).map_err(err)
    }

    #[staticmethod]
    fn normalized(weights: Vec<f64>) -> PyResult<Self> {
        classifiers::ProbabilityDistribution::normalized(weights).map(Self).map_err(err)
    }

    fn probs(&self) -> Vec<f64> {
        self.0.probs().to_vec()
    }

    fn argmax(&self) -> usize {
        self.0.argmax()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("ProbabilityDistribution({:?})", self.0.probs())
    }
}

#[pyclass(name = "Corpus", frozen)]
struct PyCorpus(corpus::Corpus);

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        corpus::load_manifest(path).map(Self).map_err(err)
    }

    #[getter]
    fn label_set(&self) -> PyLabelSet {
        PyLabelSet(self.0.label_set().clone())
    }

    fn ids(&self) -> Vec<String> {
        self.0.utterances().iter().map(|u| u.utterance_id.clone()).collect()
    }

    fn utterance(&self, py: Python<'_>, id: &str) -> PyResult<Option<Py<PyAny>>> {
        self.0.get(id).map(|u| to_py(py, u)).transpose()
    }

    /// Gold label index per labeled utterance.
    fn gold(&self) -> BTreeMap<String, usize> {
        self.0.gold()
    }

    fn validate_alignment(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &corpus::validate_alignment(&self.0))
    }

    fn label_histogram(&self) -> BTreeMap<String, usize> {
        corpus::label_histogram(&self.0)
    }

    /// Returns `(train_ids, test_ids)`.
    fn stratified_split(&self, ratio: f64, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
        let s = corpus::stratified_split(&self.0, ratio, seed).map_err(err)?;
        Ok((s.train_ids.into_iter().collect(), s.test_ids.into_iter().collect()))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "SoftmaxModel", frozen)]
struct PySoftmaxModel(classifiers::SoftmaxModel);

#[pymethods]
impl PySoftmaxModel {
    /// Trains on rows of `features` with label indices `labels`. `config`
    /// is a dict of training options; missing keys take their defaults.
    #[staticmethod]
    #[pyo3(signature = (features, labels, label_set, config=None))]
    fn train(
        py: Python<'_>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        label_set: &PyLabelSet,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<(Self, Vec<f64>)> {
        let cfg: TrainConfig = match config {
            Some(c) => from_py(py, c)?,
            None => TrainConfig::default(),
        };
        let xs: Vec<_> = features.into_iter().map(erc::FeatureVector::new).collect();
        let trained = py
            .detach(|| classifiers::train_softmax(&xs, &labels, &label_set.0, &cfg))
            .map_err(err)?;
        Ok((Self(trained.model), trained.loss_trace))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        classifiers::SoftmaxModel::read(path).map(|(m, _)| Self(m)).map_err(err)
    }

    #[pyo3(signature = (path, config_hash=""))]
    fn save(&self, path: PathBuf, config_hash: &str) -> PyResult<()> {
        self.0.write(path, config_hash).map_err(err)
    }

    fn predict_proba(&self, x: Vec<f64>) -> PyResult<PyDistribution> {
        self.0.predict_proba(&x).map(PyDistribution).map_err(err)
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    #[getter]
    fn label_set(&self) -> PyLabelSet {
        PyLabelSet(self.0.label_set().clone())
    }
}

#[pyclass(name = "PredictionTable", frozen)]
struct PyPredictionTable(classifiers::PredictionTable);

#[pymethods]
impl PyPredictionTable {
    #[staticmethod]
    fn load(path: PathBuf, label_set: &PyLabelSet) -> PyResult<Self> {
        classifiers::load_external_predictions(path, &label_set.0)
            .map(Self)
            .map_err(err)
    }

    #[new]
    fn new(model_name: String, label_set: &PyLabelSet, rows: BTreeMap<String, Vec<f64>>) -> PyResult<Self> {
        let mut t = classifiers::PredictionTable::new(model_name, label_set.0.clone());
        for (id, probs) in rows {
            let d = classifiers::ProbabilityDistribution::new(probs).map_err(err)?;
            t.insert(id, d).map_err(err)?;
        }
        Ok(Self(t))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_csv(path).map_err(err)
    }

    #[getter]
    fn model_name(&self) -> String {
        self.0.model_name.clone()
    }

    fn rows(&self) -> BTreeMap<String, Vec<f64>> {
        self.0
            .rows
            .iter()
            .map(|(id, d)| (id.clone(), d.probs().to_vec()))
            .collect()
    }

    fn predicted_labels(&self) -> BTreeMap<String, usize> {
        self.0.predicted_labels()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text_features::tokenize(text)
}

/// TF-IDF vectors for `texts`, with the vocabulary fitted on `fit_texts`.
#[pyfunction]
#[pyo3(signature = (fit_texts, texts, min_df=text_features::DEFAULT_MIN_DF, max_terms=text_features::DEFAULT_MAX_TERMS))]
fn tfidf(fit_texts: Vec<String>, texts: Vec<String>, min_df: usize, max_terms: usize) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let docs: Vec<Vec<String>> = fit_texts.iter().map(|t| text_features::tokenize(t)).collect();
    let vocab = text_features::build_vocabulary(&docs, min_df, max_terms).map_err(err)?;
    let vectors = texts
        .iter()
        .map(|t| text_features::tfidf_vector(&text_features::tokenize(t), &vocab).into_inner())
        .collect();
    Ok((vocab.terms().to_vec(), vectors))
}

/// Returns `(samples, sample_rate)` with channels averaged.
#[pyfunction]
fn decode_wav(data: &[u8]) -> PyResult<(Vec<f64>, u32)> {
    let w = audio_dsp::decode_wav(data).map_err(err)?;
    Ok((w.samples().to_vec(), w.sample_rate()))
}

#[pyfunction]
fn encode_wav<'py>(py: Python<'py>, samples: Vec<f64>, sample_rate: u32) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = audio_dsp::encode_wav_pcm16(&samples, sample_rate).map_err(err)?;
    Ok(PyBytes::new(py, &bytes))
}

#[pyfunction]
fn resample(samples: Vec<f64>, sample_rate: u32, target_rate: u32) -> PyResult<Vec<f64>> {
    let w = Waveform::new(samples, sample_rate).map_err(err)?;
    Ok(audio_dsp::resample(&w, target_rate).map_err(err)?.samples().to_vec())
}

/// MFCC matrix (frames x coefficients). `config` overrides frame options.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, config=None))]
fn mfcc(py: Python<'_>, samples: Vec<f64>, sample_rate: u32, config: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<Vec<f64>>> {
    let cfg: FrameConfig = match config {
        Some(c) => from_py(py, c)?,
        None => FrameConfig::default(),
    };
    let w = Waveform::new(samples, sample_rate).map_err(err)?;
    let m = audio_dsp::mfcc(&w, &cfg).map_err(err)?;
    Ok(m.iter_rows().map(|r| r.to_vec()).collect())
}

/// Pooled MFCC statistics (means then standard deviations) for a WAV file's bytes.
#[pyfunction]
#[pyo3(signature = (data, target_rate=audio_dsp::TARGET_SAMPLE_RATE))]
fn audio_features(data: &[u8], target_rate: u32) -> PyResult<Vec<f64>> {
    let extractor = audio_dsp::MfccExtractor::new(&FrameConfig::default(), target_rate).map_err(err)?;
    Ok(audio_dsp::utterance_features(data, &extractor, target_rate)
        .map_err(err)?
        .into_inner())
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    classifiers::softmax(&logits)
}

#[pyfunction]
fn weighted_average(dists: Vec<PyDistribution>, weights: Vec<f64>) -> PyResult<PyDistribution> {
    let d: Vec<_> = dists.into_iter().map(|d| d.0).collect();
    fusion::weighted_average(&d, &weights).map(PyDistribution).map_err(err)
}

#[pyfunction]
fn plurality_vote(dists: Vec<PyDistribution>) -> PyResult<usize> {
    let d: Vec<_> = dists.into_iter().map(|d| d.0).collect();
    fusion::plurality_vote(&d).map_err(err)
}

/// Fuses tables. `method` is "weighted_average" (equal weights unless
/// given) or "vote".
#[pyfunction]
#[pyo3(signature = (tables, method="weighted_average", weights=None, name="ensemble"))]
fn fuse_tables(
    tables: Vec<Bound<'_, PyPredictionTable>>,
    method: &str,
    weights: Option<Vec<f64>>,
    name: &str,
) -> PyResult<PyPredictionTable> {
    let tables: Vec<_> = tables.iter().map(|t| t.get().0.clone()).collect();
    let members: Vec<String> = tables.iter().map(|t| t.model_name.clone()).collect();
    let spec = match (method, weights) {
        ("vote", None) => fusion::FusionSpec::vote(members),
        ("weighted_average", Some(w)) => fusion::FusionSpec::weighted(members, w),
        ("weighted_average", None) => fusion::FusionSpec::equal_weights(members),
        _ => return Err(PyValueError::new_err(format!("unsupported fusion {method:?} with these weights"))),
    }
    .map_err(err)?;
    let mut fused = fusion::fuse_tables(&tables, &spec).map_err(err)?;
    fused.model_name = name.to_string();
    Ok(PyPredictionTable(fused))
}

#[pyfunction]
fn simplex_grid(members: usize, divisions: usize) -> Vec<Vec<f64>> {
    fusion::simplex_grid(members, divisions)
}

/// Returns `(weights, holdout_accuracy)`.
#[pyfunction]
fn search_weights(
    tables: Vec<Bound<'_, PyPredictionTable>>,
    gold: BTreeMap<String, usize>,
    step: f64,
) -> PyResult<(Vec<f64>, f64)> {
    let tables: Vec<_> = tables.iter().map(|t| t.get().0.clone()).collect();
    let found = fusion::search_weights(&tables, &gold, step).map_err(err)?;
    Ok((found.weights, found.accuracy))
}

#[pyfunction]
fn accuracy(pred: BTreeMap<String, usize>, gold: BTreeMap<String, usize>) -> PyResult<f64> {
    evaluation::accuracy(&pred, &gold).map_err(err)
}

#[pyfunction]
fn macro_f1(pred: BTreeMap<String, usize>, gold: BTreeMap<String, usize>, n_labels: usize) -> PyResult<f64> {
    evaluation::macro_f1(&pred, &gold, n_labels).map_err(err)
}

#[pyfunction]
fn confusion_matrix(pred: BTreeMap<String, usize>, gold: BTreeMap<String, usize>, n_labels: usize) -> PyResult<Vec<Vec<u64>>> {
    Ok(evaluation::confusion_matrix(&pred, &gold, n_labels)
        .map_err(err)?
        .counts()
        .to_vec())
}

/// Full evaluation report for `table` against `gold`, as a dict.
#[pyfunction]
#[pyo3(signature = (table, gold, config_hash="", seed=0))]
fn evaluate(py: Python<'_>, table: &PyPredictionTable, gold: BTreeMap<String, usize>, config_hash: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let mut report = evaluation::evaluate(&table.0, &gold, config_hash, seed).map_err(err)?;
    report.reference = Some(evaluation::compare_to_reference(
        &report,
        &evaluation::ReferenceBaselines::published(),
    ));
    to_py(py, &report)
}

#[pyfunction]
fn reference_baselines(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &evaluation::ReferenceBaselines::published().entries())
}

#[pyfunction]
fn read_report(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    to_py(py, &evaluation::read_report(path).map_err(err)?)
}

/// Runs every stage for the config file; returns the report dicts.
#[pyfunction]
#[pyo3(signature = (config_path, seed=None, output_dir=None))]
fn run_pipeline(py: Python<'_>, config_path: PathBuf, seed: Option<u64>, output_dir: Option<PathBuf>) -> PyResult<Vec<Py<PyAny>>> {
    let mut cfg = pipeline::RunConfig::load(&config_path).map_err(err)?;
    cfg.apply_overrides(seed, output_dir);
    let reports = py
        .detach(|| pipeline::Pipeline::new(cfg).and_then(|p| p.run()))
        .map_err(err)?
        .0;
    reports.iter().map(|r| to_py(py, r)).collect()
}

/// Writes the synthetic two-modality corpus; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (directory, per_class=40, seed=2024))]
fn write_synthetic_corpus(directory: PathBuf, per_class: usize, seed: u64) -> PyResult<PathBuf> {
    let spec = synthetic::SyntheticSpec {
        per_class,
        seed,
        ..Default::default()
    };
    synthetic::write_synthetic_corpus(directory, &spec).map_err(err)
}

/// Ids in a split file: `(train_ids, test_ids)`.
#[pyfunction]
fn read_split(path: PathBuf) -> PyResult<(BTreeSet<String>, BTreeSet<String>)> {
    let s = corpus::SplitAssignment::read(path).map_err(err)?;
    Ok((s.train_ids, s.test_ids))
}

#[pymodule]
#[pyo3(name = "erc_fuse")]
fn erc_fuse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ErcFuseError", m.py().get_type::<ErcFuseError>())?;
    m.add("DEFAULT_LABELS", corpus::DEFAULT_LABELS.to_vec())?;
    m.add("REPORT_SCHEMA", evaluation::REPORT_SCHEMA)?;
    m.add_class::<PyLabelSet>()?;
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PySoftmaxModel>()?;
    m.add_class::<PyPredictionTable>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(tfidf, m)?)?;
    m.add_function(wrap_pyfunction!(decode_wav, m)?)?;
    m.add_function(wrap_pyfunction!(encode_wav, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(audio_features, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
    m.add_function(wrap_pyfunction!(plurality_vote, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_tables, m)?)?;
    m.add_function(wrap_pyfunction!(simplex_grid, m)?)?;
    m.add_function(wrap_pyfunction!(search_weights, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(reference_baselines, m)?)?;
    m.add_function(wrap_pyfunction!(read_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(read_split, m)?)?;
    Ok(())
}
