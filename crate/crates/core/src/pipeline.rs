//! Batch runner: ingest, split, featurize, train, predict, fuse, evaluate.
//!
//! Every stage reads its inputs from and writes its outputs to the run's
//! output directory, so stages can be re-run independently:
//!
//! ```text
//! out/
//!   split.json                      train/test assignment
//!   holdout.json                    fit/holdout slice of train (weight search only)
//!   vocabulary.json
//!   features/text.json              TF-IDF vectors
//!   features/audio_raw.json         pooled MFCC cache (keyed by audio config hash)
//!   features/audio_scaler.json
//!   features/audio.json             standardized audio vectors
//!   models/<m>.json, models/<m>.trace.json
//!   predictions/<m>.csv (+ .meta.json)
//!   predictions/ensemble.csv (+ .meta.json)
//!   fusion.json
//!   reports/<m>.json, reports/<m>.confusion.csv
//!   run.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_dsp::{self, FrameConfig, MfccExtractor, TARGET_SAMPLE_RATE};
use crate::classifiers::{
    load_external_predictions, predict_table, train_softmax, PredictionTable, SoftmaxModel,
    TrainConfig,
};
use crate::corpus::{
    label_histogram, load_manifest, stratified_split, validate_alignment, AlignmentIssueKind,
    AlignmentReport, Corpus, LabelSet, SplitAssignment,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_to_reference, evaluate, measure, write_report, EvaluationReport, ReferenceBaselines,
};
use crate::features::{FeatureCache, FeatureVector, Standardizer};
use crate::fusion::{fuse_tables, search_weights, FusionSpec, WeightSearch};
use crate::text_features::{build_vocabulary, tfidf_vector, tokenize};

pub const TEXT_MEMBER: &str = "text";
pub const AUDIO_MEMBER: &str = "audio";
pub const ENSEMBLE_NAME: &str = "ensemble";
pub const EQUAL_ENSEMBLE_NAME: &str = "ensemble-equal";
/// Training fraction kept for fitting when a slice of train is held out
/// for weight search.
pub const HOLDOUT_FIT_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Training fraction.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratio: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub min_df: usize,
    pub max_terms: usize,
    pub train: TrainConfig,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            min_df: crate::text_features::DEFAULT_MIN_DF,
            max_terms: crate::text_features::DEFAULT_MAX_TERMS,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub target_rate: u32,
    pub frame: FrameConfig,
    pub train: TrainConfig,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            target_rate: TARGET_SAMPLE_RATE,
            frame: FrameConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalPredictions {
    pub name: String,
    pub path: PathBuf,
}

/// How member tables are combined. Absent means equal-weight averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionChoice {
    WeightedAverage { weights: Vec<f64> },
    Vote,
    Search { step: f64 },
}

/// One reproducible run. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub text: Option<TextConfig>,
    #[serde(default)]
    pub audio: Option<AudioConfig>,
    #[serde(default)]
    pub external: Vec<ExternalPredictions>,
    #[serde(default)]
    pub fusion: Option<FusionChoice>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON form of `value`. Object keys serialize in
/// sorted order, so the hash is independent of field order in the source.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::json("hash", e))?;
    let s = serde_json::to_string(&v).map_err(|e| Error::json("hash", e))?;
    Ok(sha256_hex(s.as_bytes()))
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            split: SplitConfig::default(),
            text: None,
            audio: None,
            external: Vec::new(),
            fusion: None,
            output_dir: default_output_dir(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_json(raw: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(raw).map_err(|e| Error::json("run config", e))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&raw, base)
            .map_err(|e| match e {
                Error::Json { source, .. } => Error::json(format!("run config {}", path.display()), source),
                other => other,
            })
    }

    /// Applies command-line overrides. A seed override replaces the split
    /// seed and every modality's training seed.
    pub fn apply_overrides(&mut self, seed: Option<u64>, output_dir: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.split.seed = seed;
            if let Some(t) = &mut self.text {
                t.train.seed = seed;
            }
            if let Some(a) = &mut self.audio {
                a.train.seed = seed;
            }
        }
        if let Some(out) = output_dir {
            // Flag paths are relative to the working directory, not the config.
            self.output_dir = if out.is_absolute() {
                out
            } else {
                std::env::current_dir().map(|d| d.join(&out)).unwrap_or(out)
            };
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, base: impl Into<PathBuf>) {
        self.base_dir = base.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Hash of the canonical config JSON, excluding the output directory.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::json("run config", e))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        canonical_hash(&v)
    }

    /// Names of the fusion members in order: trained modalities, then
    /// external tables as listed.
    pub fn members(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.text.is_some() {
            names.push(TEXT_MEMBER.to_string());
        }
        if self.audio.is_some() {
            names.push(AUDIO_MEMBER.to_string());
        }
        names.extend(self.external.iter().map(|e| e.name.clone()));
        names
    }

    pub fn uses_holdout(&self) -> bool {
        matches!(self.fusion, Some(FusionChoice::Search { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let manifest = self.resolve(&self.manifest);
        if !manifest.is_file() {
            return fail(format!("manifest {} does not exist", manifest.display()));
        }
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return fail(format!("split ratio must lie in (0, 1), got {}", self.split.ratio));
        }
        if let Some(text) = &self.text {
            text.train.validate()?;
            if text.min_df == 0 || text.max_terms == 0 {
                return fail("text min_df and max_terms must be at least 1".into());
            }
        }
        if let Some(audio) = &self.audio {
            audio.train.validate()?;
            audio.frame.validate(audio.target_rate)?;
        }
        for ext in &self.external {
            let p = self.resolve(&ext.path);
            if !p.is_file() {
                return fail(format!("prediction file {} for {:?} does not exist", p.display(), ext.name));
            }
        }
        let members = self.members();
        let distinct: BTreeSet<&String> = members.iter().collect();
        if distinct.len() != members.len() {
            return fail(format!("member names are not distinct: {}", members.join(", ")));
        }
        if members.is_empty() {
            return fail("nothing to evaluate: enable text or audio, or list external predictions".into());
        }
        match &self.fusion {
            Some(FusionChoice::Search { step }) => {
                if members.len() < 2 {
                    return fail(format!(
                        "fusion search requires at least 2 members, found {}",
                        members.len()
                    ));
                }
                crate::fusion::grid_divisions(*step)?;
            }
            Some(FusionChoice::WeightedAverage { weights }) => {
                crate::fusion::validate_weights(weights, members.len())?;
            }
            Some(FusionChoice::Vote) if members.len() < 2 => {
                return fail("vote fusion requires at least 2 members".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// Where each artifact of a run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn holdout(&self) -> PathBuf {
        self.root.join("holdout.json")
    }

    pub fn vocabulary(&self) -> PathBuf {
        self.root.join("vocabulary.json")
    }

    pub fn features(&self, kind: &str) -> PathBuf {
        self.root.join("features").join(format!("{kind}.json"))
    }

    pub fn audio_cache(&self) -> PathBuf {
        self.root.join("features").join("audio_raw.json")
    }

    pub fn audio_scaler(&self) -> PathBuf {
        self.root.join("features").join("audio_scaler.json")
    }

    pub fn model(&self, member: &str) -> PathBuf {
        self.root.join("models").join(format!("{}.json", sanitize(member)))
    }

    pub fn trace(&self, member: &str) -> PathBuf {
        self.root.join("models").join(format!("{}.trace.json", sanitize(member)))
    }

    pub fn predictions(&self, member: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{}.csv", sanitize(member)))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", sanitize(name)))
    }

    pub fn confusion(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}.confusion.csv", sanitize(name)))
    }

    pub fn fusion(&self) -> PathBuf {
        self.root.join("fusion.json")
    }

    pub fn run_record(&self) -> PathBuf {
        self.root.join("run.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub alignment: AlignmentReport,
    pub histogram: BTreeMap<String, usize>,
    pub unlabeled: usize,
    /// Human-readable fatal problems; empty when the corpus is usable.
    pub fatal: Vec<String>,
}

impl ValidationSummary {
    pub fn is_ok(&self) -> bool {
        self.fatal.is_empty()
    }

    pub fn render(&self) -> String {
        let a = &self.alignment;
        let mut out = format!(
            "utterances        {}\nfully_aligned     {}\ntext_only         {}\naudio_missing     {}\nunsupported_audio {}\nempty_text        {}\nunlabeled         {}\nlabel histogram:\n",
            a.total, a.fully_aligned, a.text_only, a.audio_missing_file, a.unsupported_audio, a.empty_text, self.unlabeled
        );
        for (label, count) in &self.histogram {
            out.push_str(&format!("  {label:<12} {count}\n"));
        }
        for issue in &a.issues {
            out.push_str(&format!("issue {} {:?}\n", issue.utterance_id, issue.kind));
        }
        for f in &self.fatal {
            out.push_str(&format!("FATAL {f}\n"));
        }
        out
    }
}

/// Alignment and label summary. Missing or unsupported audio files and
/// empty text are always fatal; an absent audio reference is fatal only
/// when `audio_required`.
pub fn validate_corpus(corpus: &Corpus, audio_required: bool) -> ValidationSummary {
    let alignment = validate_alignment(corpus);
    let fatal = alignment
        .issues
        .iter()
        .filter(|i| audio_required || i.kind != AlignmentIssueKind::AudioAbsent)
        .map(|i| format!("{} {:?}", i.utterance_id, i.kind))
        .collect();
    ValidationSummary {
        histogram: label_histogram(corpus),
        unlabeled: corpus.utterances().iter().filter(|u| u.label.is_none()).count(),
        alignment,
        fatal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub member: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_examples: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub config_hash: String,
    pub seed: u64,
    pub spec: FusionSpec,
    pub search: Option<WeightSearch>,
    pub holdout_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// A configured run bound to its manifest and output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: RunConfig,
    corpus: Corpus,
    config_hash: String,
    layout: Layout,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        stage("config", config.validate())?;
        let corpus = stage("ingest", load_manifest(config.resolve(&config.manifest)))?;
        let config_hash = config.config_hash()?;
        let layout = Layout::new(config.output_path());
        std::fs::create_dir_all(layout.root()).map_err(|e| Error::io(layout.root(), e))?;
        Ok(Self {
            config,
            corpus,
            config_hash,
            layout,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn seed(&self) -> u64 {
        self.config.split.seed
    }

    pub fn validate(&self) -> ValidationSummary {
        validate_corpus(&self.corpus, self.config.audio.is_some())
    }

    /// Writes `split.json` and, for weight search, `holdout.json`.
    pub fn split(&self) -> Result<SplitAssignment> {
        stage("split", self.split_inner())
    }

    fn split_inner(&self) -> Result<SplitAssignment> {
        let split = stratified_split(&self.corpus, self.config.split.ratio, self.seed())?;
        split.write(self.layout.split())?;
        if self.config.uses_holdout() {
            let train = self.corpus.subset(&split.train_ids);
            let holdout = stratified_split(&train, HOLDOUT_FIT_RATIO, self.seed().wrapping_add(1))?;
            if holdout.test_ids.is_empty() {
                return Err(Error::Split(format!(
                    "training split ({} utterances) is too small to hold out a slice for weight search",
                    train.len()
                )));
            }
            holdout.write(self.layout.holdout())?;
        }
        Ok(split)
    }

    fn read_split(&self) -> Result<SplitAssignment> {
        SplitAssignment::read(self.layout.split())
    }

    /// Ids models are fitted on: the training split, minus the holdout
    /// slice when weights are searched.
    pub fn fit_ids(&self) -> Result<BTreeSet<String>> {
        if self.config.uses_holdout() {
            Ok(SplitAssignment::read(self.layout.holdout())?.train_ids)
        } else {
            Ok(self.read_split()?.train_ids)
        }
    }

    pub fn featurize(&self) -> Result<()> {
        stage("featurize", self.featurize_inner())
    }

    fn featurize_inner(&self) -> Result<()> {
        let fit_ids = self.fit_ids()?;
        if let Some(text) = &self.config.text {
            let tokens: BTreeMap<String, Vec<String>> = self
                .corpus
                .utterances()
                .iter()
                .map(|u| (u.utterance_id.clone(), tokenize(&u.text)))
                .collect();
            let train_docs: Vec<&Vec<String>> = fit_ids.iter().map(|id| &tokens[id]).collect();
            let vocab = build_vocabulary(&train_docs, text.min_df, text.max_terms)?;
            vocab.write(self.layout.vocabulary())?;
            let features: BTreeMap<String, FeatureVector> = tokens
                .par_iter()
                .map(|(id, t)| (id.clone(), tfidf_vector(t, &vocab)))
                .collect();
            let hash = canonical_hash(&(TEXT_MEMBER, &self.config_hash))?;
            let path = self.layout.features(TEXT_MEMBER);
            ensure_parent(&path)?;
            FeatureCache::new(TEXT_MEMBER, &hash, &features).write(path)?;
        }
        if let Some(audio) = &self.config.audio {
            let raw = self.audio_features(audio)?;
            let scaler = Standardizer::fit(fit_ids.iter().map(|id| &raw[id]))?;
            write_json(&self.layout.audio_scaler(), &scaler)?;
            let standardized = raw
                .iter()
                .map(|(id, v)| Ok((id.clone(), scaler.transform(v)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let hash = canonical_hash(&(AUDIO_MEMBER, &self.config_hash))?;
            FeatureCache::new(AUDIO_MEMBER, &hash, &standardized).write(self.layout.features(AUDIO_MEMBER))?;
        }
        Ok(())
    }

    /// Pooled MFCC vectors for every utterance, reusing cached records whose
    /// audio config hash matches.
    fn audio_features(&self, audio: &AudioConfig) -> Result<BTreeMap<String, FeatureVector>> {
        let hash = canonical_hash(&(&audio.target_rate, &audio.frame))?;
        let cache_path = self.layout.audio_cache();
        ensure_parent(&cache_path)?;
        let cached = FeatureCache::read_matching(&cache_path, "audio_raw", &hash)
            .map(|c| c.to_map())
            .unwrap_or_default();

        let missing_audio: Vec<&str> = self
            .corpus
            .utterances()
            .iter()
            .filter(|u| u.audio_path.is_none())
            .map(|u| u.utterance_id.as_str())
            .collect();
        if !missing_audio.is_empty() {
            return Err(Error::Config(format!(
                "audio modality enabled but utterances have no audio: {}",
                missing_audio.join(", ")
            )));
        }

        let extractor = MfccExtractor::new(&audio.frame, audio.target_rate)?;
        let computed: Vec<(String, FeatureVector)> = self
            .corpus
            .utterances()
            .par_iter()
            .filter(|u| !cached.contains_key(&u.utterance_id))
            .map(|u| {
                let path = self.corpus.audio_file(u).expect("checked above");
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let v = audio_dsp::utterance_features(&bytes, &extractor, audio.target_rate)
                    .map_err(|e| Error::Wav(format!("{}: {e}", u.utterance_id)))?;
                Ok((u.utterance_id.clone(), v))
            })
            .collect::<Result<_>>()?;

        let fresh = computed.len();
        let mut all = cached;
        all.extend(computed);
        all.retain(|id, _| self.corpus.get(id).is_some());
        if fresh > 0 {
            FeatureCache::new("audio_raw", &hash, &all).write(&cache_path)?;
        }
        log::info!("audio features: {fresh} extracted, {} from cache", all.len() - fresh);
        Ok(all)
    }

    fn trained_members(&self) -> Vec<(&'static str, &TrainConfig)> {
        let mut out = Vec::new();
        if let Some(t) = &self.config.text {
            out.push((TEXT_MEMBER, &t.train));
        }
        if let Some(a) = &self.config.audio {
            out.push((AUDIO_MEMBER, &a.train));
        }
        out
    }

    fn load_features(&self, member: &str) -> Result<BTreeMap<String, FeatureVector>> {
        Ok(FeatureCache::read(self.layout.features(member))?.to_map())
    }

    pub fn train(&self) -> Result<()> {
        stage("train", self.train_inner())
    }

    fn train_inner(&self) -> Result<()> {
        let fit_ids = self.fit_ids()?;
        let gold = self.corpus.gold();
        for (member, cfg) in self.trained_members() {
            let features = self.load_features(member)?;
            let mut xs = Vec::with_capacity(fit_ids.len());
            let mut ys = Vec::with_capacity(fit_ids.len());
            for id in &fit_ids {
                let x = features
                    .get(id)
                    .ok_or_else(|| Error::Config(format!("no {member} features for {id:?}")))?;
                xs.push(x.clone());
                ys.push(gold[id]);
            }
            let trained = train_softmax(&xs, &ys, self.corpus.label_set(), cfg)?;
            let model_path = self.layout.model(member);
            ensure_parent(&model_path)?;
            trained.model.write(&model_path, &self.config_hash)?;
            write_json(
                &self.layout.trace(member),
                &TrainingTrace {
                    member: member.to_string(),
                    config_hash: self.config_hash.clone(),
                    seed: cfg.seed,
                    n_examples: xs.len(),
                    loss_trace: trained.loss_trace,
                },
            )?;
        }
        Ok(())
    }

    pub fn predict(&self) -> Result<()> {
        stage("predict", self.predict_inner())
    }

    fn predict_inner(&self) -> Result<()> {
        for (member, _) in self.trained_members() {
            let (model, _) = SoftmaxModel::read(self.layout.model(member))?;
            let features = self.load_features(member)?;
            let table = predict_table(&model, &features, member)?;
            let path = self.layout.predictions(member);
            ensure_parent(&path)?;
            table.write_csv(path)?;
        }
        Ok(())
    }

    /// All member tables, in member order, with every row they carry.
    pub fn member_tables(&self) -> Result<Vec<PredictionTable>> {
        let labels = self.corpus.label_set();
        let mut tables = Vec::new();
        for (member, _) in self.trained_members() {
            tables.push(load_external_predictions(self.layout.predictions(member), labels)?);
        }
        for ext in &self.config.external {
            let mut t = load_external_predictions(self.config.resolve(&ext.path), labels)?;
            t.model_name = ext.name.clone();
            tables.push(t);
        }
        Ok(tables)
    }

    fn report_for(&self, table: &PredictionTable, gold: &BTreeMap<String, usize>) -> Result<EvaluationReport> {
        let mut report = evaluate(table, gold, &self.config_hash, self.seed())?;
        report.reference = Some(compare_to_reference(&report, &ReferenceBaselines::published()));
        write_report(&report, self.layout.report(&report.model_name))?;
        let csv = report.confusion.to_csv(self.corpus.label_set());
        let path = self.layout.confusion(&report.model_name);
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }

    /// Scores every member on the test split, then fuses members when
    /// there are at least two.
    pub fn evaluate(&self) -> Result<Vec<EvaluationReport>> {
        stage("evaluate", self.evaluate_inner())
    }

    fn evaluate_inner(&self) -> Result<Vec<EvaluationReport>> {
        let split = self.read_split()?;
        let gold_all = self.corpus.gold();
        let gold: BTreeMap<String, usize> = split.test_ids.iter().map(|id| (id.clone(), gold_all[id])).collect();
        std::fs::create_dir_all(self.layout.root().join("reports"))
            .map_err(|e| Error::io(self.layout.root(), e))?;

        let tables = self.member_tables()?;
        let test_tables = tables
            .iter()
            .map(|t| t.restrict(&split.test_ids))
            .collect::<Result<Vec<_>>>()?;
        let mut reports = test_tables
            .iter()
            .map(|t| self.report_for(t, &gold))
            .collect::<Result<Vec<_>>>()?;
        if test_tables.len() < 2 {
            return Ok(reports);
        }

        let members: Vec<String> = test_tables.iter().map(|t| t.model_name.clone()).collect();
        let mut search = None;
        let mut holdout_size = None;
        let spec = match &self.config.fusion {
            None => FusionSpec::equal_weights(members.clone())?,
            Some(FusionChoice::WeightedAverage { weights }) => FusionSpec::weighted(members.clone(), weights.clone())?,
            Some(FusionChoice::Vote) => FusionSpec::vote(members.clone())?,
            Some(FusionChoice::Search { step }) => {
                let holdout = SplitAssignment::read(self.layout.holdout())?.test_ids;
                let holdout_tables = tables
                    .iter()
                    .map(|t| t.restrict(&holdout))
                    .collect::<Result<Vec<_>>>()?;
                let holdout_gold = holdout.iter().map(|id| (id.clone(), gold_all[id])).collect();
                let found = search_weights(&holdout_tables, &holdout_gold, *step)?;
                holdout_size = Some(holdout.len());
                let spec = FusionSpec::weighted(members.clone(), found.weights.clone())?;
                search = Some(found);
                spec
            }
        };

        if search.is_some() {
            let equal = FusionSpec::equal_weights(members.clone())?;
            let (fused, secs) = measure(|| fuse_tables(&test_tables, &equal));
            let mut fused = fused?;
            fused.model_name = EQUAL_ENSEMBLE_NAME.into();
            fused.timing_seconds = Some(secs);
            fused.write_csv(self.layout.predictions(EQUAL_ENSEMBLE_NAME))?;
            reports.push(self.report_for(&fused, &gold)?);
        }

        let (fused, secs) = measure(|| fuse_tables(&test_tables, &spec));
        let mut fused = fused?;
        fused.model_name = ENSEMBLE_NAME.into();
        fused.timing_seconds = Some(secs);
        let path = self.layout.predictions(ENSEMBLE_NAME);
        ensure_parent(&path)?;
        fused.write_csv(path)?;
        reports.push(self.report_for(&fused, &gold)?);
        write_json(
            &self.layout.fusion(),
            &FusionRecord {
                config_hash: self.config_hash.clone(),
                seed: self.seed(),
                spec,
                search,
                holdout_size,
            },
        )?;
        Ok(reports)
    }

    /// Every stage in order; writes `run.json` listing the artifacts.
    pub fn run(&self) -> Result<(Vec<EvaluationReport>, RunRecord)> {
        let mut stage_seconds = BTreeMap::new();
        let (r, t) = measure(|| self.split());
        r?;
        stage_seconds.insert("split".to_string(), t);
        if !self.trained_members().is_empty() {
            let (r, t) = measure(|| self.featurize());
            r?;
            stage_seconds.insert("featurize".to_string(), t);
            let (r, t) = measure(|| self.train());
            r?;
            stage_seconds.insert("train".to_string(), t);
            let (r, t) = measure(|| self.predict());
            r?;
            stage_seconds.insert("predict".to_string(), t);
        }
        let (reports, t) = measure(|| self.evaluate());
        let reports = reports?;
        stage_seconds.insert("evaluate".to_string(), t);

        let record = RunRecord {
            config_hash: self.config_hash.clone(),
            seed: self.seed(),
            artifacts: list_artifacts(self.layout.root())?,
            stage_seconds,
        };
        write_json(&self.layout.run_record(), &record)?;
        Ok((reports, record))
    }
}

/// Relative paths of every file under `root`, sorted, excluding `run.json`.
pub fn list_artifacts(root: &Path) -> Result<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.retain(|p| p != "run.json");
    out.sort();
    Ok(out)
}

/// Label set named by the header of a prediction CSV (all columns after `id`).
pub fn labels_from_prediction_header(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    let header = reader.headers().map_err(|e| Error::csv(path.display().to_string(), e))?;
    LabelSet::new(header.iter().skip(1).map(|s| s.trim().to_string()))
}

/// Fuses prediction files directly (no run config). Tables are named by
/// their sidecar or file stem; the fused table is named `name`.
pub fn fuse_prediction_files(
    paths: &[PathBuf],
    label_set: &LabelSet,
    method: &crate::fusion::FusionMethod,
    name: &str,
) -> Result<PredictionTable> {
    let mut tables = paths
        .iter()
        .map(|p| load_external_predictions(p, label_set))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    for t in &mut tables {
        let base = t.model_name.clone();
        let mut candidate = base.clone();
        let mut k = 2;
        while !seen.insert(candidate.clone()) {
            candidate = format!("{base}#{k}");
            k += 1;
        }
        t.model_name = candidate;
    }
    let spec = FusionSpec {
        method: method.clone(),
        member_names: tables.iter().map(|t| t.model_name.clone()).collect(),
    };
    let (fused, secs) = measure(|| fuse_tables(&tables, &spec));
    let mut fused = fused?;
    fused.model_name = name.to_string();
    fused.timing_seconds = Some(secs);
    Ok(fused)
}

/// Scores one prediction file against the corpus gold labels, optionally
/// restricted to `ids`.
pub fn evaluate_prediction_file(
    path: impl AsRef<Path>,
    corpus: &Corpus,
    ids: Option<&BTreeSet<String>>,
    config_hash: &str,
    seed: u64,
) -> Result<EvaluationReport> {
    let mut table = load_external_predictions(path, corpus.label_set())?;
    if let Some(ids) = ids {
        table = table.restrict(ids)?;
    }
    let gold_all = corpus.gold();
    let gold = table
        .rows
        .keys()
        .map(|id| {
            gold_all
                .get(id)
                .map(|g| (id.clone(), *g))
                .ok_or_else(|| Error::Metric(format!("no gold label for {id:?}")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut report = evaluate(&table, &gold, config_hash, seed)?;
    report.reference = Some(compare_to_reference(&report, &ReferenceBaselines::published()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_hash_ignores_output_dir() {
        let a = RunConfig::from_json(r#"{"manifest": "m.json", "text": {}}"#, ".").unwrap();
        assert_eq!(a.split.ratio, 0.8);
        assert_eq!(a.text.as_ref().unwrap().min_df, 2);
        assert_eq!(a.text.as_ref().unwrap().train.learning_rate, 0.1);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.split.seed = 9;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a = RunConfig::from_json(r#"{"manifest": "m.json", "split": {"ratio": 0.7, "seed": 3}}"#, ".").unwrap();
        let b = RunConfig::from_json(r#"{"split": {"seed": 3, "ratio": 0.7}, "manifest": "m.json"}"#, ".").unwrap();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(RunConfig::from_json(r#"{"manifest": "m.json", "bogus": 1}"#, ".").is_err());
    }

    #[test]
    fn fusion_choice_json() {
        let c: FusionChoice = serde_json::from_str(r#"{"method": "search", "step": 0.05}"#).unwrap();
        assert_eq!(c, FusionChoice::Search { step: 0.05 });
        let c: FusionChoice = serde_json::from_str(r#"{"method": "vote"}"#).unwrap();
        assert_eq!(c, FusionChoice::Vote);
    }

    #[test]
    fn search_with_one_member_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.json"), r#"{"utterances": []}"#).unwrap();
        let cfg = RunConfig::from_json(
            r#"{"manifest": "m.json", "text": {}, "fusion": {"method": "search", "step": 0.1}}"#,
            dir.path(),
        )
        .unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("search requires at least 2 members"), "{err}");
    }

    #[test]
    fn sanitized_names() {
        let l = Layout::new("/o");
        assert_eq!(l.report("weighted_average(a+b)"), PathBuf::from("/o/reports/weighted_average_a_b_.json"));
    }
}
