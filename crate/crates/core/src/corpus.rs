//! Conversation corpus: label inventory, utterances, manifest loading,
//! text/audio alignment checks and stratified train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;

/// Default emotion inventory, in component order.
pub const DEFAULT_LABELS: [&str; 7] = [
    "anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral",
];

/// Ordered set of emotion labels. The order fixes the component order of
/// every probability vector, weight row and confusion matrix downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::LabelSet("label set is empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::LabelSet("empty label string".into()));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::LabelSet(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::new(DEFAULT_LABELS).expect("default labels are valid")
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSet::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

/// One conversational turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub conversation_id: String,
    pub speaker: String,
    pub text: String,
    /// Relative to the corpus root.
    pub audio_path: Option<PathBuf>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    label_set: LabelSet,
    utterances: Vec<Utterance>,
    root: PathBuf,
}

impl Corpus {
    /// Builds a corpus, checking id uniqueness and label membership.
    pub fn new(label_set: LabelSet, utterances: Vec<Utterance>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(utterances.len());
        for u in &utterances {
            if !seen.insert(u.utterance_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate utterance id {:?}",
                    u.utterance_id
                )));
            }
            if let Some(label) = &u.label {
                if !label_set.contains(label) {
                    return Err(Error::Manifest(format!(
                        "utterance {:?}: label {label:?} is not in the label set",
                        u.utterance_id
                    )));
                }
            }
        }
        Ok(Self {
            label_set,
            utterances,
            root: root.into(),
        })
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utterance_id == id)
    }

    /// Absolute (root-joined) audio path of an utterance, if it has one.
    pub fn audio_file(&self, utterance: &Utterance) -> Option<PathBuf> {
        utterance.audio_path.as_ref().map(|p| self.root.join(p))
    }

    /// Gold label indices keyed by utterance id; unlabeled utterances are skipped.
    pub fn gold(&self) -> BTreeMap<String, usize> {
        self.utterances
            .iter()
            .filter_map(|u| {
                let label = u.label.as_deref()?;
                Some((u.utterance_id.clone(), self.label_set.index_of(label)?))
            })
            .collect()
    }

    /// Sub-corpus with the given ids, keeping manifest order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Corpus {
        Corpus {
            label_set: self.label_set.clone(),
            utterances: self
                .utterances
                .iter()
                .filter(|u| ids.contains(&u.utterance_id))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    labels: Option<Vec<String>>,
    utterances: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct ManifestEntry {
    id: String,
    #[serde(default)]
    conversation_id: String,
    #[serde(default)]
    speaker: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    audio: Option<String>,
    #[serde(default)]
    label: Option<String>,
}

/// 1-based line of the `nth` (0-based) occurrence of `needle` in `raw`.
fn line_of(raw: &str, needle: &str, nth: usize) -> Option<usize> {
    let (offset, _) = raw.match_indices(needle).nth(nth)?;
    Some(raw[..offset].lines().count().max(1))
}

fn describe_line(raw: &str, needle: &str, nth: usize) -> String {
    match line_of(raw, needle, nth) {
        Some(line) => format!(" (line {line})"),
        None => String::new(),
    }
}

/// Parses manifest JSON text. Audio paths are resolved against `root`.
pub fn parse_manifest(raw: &str, root: impl Into<PathBuf>) -> Result<Corpus> {
    let file: ManifestFile = serde_json::from_str(raw).map_err(|e| Error::json("manifest", e))?;
    let label_set = match file.labels {
        Some(labels) => LabelSet::new(labels)?,
        None => LabelSet::default(),
    };

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for entry in &file.utterances {
        let needle = format!("{:?}", entry.id);
        let count = seen.entry(entry.id.as_str()).or_insert(0);
        *count += 1;
        if *count > 1 {
            return Err(Error::Manifest(format!(
                "duplicate utterance id {:?}{}",
                entry.id,
                describe_line(raw, &needle, 1)
            )));
        }
        if let Some(label) = &entry.label {
            if !label_set.contains(label) {
                return Err(Error::Manifest(format!(
                    "utterance {:?}{}: label {label:?} is not in the header label set",
                    entry.id,
                    describe_line(raw, &needle, 0)
                )));
            }
        }
    }

    let utterances = file
        .utterances
        .into_iter()
        .map(|e| Utterance {
            utterance_id: e.id,
            conversation_id: e.conversation_id,
            speaker: e.speaker,
            text: e.text,
            audio_path: e.audio.filter(|a| !a.is_empty()).map(PathBuf::from),
            label: e.label,
        })
        .collect();
    Corpus::new(label_set, utterances, root)
}

/// Loads a JSON manifest; audio paths are relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest(&raw, root).map_err(|e| match e {
        Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
        Error::Json { source, .. } => Error::json(format!("manifest {}", path.display()), source),
        other => other,
    })
}

/// Serializes a corpus back to the manifest schema.
pub fn manifest_json(corpus: &Corpus) -> serde_json::Value {
    let utterances: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| {
            serde_json::json!({
                "id": u.utterance_id,
                "conversation_id": u.conversation_id,
                "speaker": u.speaker,
                "text": u.text,
                "audio": u.audio_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
                "label": u.label,
            })
        })
        .collect();
    serde_json::json!({ "labels": corpus.label_set.labels(), "utterances": utterances })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentIssueKind {
    EmptyText,
    AudioAbsent,
    AudioFileMissing,
    UnsupportedAudioExtension,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentIssue {
    pub utterance_id: String,
    pub kind: AlignmentIssueKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub total: usize,
    /// Non-empty text without usable audio.
    pub text_only: usize,
    /// Audio reference absent or pointing at a file that does not exist.
    pub audio_missing_file: usize,
    pub unsupported_audio: usize,
    pub empty_text: usize,
    pub fully_aligned: usize,
    pub issues: Vec<AlignmentIssue>,
}

impl AlignmentReport {
    pub fn offending_ids(&self) -> BTreeSet<&str> {
        self.issues.iter().map(|i| i.utterance_id.as_str()).collect()
    }
}

fn has_wav_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Checks that every utterance is represented in both modalities.
pub fn validate_alignment(corpus: &Corpus) -> AlignmentReport {
    let mut report = AlignmentReport {
        total: corpus.len(),
        ..Default::default()
    };
    for u in corpus.utterances() {
        let has_text = !u.text.trim().is_empty();
        let audio_issue = match corpus.audio_file(u) {
            None => Some(AlignmentIssueKind::AudioAbsent),
            Some(path) if !path.is_file() => Some(AlignmentIssueKind::AudioFileMissing),
            Some(path) if !has_wav_extension(&path) => {
                Some(AlignmentIssueKind::UnsupportedAudioExtension)
            }
            Some(_) => None,
        };

        match audio_issue {
            Some(AlignmentIssueKind::UnsupportedAudioExtension) => report.unsupported_audio += 1,
            Some(_) => report.audio_missing_file += 1,
            None => {}
        }
        match (has_text, audio_issue.is_none()) {
            (true, true) => report.fully_aligned += 1,
            (true, false) => report.text_only += 1,
            (false, _) => report.empty_text += 1,
        }

        let kinds = (!has_text)
            .then_some(AlignmentIssueKind::EmptyText)
            .into_iter()
            .chain(audio_issue);
        for kind in kinds {
            report.issues.push(AlignmentIssue {
                utterance_id: u.utterance_id.clone(),
                kind,
            });
        }
    }
    report
}

/// Label counts over labeled utterances, keyed by label name.
pub fn label_histogram(corpus: &Corpus) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for label in corpus.utterances().iter().filter_map(|u| u.label.as_ref()) {
        *hist.entry(label.clone()).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
    /// Training fraction.
    pub ratio: f64,
}

impl SplitAssignment {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::json("split", e))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::json(format!("split {}", path.display()), e))
    }
}

/// Number of test items for a label with `count` members: round-half-up of
/// `count * (1 - ratio)`. The slack absorbs binary representation error so
/// exact halves such as `5 * 0.1` still round up.
pub fn test_count(count: usize, ratio: f64) -> usize {
    let exact = count as f64 * (1.0 - ratio);
    ((exact + 0.5 + 1e-9).floor() as usize).min(count)
}

/// Per-label seeded split. Labels are visited in label-set order; inside a
/// label, ids keep manifest order, are Fisher–Yates shuffled by one
/// [`XorShift64Star`] stream seeded with `seed`, and the first
/// [`test_count`] go to test.
pub fn stratified_split(corpus: &Corpus, ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let mut groups: Vec<Vec<&str>> = vec![Vec::new(); corpus.label_set().len()];
    for u in corpus.utterances() {
        let label = u.label.as_deref().ok_or_else(|| {
            Error::Split(format!("utterance {:?} has no label", u.utterance_id))
        })?;
        let idx = corpus
            .label_set()
            .index_of(label)
            .ok_or_else(|| Error::Split(format!("unknown label {label:?}")))?;
        groups[idx].push(&u.utterance_id);
    }

    let mut rng = XorShift64Star::new(seed);
    let mut split = SplitAssignment {
        train_ids: BTreeSet::new(),
        test_ids: BTreeSet::new(),
        seed,
        ratio,
    };
    for mut group in groups.into_iter().filter(|g| !g.is_empty()) {
        rng.shuffle(&mut group);
        let n_test = test_count(group.len(), ratio);
        for (i, id) in group.into_iter().enumerate() {
            let bucket = if i < n_test {
                &mut split.test_ids
            } else {
                &mut split.train_ids
            };
            bucket.insert(id.to_string());
        }
    }
    Ok(split)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn utt(id: &str, label: Option<&str>) -> Utterance {
        Utterance {
            utterance_id: id.into(),
            conversation_id: "c0".into(),
            speaker: String::new(),
            text: format!("text of {id}"),
            audio_path: None,
            label: label.map(Into::into),
        }
    }

    pub(crate) fn corpus_with(counts: &[(&str, usize)]) -> Corpus {
        let labels = LabelSet::new(counts.iter().map(|(l, _)| *l)).unwrap();
        let mut utterances = Vec::new();
        for (label, n) in counts {
            for i in 0..*n {
                utterances.push(utt(&format!("{label}-{i}"), Some(label)));
            }
        }
        Corpus::new(labels, utterances, ".").unwrap()
    }

    #[test]
    fn manifest_three_utterances() {
        let raw = r#"{"labels": ["joy", "neutral"], "utterances": [
            {"id": "u1", "conversation_id": "c1", "speaker": "A", "text": "hi", "audio": null, "label": "joy"},
            {"id": "u2", "conversation_id": "c1", "speaker": "B", "text": "ok", "audio": "a.wav", "label": "neutral"},
            {"id": "u3", "conversation_id": "c1", "speaker": "", "text": "yay", "audio": null, "label": null}
        ]}"#;
        let corpus = parse_manifest(raw, "/data").unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.label_set().len(), 2);
        let ids: Vec<_> = corpus.utterances().iter().map(|u| u.utterance_id.as_str()).collect();
        assert_eq!(ids, ["u1", "u2", "u3"]);
        assert_eq!(
            corpus.audio_file(&corpus.utterances()[1]),
            Some(PathBuf::from("/data/a.wav"))
        );
    }

    #[test]
    fn manifest_duplicate_id_is_named() {
        let raw = r#"{"labels": ["joy"], "utterances": [
            {"id": "u1", "text": "a", "label": "joy"},
            {"id": "u1", "text": "b", "label": "joy"}
        ]}"#;
        let err = parse_manifest(raw, ".").unwrap_err().to_string();
        assert!(err.contains("\"u1\""), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn manifest_unknown_label_is_named() {
        let raw = r#"{"labels": ["joy", "neutral"], "utterances": [
            {"id": "u7", "text": "a", "label": "bliss"}
        ]}"#;
        let err = parse_manifest(raw, ".").unwrap_err().to_string();
        assert!(err.contains("bliss"), "{err}");
        assert!(err.contains("u7"), "{err}");
    }

    #[test]
    fn manifest_malformed_json() {
        let err = parse_manifest("{\"labels\": [", ".").unwrap_err();
        assert!(matches!(err, Error::Json { .. }));
    }

    #[test]
    fn manifest_without_header_uses_default_labels() {
        let corpus = parse_manifest(r#"{"utterances": []}"#, ".").unwrap();
        assert_eq!(corpus.label_set(), &LabelSet::default());
        assert_eq!(corpus.label_set().len(), 7);
    }

    #[test]
    fn label_set_rejects_duplicates_and_empty() {
        assert!(LabelSet::new(Vec::<String>::new()).is_err());
        assert!(LabelSet::new(["a", "a"]).is_err());
        let set = LabelSet::new(["b", "a"]).unwrap();
        assert_eq!(set.index_of("a"), Some(1));
        assert_eq!(set.name(0), Some("b"));
    }

    #[test]
    fn alignment_all_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let mut utterances = Vec::new();
        for i in 0..3 {
            let name = format!("u{i}.wav");
            std::fs::write(dir.path().join(&name), b"RIFF").unwrap();
            let mut u = utt(&format!("u{i}"), Some("joy"));
            u.audio_path = Some(name.into());
            utterances.push(u);
        }
        let corpus = Corpus::new(LabelSet::new(["joy"]).unwrap(), utterances, dir.path()).unwrap();
        let report = validate_alignment(&corpus);
        assert_eq!(report.fully_aligned, report.total);
        assert_eq!(report.total, 3);
        assert!(report.issues.is_empty());
    }

    #[test]
    fn alignment_flags_absent_audio() {
        let dir = tempfile::tempdir().unwrap();
        let mut utterances = Vec::new();
        for i in 0..4 {
            let mut u = utt(&format!("u{i}"), Some("joy"));
            if i != 2 {
                let name = format!("u{i}.wav");
                std::fs::write(dir.path().join(&name), b"RIFF").unwrap();
                u.audio_path = Some(name.into());
            }
            utterances.push(u);
        }
        let corpus = Corpus::new(LabelSet::new(["joy"]).unwrap(), utterances, dir.path()).unwrap();
        let report = validate_alignment(&corpus);
        assert_eq!(report.audio_missing_file, 1);
        assert_eq!(report.fully_aligned, 3);
        assert_eq!(report.text_only, 1);
        assert_eq!(report.offending_ids(), BTreeSet::from(["u2"]));
    }

    #[test]
    fn alignment_missing_file_and_extension() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.mp3"), b"x").unwrap();
        let mut a = utt("a", None);
        a.audio_path = Some("nope.wav".into());
        let mut b = utt("b", None);
        b.audio_path = Some("b.mp3".into());
        let mut c = utt("c", None);
        c.text = "  ".into();
        let corpus =
            Corpus::new(LabelSet::new(["joy"]).unwrap(), vec![a, b, c], dir.path()).unwrap();
        let report = validate_alignment(&corpus);
        assert_eq!(report.audio_missing_file, 2);
        assert_eq!(report.unsupported_audio, 1);
        assert_eq!(report.empty_text, 1);
        assert_eq!(report.fully_aligned, 0);
    }

    #[test]
    fn alignment_empty_corpus() {
        let corpus = Corpus::new(LabelSet::default(), vec![], ".").unwrap();
        assert_eq!(validate_alignment(&corpus), AlignmentReport::default());
    }

    #[test]
    fn histogram_counts() {
        let corpus = Corpus::new(LabelSet::default(), vec![], ".").unwrap();
        assert!(label_histogram(&corpus).is_empty());
        let corpus = corpus_with(&[("joy", 3), ("neutral", 1)]);
        let hist = label_histogram(&corpus);
        assert_eq!(hist, BTreeMap::from([("joy".into(), 3), ("neutral".into(), 1)]));
    }

    #[test]
    fn split_exact_divisibility() {
        let corpus = corpus_with(&[("joy", 10), ("anger", 10)]);
        for seed in [0, 1, 99] {
            let split = stratified_split(&corpus, 0.8, seed).unwrap();
            let test = corpus.subset(&split.test_ids);
            assert_eq!(label_histogram(&test)["joy"], 2);
            assert_eq!(label_histogram(&test)["anger"], 2);
        }
    }

    #[test]
    fn split_rounds_small_class() {
        // round(5 * 0.2) = 1
        let corpus = corpus_with(&[("fear", 5)]);
        let split = stratified_split(&corpus, 0.8, 3).unwrap();
        assert_eq!(split.test_ids.len(), 1);
        assert_eq!(split.train_ids.len(), 4);
        // 5 * 0.1 = 0.5 rounds up
        assert_eq!(test_count(5, 0.9), 1);
        assert_eq!(test_count(3, 0.5), 2);
    }

    #[test]
    fn split_seeds_change_membership_not_counts() {
        let corpus = corpus_with(&[("joy", 12), ("anger", 7), ("fear", 5)]);
        let a = stratified_split(&corpus, 0.8, 1).unwrap();
        let b = stratified_split(&corpus, 0.8, 2).unwrap();
        assert_ne!(a.test_ids, b.test_ids);
        assert_eq!(
            label_histogram(&corpus.subset(&a.test_ids)),
            label_histogram(&corpus.subset(&b.test_ids))
        );
        assert_eq!(a, stratified_split(&corpus, 0.8, 1).unwrap());
    }

    #[test]
    fn split_histograms_add_up() {
        let corpus = corpus_with(&[("joy", 9), ("anger", 4), ("sadness", 1)]);
        let split = stratified_split(&corpus, 0.8, 5).unwrap();
        let mut sum = label_histogram(&corpus.subset(&split.train_ids));
        for (label, n) in label_histogram(&corpus.subset(&split.test_ids)) {
            *sum.entry(label).or_insert(0) += n;
        }
        assert_eq!(sum, label_histogram(&corpus));
    }

    #[test]
    fn split_rejects_unlabeled_and_bad_ratio() {
        let corpus = Corpus::new(
            LabelSet::new(["joy"]).unwrap(),
            vec![utt("a", Some("joy")), utt("b", None)],
            ".",
        )
        .unwrap();
        let err = stratified_split(&corpus, 0.8, 0).unwrap_err().to_string();
        assert!(err.contains("\"b\""), "{err}");
        let ok = corpus_with(&[("joy", 3)]);
        assert!(stratified_split(&ok, 0.0, 0).is_err());
        assert!(stratified_split(&ok, 1.0, 0).is_err());
    }

    #[test]
    fn split_ignores_labels_with_no_utterances() {
        let labels = LabelSet::new(["joy", "fear"]).unwrap();
        let corpus = Corpus::new(labels, (0..5).map(|i| utt(&i.to_string(), Some("joy"))).collect(), ".").unwrap();
        let split = stratified_split(&corpus, 0.8, 0).unwrap();
        assert_eq!(split.test_ids.len() + split.train_ids.len(), 5);
    }
}
