//! Tokenization and smoothed TF-IDF vectors.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

pub const DEFAULT_MIN_DF: usize = 2;
pub const DEFAULT_MAX_TERMS: usize = 20_000;

/// Lower-cases, splits on runs of non-alphanumeric characters and returns
/// every unigram followed by every adjacent bigram (joined with a space).
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let mut tokens: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    tokens.extend(words.windows(2).map(|pair| format!("{} {}", pair[0], pair[1])));
    tokens
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    terms: Vec<String>,
    df: Vec<usize>,
    n_docs: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    terms: Vec<String>,
    df: Vec<usize>,
    n_docs: usize,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        Vocabulary::from_parts(f.terms, f.df, f.n_docs)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            terms: v.terms,
            df: v.df,
            n_docs: v.n_docs,
        }
    }
}

impl Vocabulary {
    pub fn from_parts(terms: Vec<String>, df: Vec<usize>, n_docs: usize) -> Result<Self> {
        if terms.len() != df.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} terms but {} df entries",
                terms.len(),
                df.len()
            )));
        }
        let mut index = HashMap::with_capacity(terms.len());
        for (i, (term, &d)) in terms.iter().zip(&df).enumerate() {
            if d == 0 || d > n_docs {
                return Err(Error::Config(format!(
                    "term {term:?} has df {d} outside 1..={n_docs}"
                )));
            }
            if index.insert(term.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary term {term:?}")));
            }
        }
        Ok(Self {
            terms,
            df,
            n_docs,
            index,
        })
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn df(&self, term: &str) -> Option<usize> {
        self.index.get(term).map(|&i| self.df[i])
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// Smoothed inverse document frequency of the term at `i`.
    pub fn idf(&self, i: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df[i] as f64)).ln() + 1.0
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocabulary", e))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::json(format!("vocabulary {}", path.display()), e))
    }
}

/// Builds a vocabulary from training documents. Terms with document
/// frequency below `min_df` are dropped; at most `max_terms` survive,
/// ordered by descending df then lexicographically.
pub fn build_vocabulary<D: AsRef<[String]>>(
    train_texts: &[D],
    min_df: usize,
    max_terms: usize,
) -> Result<Vocabulary> {
    if train_texts.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from no documents".into()));
    }
    if min_df == 0 {
        return Err(Error::Config("min_df must be at least 1".into()));
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in train_texts {
        let mut seen: Vec<&str> = doc.as_ref().iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for term in seen {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = df.into_iter().filter(|&(_, d)| d >= min_df).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(max_terms);
    let (terms, dfs) = kept.into_iter().map(|(t, d)| (t.to_string(), d)).unzip();
    Vocabulary::from_parts(terms, dfs, train_texts.len())
}

/// TF-IDF weights `tf * (ln((1 + n_docs) / (1 + df)) + 1)`, L2-normalised.
/// Out-of-vocabulary tokens are ignored; if none are known the zero vector
/// is returned as is.
pub fn tfidf_vector<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> FeatureVector {
    let mut values = vec![0.0; vocab.len()];
    for token in tokens {
        if let Some(i) = vocab.index_of(token.as_ref()) {
            values[i] += 1.0;
        }
    }
    for (i, v) in values.iter_mut().enumerate() {
        if *v > 0.0 {
            *v *= vocab.idf(i);
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    FeatureVector::new(values)
}
