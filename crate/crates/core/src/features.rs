//! Fixed-length feature vectors and the on-disk feature cache.

use std::collections::BTreeMap;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

pub const FEATURE_CACHE_MAGIC: &str = "erc-fuse-features/1";

/// Per-utterance feature records for one modality.
///
/// JSON layout: `{"magic": "erc-fuse-features/1", "kind": "audio",
/// "config_hash": "<hex>", "dim": 26, "records": [{"id": "u1", "values":
/// [...]}, ...]}` with records sorted by id. A cache is reusable only when
/// both the magic string and `config_hash` match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    pub magic: String,
    pub kind: String,
    pub config_hash: String,
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub values: FeatureVector,
}

impl FeatureCache {
    pub fn new(kind: &str, config_hash: &str, features: &BTreeMap<String, FeatureVector>) -> Self {
        Self {
            magic: FEATURE_CACHE_MAGIC.to_string(),
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            dim: features.values().next().map_or(0, FeatureVector::dim),
            records: features
                .iter()
                .map(|(id, v)| FeatureRecord {
                    id: id.clone(),
                    values: v.clone(),
                })
                .collect(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, FeatureVector> {
        self.records
            .iter()
            .map(|r| (r.id.clone(), r.values.clone()))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(self).map_err(|e| Error::json("feature cache", e))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: FeatureCache = serde_json::from_str(&raw)
            .map_err(|e| Error::json(format!("feature cache {}", path.display()), e))?;
        if cache.magic != FEATURE_CACHE_MAGIC {
            return Err(Error::SchemaVersion {
                expected: FEATURE_CACHE_MAGIC.into(),
                found: cache.magic,
            });
        }
        Ok(cache)
    }

    /// Reads `path` if it exists with matching magic, kind and hash.
    pub fn read_matching(path: impl AsRef<Path>, kind: &str, config_hash: &str) -> Option<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return None;
        }
        Self::read(path)
            .ok()
            .filter(|c| c.kind == kind && c.config_hash == config_hash)
    }
}

/// Per-dimension z-scoring fitted on training features. Dimensions with
/// zero spread are centred but not scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a FeatureVector>) -> Result<Self> {
        let rows: Vec<&FeatureVector> = features.into_iter().collect();
        let first = rows
            .first()
            .ok_or_else(|| Error::Config("cannot fit a standardizer on no rows".into()))?;
        let dim = first.dim();
        if let Some(r) = rows.iter().find(|r| r.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: r.dim(),
            });
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / n)
            .collect();
        let scale = (0..dim)
            .map(|d| {
                let var = rows.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, x: &FeatureVector) -> Result<FeatureVector> {
        if x.dim() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                found: x.dim(),
            });
        }
        Ok(FeatureVector::new(
            x.iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
        ))
    }
}
