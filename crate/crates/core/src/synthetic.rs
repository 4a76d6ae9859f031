//! Synthetic two-modality corpus with complementary cues.
//!
//! Four labels `A B C D` (named joy, anger, sadness, neutral). Text comes
//! from a few sentence templates shared by {A, B} and a disjoint set shared
//! by {C, D}, so text alone cannot tell A from B. Audio is one of a few low
//! tones shared by {A, C} or high tones shared by {B, D}, so audio alone
//! cannot tell A from C. Together the two cues identify every class.
//!
//! Sharing templates inside a group (rather than drawing fresh words or
//! pitches per utterance) leaves nothing for a classifier to memorize
//! within a group, which keeps its within-group probabilities near 1/2.

use std::path::{Path, PathBuf};

use crate::audio_dsp::encode_wav_pcm16;
use crate::error::{Error, Result};
use crate::rng::XorShift64Star;

pub const SYNTHETIC_LABELS: [&str; 4] = ["joy", "anger", "sadness", "neutral"];

const POOL_AB: [&str; 8] = ["wow", "really", "oh", "yes", "what", "hey", "no", "great"];
const POOL_CD: [&str; 8] = ["hmm", "well", "okay", "sure", "fine", "maybe", "right", "so"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub sample_rate: u32,
    pub duration_seconds: f64,
    pub words_per_utterance: usize,
    /// Distinct sentence templates per text group and tones per audio group.
    pub templates: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_class: 40,
            sample_rate: 22_050,
            duration_seconds: 0.25,
            words_per_utterance: 6,
            templates: 4,
            seed: 2024,
        }
    }
}

/// Which word pool a label draws text from (0 for A/B, 1 for C/D).
pub fn text_group(label: usize) -> usize {
    label / 2
}

/// Which tone band a label's audio uses (0 low for A/C, 1 high for B/D).
pub fn audio_group(label: usize) -> usize {
    label % 2
}

/// Writes `manifest.json` and one WAV per utterance into `dir`; returns the
/// manifest path. Output is a pure function of `spec`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    if spec.templates == 0 || spec.words_per_utterance == 0 {
        return Err(Error::Config("synthetic corpus needs templates and words".into()));
    }
    let mut rng = XorShift64Star::new(spec.seed);
    let n_samples = (spec.duration_seconds * spec.sample_rate as f64).round() as usize;

    let sentences: Vec<Vec<String>> = [&POOL_AB, &POOL_CD]
        .iter()
        .map(|pool| {
            (0..spec.templates)
                .map(|_| {
                    (0..spec.words_per_utterance)
                        .map(|_| pool[rng.below(pool.len() as u64) as usize])
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect()
        })
        .collect();
    // Each tone template is rendered once, noise included, so utterances
    // sharing a template carry byte-identical audio.
    let tones: Vec<Vec<Vec<u8>>> = [(250.0, 400.0), (1800.0, 2600.0)]
        .iter()
        .map(|&(lo, hi)| {
            (0..spec.templates)
                .map(|_| {
                    let freq = lo + (hi - lo) * rng.next_f64();
                    let amp = 0.2 + 0.5 * rng.next_f64();
                    let samples: Vec<f64> = (0..n_samples)
                        .map(|n| {
                            let t = n as f64 / spec.sample_rate as f64;
                            let noise = 0.01 * (2.0 * rng.next_f64() - 1.0);
                            amp * (2.0 * std::f64::consts::PI * freq * t).sin() + noise
                        })
                        .collect();
                    encode_wav_pcm16(&samples, spec.sample_rate)
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut utterances = Vec::new();
    for i in 0..spec.per_class {
        for (label, name) in SYNTHETIC_LABELS.iter().enumerate() {
            let id = format!("s{:03}_{name}", i);
            let text = &sentences[text_group(label)][i % spec.templates];
            let bytes = &tones[audio_group(label)][(i / spec.templates) % spec.templates];
            let file = format!("audio/{id}.wav");
            let path = dir.join(&file);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

            utterances.push(serde_json::json!({
                "id": id,
                "conversation_id": format!("dialog{}", i / 5),
                "speaker": if i % 2 == 0 { "Ross" } else { "Rachel" },
                "text": text,
                "audio": file,
                "label": name,
            }));
        }
    }
    let manifest = serde_json::json!({ "labels": SYNTHETIC_LABELS, "utterances": utterances });
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
