//! Emotion recognition in conversations from aligned text and audio.
//!
//! The crate covers manifest ingestion and stratified splitting
//! ([`corpus`]), MFCC audio features ([`audio_dsp`]), TF-IDF text features
//! ([`text_features`]), softmax-regression classifiers and the prediction
//! table interchange format ([`classifiers`]), late fusion ([`fusion`]),
//! metrics and reports ([`evaluation`]), and the end-to-end batch runner
//! ([`pipeline`]).

pub mod audio_dsp;
pub mod classifiers;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod matrix;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod text_features;

pub use classifiers::{PredictionTable, ProbabilityDistribution, SoftmaxModel, TrainConfig};
pub use corpus::{Corpus, LabelSet, SplitAssignment, Utterance};
pub use error::{Error, Result};
pub use evaluation::{EvaluationReport, ReferenceBaselines};
pub use features::FeatureVector;
pub use fusion::{FusionMethod, FusionSpec};
pub use pipeline::{Pipeline, RunConfig};
