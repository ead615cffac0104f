//! Web-calibrated conformal prediction for zero-shot classifiers.
//!
//! The pipeline mines a calibration corpus from image search results,
//! scores every mined example with a plausibility vector over the task
//! classes, and calibrates a conformal threshold by Monte Carlo sampling of
//! labels from those vectors.

pub mod conformal;
pub mod embedding;
pub mod evaluation;
pub mod fuzzy;
pub mod html;
pub mod jsonl;
pub mod miner;
pub mod pipeline;
pub mod plausibility;
pub mod synth;
pub mod text;

pub use conformal::{
    mc_threshold, predict_set, standard_threshold, AmbiguousCalibrationSet, ConformalError, ConformalThreshold,
    Gamma, Method, MonteCarloConfig, PredictionSet, ScoreTable, ThresholdRule,
};
pub use embedding::{cosine, load_embeddings, softmax, store_embeddings, EmbeddingError, EmbeddingMatrix};
pub use fuzzy::fuzzy_ratio;
pub use miner::{mine_corpus, ClassLabel, CorpusManifest, MinedExample, SearchEntry};
pub use plausibility::{
    build_ambiguous_set, combine, PlausibilityConfig, PlausibilityError, PlausibilityVector, PromptSet,
    PseudoLabelMap,
};
