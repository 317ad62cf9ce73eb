//! Faithful log-based anomaly detection.
//!
//! The pipeline runs from raw log lines to parsed templates and windowed
//! event sequences ([`log_pipeline`]), through a dual-pathway attention
//! encoder with detector and locator heads ([`model`]) trained on four
//! objectives ([`training`]), to the faithfulness evaluation of its
//! attention ([`faithfulness`]). [`synth`] generates labeled corpora with
//! known root causes.

pub mod config;
pub mod embedding;
pub mod error;
pub mod faithfulness;
pub mod log_pipeline;
pub mod model;
pub mod params;
pub mod synth;
pub mod tape;
pub mod training;

pub use config::ExperimentConfig;
pub use embedding::{EmbeddingMode, EmbeddingProvider};
pub use error::{Error, Result};
pub use faithfulness::{
    detection_scores, evaluate_faithfulness, rank_metrics, support_rate, Detector,
    FaithfulnessReport, OracleDetector,
};
pub use log_pipeline::{DrainParser, EventSequence, EventTemplate, Label, LogRecord};
pub use model::{positional_encoding, Checkpoint, DetectionResult, FaithLogModel, ModelConfig};
pub use synth::{generate, split, SynthConfig, SynthDataset};
pub use training::{fit, LossWeights, TrainConfig, TrainOutcome};
