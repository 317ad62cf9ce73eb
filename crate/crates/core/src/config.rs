//! Flat `key = value` experiment configuration.
//!
//! Recognized keys: `epochs`, `batch_size`, `learning_rate`, `lambda1` to
//! `lambda4`, `seed`, `d_model`, `n_heads`, `n_layers`, `negative_pathway`.
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const CONFIG_KEYS: [&str; 12] = [
    "epochs",
    "batch_size",
    "learning_rate",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "seed",
    "d_model",
    "n_heads",
    "n_layers",
    "negative_pathway",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::parse(line, format!("invalid value {raw:?} for {key}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("expected key = value, got {line:?}")))?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) && CONFIG_KEYS.contains(&key) {
                return Err(Error::parse(line_no, format!("duplicate key {key}")));
            }
            match key {
                "epochs" => cfg.train.epochs = value(key, val, line_no)?,
                "batch_size" => cfg.train.batch_size = value(key, val, line_no)?,
                "learning_rate" => cfg.train.learning_rate = value(key, val, line_no)?,
                "lambda1" => cfg.train.weights.ce = value(key, val, line_no)?,
                "lambda2" => cfg.train.weights.rank = value(key, val, line_no)?,
                "lambda3" => cfg.train.weights.kl = value(key, val, line_no)?,
                "lambda4" => cfg.train.weights.consistency = value(key, val, line_no)?,
                "seed" => {
                    let seed = value(key, val, line_no)?;
                    cfg.train.seed = seed;
                    cfg.model.seed = seed;
                }
                "d_model" => {
                    cfg.model.d_model = value(key, val, line_no)?;
                    cfg.model.hidden = 2 * cfg.model.d_model;
                }
                "n_heads" => cfg.model.n_heads = value(key, val, line_no)?,
                "n_layers" => cfg.model.n_layers = value(key, val, line_no)?,
                "negative_pathway" => cfg.model.negative_pathway = value(key, val, line_no)?,
                other => {
                    return Err(Error::parse(line_no, format!("unknown config key {other:?}")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Overrides the seed of both the initialization and the training stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

impl fmt::Display for ExperimentConfig {
    /// Canonical text form; parses back to an equal configuration.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.train;
        let m = &self.model;
        writeln!(f, "epochs = {}", t.epochs)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        writeln!(f, "learning_rate = {:?}", t.learning_rate)?;
        writeln!(f, "lambda1 = {:?}", t.weights.ce)?;
        writeln!(f, "lambda2 = {:?}", t.weights.rank)?;
        writeln!(f, "lambda3 = {:?}", t.weights.kl)?;
        writeln!(f, "lambda4 = {:?}", t.weights.consistency)?;
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "d_model = {}", m.d_model)?;
        writeln!(f, "n_heads = {}", m.n_heads)?;
        writeln!(f, "n_layers = {}", m.n_layers)?;
        writeln!(f, "negative_pathway = {}", m.negative_pathway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "# ablation\nepochs = 3\nbatch_size=16\nlearning_rate = 0.01\n\
                    lambda1 = 1\nlambda2 = 0\nlambda3 = 0 # off\nlambda4 = 0\nseed = 11\n\
                    d_model = 16\nn_heads = 2\nn_layers = 1\nnegative_pathway = false\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.weights.kl, 0.0);
        assert_eq!((cfg.train.seed, cfg.model.seed), (11, 11));
        assert_eq!((cfg.model.d_model, cfg.model.hidden), (16, 32));
        assert!(!cfg.model.negative_pathway);
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = ExperimentConfig::parse("lamda2 = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lamda2"));
    }

    #[test]
    fn malformed_lines() {
        assert!(ExperimentConfig::parse("epochs 3\n").is_err());
        assert!(ExperimentConfig::parse("epochs = three\n").is_err());
        assert!(ExperimentConfig::parse("epochs = 1\nepochs = 2\n").is_err());
        assert!(matches!(
            ExperimentConfig::parse("n_heads = 5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn display_round_trips() {
        let cfg = ExperimentConfig::parse("learning_rate = 0.003\nlambda3 = 0.25\nseed = 4\n").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }
}
