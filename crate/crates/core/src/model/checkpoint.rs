//! Named-array checkpoint archive (JSON).
//!
//! The header echoes the model configuration and seed; every parameter is
//! stored as `{name, shape, data}` in row-major order. Loading validates
//! names and shapes against the header's configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FaithLogModel, ModelConfig};
use crate::embedding::{EmbeddingMode, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::log_pipeline::EventTemplate;
use crate::params::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "faithlog-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Trained network parameters.
    Model,
    /// Reference detector that reads ground-truth root causes; no arrays.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub kind: CheckpointKind,
    pub run_id: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub negative_pathway: bool,
    pub seed: u64,
    pub embedding_mode: EmbeddingMode,
    pub vocab_size: usize,
    pub embedding_seed: u64,
    /// Template store used by the embedding hash, `id\ttokens` per entry.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<NamedArray>,
}

impl CheckpointHeader {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            hidden: self.hidden,
            negative_pathway: self.negative_pathway,
            seed: self.seed,
            embedding_mode: self.embedding_mode,
            vocab_size: self.vocab_size,
            embedding_seed: self.embedding_seed,
        }
    }
}

impl Checkpoint {
    pub fn from_model(model: &FaithLogModel, run_id: &str) -> Self {
        let c = model.config();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: CheckpointKind::Model,
            run_id: run_id.to_string(),
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            hidden: c.hidden,
            negative_pathway: c.negative_pathway,
            seed: c.seed,
            embedding_mode: c.embedding_mode,
            vocab_size: c.vocab_size,
            embedding_seed: c.embedding_seed,
            templates: model
                .provider()
                .templates()
                .iter()
                .map(|t| format!("{}\t{}", t.template_id, t.render()))
                .collect(),
        };
        let arrays = model
            .params()
            .iter()
            .map(|(name, v)| NamedArray {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect();
        Self { header, arrays }
    }

    pub fn oracle(run_id: &str) -> Self {
        let c = ModelConfig::default();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                kind: CheckpointKind::Oracle,
                run_id: run_id.to_string(),
                d_model: c.d_model,
                n_heads: c.n_heads,
                n_layers: c.n_layers,
                hidden: c.hidden,
                negative_pathway: c.negative_pathway,
                seed: c.seed,
                embedding_mode: c.embedding_mode,
                vocab_size: c.vocab_size,
                embedding_seed: c.embedding_seed,
                templates: Vec::new(),
            },
            arrays: Vec::new(),
        }
    }

    pub fn templates(&self) -> Result<Vec<EventTemplate>> {
        self.header
            .templates
            .iter()
            .map(|line| {
                let (id, text) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Checkpoint(format!("bad template entry {line:?}")))?;
                let id = id
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad template id {id:?}")))?;
                EventTemplate::from_text(id, text)
            })
            .collect()
    }

    /// Rebuilds the model, checking every array against the configuration.
    pub fn to_model(&self) -> Result<FaithLogModel> {
        if self.header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}",
                self.header.format
            )));
        }
        if self.header.kind != CheckpointKind::Model {
            return Err(Error::Checkpoint("checkpoint holds no model parameters".into()));
        }
        let config = self.header.model_config();
        config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let templates = self.templates()?;
        let mut provider = match config.embedding_mode {
            EmbeddingMode::DeterministicHash => {
                EmbeddingProvider::hashed(config.d_model, config.embedding_seed)?
            }
            EmbeddingMode::TrainableLookup => EmbeddingProvider::trainable(
                config.d_model,
                config.embedding_seed,
                config.vocab_size,
                &[],
                false,
            )?,
        };
        provider.register_all(&templates);

        let expected = FaithLogModel::expected_shapes(&config, &provider);
        if expected.len() != self.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.len(),
                self.arrays.len()
            )));
        }
        let mut params = ParamStore::default();
        for ((name, shape), array) in expected.iter().zip(&self.arrays) {
            if *name != array.name {
                return Err(Error::Checkpoint(format!(
                    "expected array {name}, found {}",
                    array.name
                )));
            }
            let found = (array.shape[0], array.shape[1]);
            if *shape != found || array.data.len() != shape.0 * shape.1 {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {found:?} ({} values), expected {shape:?}",
                    array.data.len()
                )));
            }
            let value = Array2::from_shape_vec(*shape, array.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(name.clone(), value);
        }
        if let Some(table) = params.get(super::EMBEDDING_TABLE) {
            provider.set_table(table.clone())?;
        }
        Ok(FaithLogModel::from_parts(config, params, provider))
    }

    pub fn write(&self, out: impl Write) -> Result<()> {
        let mut out = BufWriter::new(out);
        serde_json::to_writer(&mut out, self)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self> {
        serde_json::from_reader(BufReader::new(input))
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FaithLogModel {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            hidden: 8,
            ..ModelConfig::default()
        };
        let templates = [EventTemplate::from_text(0, "a <*>").unwrap()];
        FaithLogModel::new(config, &templates).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = tiny();
        let mut buf = Vec::new();
        Checkpoint::from_model(&model, "run").write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap().to_model().unwrap();
        assert!(back.params().bitwise_eq(model.params()));
        assert_eq!(back.config(), model.config());
        assert_eq!(back.provider().templates(), model.provider().templates());
    }

    #[test]
    fn header_records_ablation() {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            hidden: 8,
            negative_pathway: false,
            ..ModelConfig::default()
        };
        let model = FaithLogModel::new(config, &[]).unwrap();
        let ckpt = Checkpoint::from_model(&model, "r");
        assert!(!ckpt.header.negative_pathway);
        assert!(ckpt.arrays.iter().all(|a| !a.name.contains(".neg.")));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ckpt = Checkpoint::from_model(&tiny(), "r");
        ckpt.header.d_model = 16;
        assert!(matches!(ckpt.to_model(), Err(Error::Checkpoint(_))));

        let mut ckpt = Checkpoint::from_model(&tiny(), "r");
        ckpt.arrays[0].data.pop();
        assert!(matches!(ckpt.to_model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn oracle_has_no_model() {
        assert!(matches!(Checkpoint::oracle("r").to_model(), Err(Error::Checkpoint(_))));
    }
}
