//! Template embeddings.
//!
//! The default provider derives every coordinate from a seeded 64-bit hash
//! of the template's tokens and the coordinate index, so vectors are stable
//! across processes and platforms. A trainable lookup table is available for
//! end-to-end learned embeddings.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};
use crate::log_pipeline::{EventSequence, EventTemplate, Token};

pub const DEFAULT_EMBEDDING_SEED: u64 = 0x5eed_1065;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingMode {
    DeterministicHash,
    TrainableLookup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingProvider {
    d_model: usize,
    seed: u64,
    /// Token lists of known templates, used by hash mode and to initialize
    /// lookup rows.
    vocabulary: HashMap<u32, Vec<Token>>,
    table: Option<Table>,
}

#[derive(Debug, Clone, PartialEq)]
struct Table {
    rows: Array2<f64>,
    allow_growth: bool,
}

/// Hash embedding of a token list. Coordinates are uniform in
/// `[-1, 1]` scaled by `sqrt(3 / d_model)`, giving rows of unit expected norm.
pub fn hash_embedding(tokens: &[Token], d_model: usize, seed: u64) -> Vec<f64> {
    let mut key = Vec::with_capacity(tokens.len() * 8 + 8);
    for token in tokens {
        key.extend_from_slice(token.as_str().as_bytes());
        key.push(0x1f);
    }
    let prefix = key.len();
    let scale = (3.0 / d_model as f64).sqrt();
    (0..d_model)
        .map(|j| {
            key.truncate(prefix);
            key.extend_from_slice(&(j as u64).to_le_bytes());
            let h = xxh3_64_with_seed(&key, seed);
            let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
            (2.0 * unit - 1.0) * scale
        })
        .collect()
}

/// Token list standing in for a template id with no known text.
pub fn placeholder_tokens(id: u32) -> Vec<Token> {
    vec![Token::Literal(format!("<event:{id}>"))]
}

impl EmbeddingProvider {
    pub fn hashed(d_model: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 {
            return Err(Error::config(format!(
                "d_model must be a positive even integer, got {d_model}"
            )));
        }
        Ok(Self {
            d_model,
            seed,
            vocabulary: HashMap::new(),
            table: None,
        })
    }

    /// A lookup table with `vocab_size` rows, initialized from the hash
    /// embedding of each id's template (or its placeholder).
    pub fn trainable(
        d_model: usize,
        seed: u64,
        vocab_size: usize,
        templates: &[EventTemplate],
        allow_growth: bool,
    ) -> Result<Self> {
        let mut provider = Self::hashed(d_model, seed)?;
        provider.register_all(templates);
        let mut rows = Array2::zeros((vocab_size, d_model));
        for id in 0..vocab_size {
            let v = provider.hash_row(id as u32);
            rows.row_mut(id).assign(&ndarray::ArrayView1::from(&v));
        }
        provider.table = Some(Table { rows, allow_growth });
        Ok(provider)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> EmbeddingMode {
        if self.table.is_some() {
            EmbeddingMode::TrainableLookup
        } else {
            EmbeddingMode::DeterministicHash
        }
    }

    pub fn register(&mut self, template: &EventTemplate) {
        self.vocabulary
            .insert(template.template_id, template.tokens.clone());
    }

    pub fn register_all(&mut self, templates: &[EventTemplate]) {
        for t in templates {
            self.register(t);
        }
    }

    /// Registered templates sorted by id.
    pub fn templates(&self) -> Vec<EventTemplate> {
        let mut out: Vec<EventTemplate> = self
            .vocabulary
            .iter()
            .map(|(&template_id, tokens)| EventTemplate {
                template_id,
                tokens: tokens.clone(),
            })
            .collect();
        out.sort_by_key(|t| t.template_id);
        out
    }

    fn hash_row(&self, id: u32) -> Vec<f64> {
        match self.vocabulary.get(&id) {
            Some(tokens) => hash_embedding(tokens, self.d_model, self.seed),
            None => hash_embedding(&placeholder_tokens(id), self.d_model, self.seed),
        }
    }

    pub fn embed_template(&self, template: &EventTemplate) -> Result<Vec<f64>> {
        match &self.table {
            None => Ok(hash_embedding(&template.tokens, self.d_model, self.seed)),
            Some(table) => {
                let id = template.template_id as usize;
                if id >= table.rows.nrows() {
                    return Err(Error::Vocabulary(template.template_id));
                }
                Ok(table.rows.row(id).to_vec())
            }
        }
    }

    /// Embedding of a template id. Ids without registered text hash their
    /// placeholder token in hash mode.
    pub fn embed_id(&self, id: u32) -> Result<Vec<f64>> {
        match &self.table {
            None => Ok(self.hash_row(id)),
            Some(table) => table
                .rows
                .get((id as usize, 0))
                .map(|_| table.rows.row(id as usize).to_vec())
                .ok_or(Error::Vocabulary(id)),
        }
    }

    /// Grows the lookup table so `id` resolves, if growth is enabled.
    pub fn ensure(&mut self, id: u32) -> Result<()> {
        let needed = id as usize + 1;
        let current = match &self.table {
            None => return Ok(()),
            Some(t) if needed <= t.rows.nrows() => return Ok(()),
            Some(t) if !t.allow_growth => return Err(Error::Vocabulary(id)),
            Some(t) => t.rows.nrows(),
        };
        let new_rows: Vec<Vec<f64>> = (current..needed).map(|i| self.hash_row(i as u32)).collect();
        let table = self.table.as_mut().expect("checked above");
        let mut rows = Array2::zeros((needed, self.d_model));
        rows.slice_mut(ndarray::s![..current, ..]).assign(&table.rows);
        for (k, v) in new_rows.iter().enumerate() {
            rows.row_mut(current + k)
                .assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        table.rows = rows;
        Ok(())
    }

    pub fn embed_sequence(&self, seq: &EventSequence) -> Result<Array2<f64>> {
        self.embed_ids(seq.events())
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.d_model));
        for (i, &id) in ids.iter().enumerate() {
            let v = self.embed_id(id)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        Ok(out)
    }

    pub fn table(&self) -> Option<&Array2<f64>> {
        self.table.as_ref().map(|t| &t.rows)
    }

    pub fn set_table(&mut self, rows: Array2<f64>) -> Result<()> {
        let table = self
            .table
            .as_mut()
            .ok_or_else(|| Error::config("provider is not in trainable mode"))?;
        if rows.ncols() != self.d_model {
            return Err(Error::shape(format!(
                "embedding table has {} columns, expected {}",
                rows.ncols(),
                self.d_model
            )));
        }
        table.rows = rows;
        Ok(())
    }

    /// Writes `template_id v_0 ... v_{d-1}` per line for the given ids.
    pub fn export(&self, out: impl Write, ids: &[u32]) -> Result<()> {
        let mut out = BufWriter::new(out);
        for &id in ids {
            let v = self.embed_id(id)?;
            write!(out, "{id}")?;
            for x in v {
                write!(out, " {x:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads an exported embedding table back as `(id, vector)` pairs.
pub fn read_embedding_table(input: impl Read) -> Result<Vec<(u32, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::parse(idx + 1, "missing template id"))?;
        let v = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::parse(idx + 1, format!("invalid float {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, v));
    }
    Ok(rows)
}
