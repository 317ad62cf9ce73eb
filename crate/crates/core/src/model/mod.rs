//! Dual-pathway attention encoder with detector and locator heads.
//!
//! Each encoder layer runs two full sets of query/key/value projections.
//! The attention output is the positive pathway's
//! `softmax(Q Kᵀ / √d_k) V` minus the negative pathway's, followed by an
//! output projection, residual connection and layer normalization, then a
//! position-wise feed-forward block with its own residual and normalization.
//!
//! The per-event signed score `a_i` is the attention mass event `i` receives
//! in the final layer, averaged over heads and query rows, positive pathway
//! minus negative pathway. Its softmax is the attention distribution used to
//! pool the final features for the detector.

mod checkpoint;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMode, EmbeddingProvider, DEFAULT_EMBEDDING_SEED};
use crate::error::{Error, Result};
use crate::log_pipeline::{EventSequence, EventTemplate, Label};
use crate::params::ParamStore;
use crate::tape::{softmax, Tape, Var};

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, NamedArray};

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feed-forward width.
    pub hidden: usize,
    pub negative_pathway: bool,
    pub seed: u64,
    pub embedding_mode: EmbeddingMode,
    /// Lookup-table rows; only used in trainable-lookup mode.
    pub vocab_size: usize,
    pub embedding_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            hidden: 128,
            negative_pathway: true,
            seed: 7,
            embedding_mode: EmbeddingMode::DeterministicHash,
            vocab_size: 0,
            embedding_seed: DEFAULT_EMBEDDING_SEED,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.hidden == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config(format!(
                "d_model must be even for positional encoding, got {}",
                self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.embedding_mode == EmbeddingMode::TrainableLookup && self.vocab_size == 0 {
            return Err(Error::config("trainable embeddings need a vocabulary size"));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal encoding of position `i`: component `2j` is
/// `sin(i / 10000^(2j/d))`, component `2j+1` the matching cosine.
pub fn positional_encoding(i: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut out = vec![0.0; d_model];
    for j in 0..d_model / 2 {
        let angle = i as f64 / 10000f64.powf((2 * j) as f64 / d_model as f64);
        out[2 * j] = angle.sin();
        out[2 * j + 1] = angle.cos();
    }
    Ok(out)
}

/// Template ids plus their original positions. Positions survive event
/// removal so the remaining events keep their encodings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceInput {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
}

impl SequenceInput {
    pub fn new(ids: Vec<u32>) -> Self {
        let positions = (0..ids.len()).collect();
        Self { ids, positions }
    }

    pub fn from_sequence(seq: &EventSequence) -> Self {
        Self::new(seq.events().to_vec())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Masks out the event at `index` (an index into the current events).
    pub fn without(&self, index: usize) -> Result<Self> {
        if self.len() < 2 {
            return Err(Error::input(
                "cannot remove an event from a single-event sequence",
            ));
        }
        if index >= self.len() {
            return Err(Error::input(format!(
                "event index {index} out of range for length {}",
                self.len()
            )));
        }
        let mut out = self.clone();
        out.ids.remove(index);
        out.positions.remove(index);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    /// Positive minus negative attention mass per event, each in `[-1, 1]`.
    pub signed_scores: Vec<f64>,
    /// Softmax of the signed scores.
    pub distribution: Vec<f64>,
    pub argmax_index: usize,
}

impl AttentionProfile {
    pub fn from_signed(signed_scores: Vec<f64>) -> Self {
        let distribution = softmax(&signed_scores);
        let argmax_index = argmax_lowest(&signed_scores);
        Self {
            signed_scores,
            distribution,
            argmax_index,
        }
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub confidence: f64,
    pub decision: Label,
    pub attention: AttentionProfile,
    pub locator_scores: Vec<f64>,
    /// Original positions of the scored events.
    pub positions: Vec<usize>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub features: Var,
    pub signed: Var,
    pub distribution: Var,
    pub logit: Var,
    pub confidence: Var,
    pub locator: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub positive: Vec<Var>,
    pub negative: Vec<Var>,
    /// Concatenated per-head pathway difference, before the output projection.
    pub combined: Var,
}

/// Attention matrices of every layer, for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub positive: Vec<Array2<f64>>,
    pub negative: Vec<Array2<f64>>,
    pub combined: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaithLogModel {
    config: ModelConfig,
    params: ParamStore,
    provider: EmbeddingProvider,
}

pub const EMBEDDING_TABLE: &str = "embedding.table";

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl FaithLogModel {
    /// Fresh model initialized from `config.seed`. `templates` supplies the
    /// token lists used by the embedding hash.
    pub fn new(config: ModelConfig, templates: &[EventTemplate]) -> Result<Self> {
        config.validate()?;
        let provider = match config.embedding_mode {
            EmbeddingMode::DeterministicHash => {
                let mut p = EmbeddingProvider::hashed(config.d_model, config.embedding_seed)?;
                p.register_all(templates);
                p
            }
            EmbeddingMode::TrainableLookup => EmbeddingProvider::trainable(
                config.d_model,
                config.embedding_seed,
                config.vocab_size,
                templates,
                false,
            )?,
        };
        let params = Self::init_params(&config, &provider);
        Ok(Self {
            config,
            params,
            provider,
        })
    }

    fn init_params(config: &ModelConfig, provider: &EmbeddingProvider) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let h = config.hidden;
        let mut store = ParamStore::default();
        let zeros = |c: usize| Array2::<f64>::zeros((1, c));
        let ones = |c: usize| Array2::<f64>::ones((1, c));
        if let Some(table) = provider.table() {
            store.insert(EMBEDDING_TABLE, table.clone());
        }
        for l in 0..config.n_layers {
            let mut pathways = vec!["pos"];
            if config.negative_pathway {
                pathways.push("neg");
            }
            for path in pathways {
                for proj in ["q", "k", "v"] {
                    store.insert(format!("layer{l}.{path}.w_{proj}"), uniform(&mut rng, d, d));
                }
            }
            store.insert(format!("layer{l}.attn.w_out"), uniform(&mut rng, d, d));
            store.insert(format!("layer{l}.attn.b_out"), zeros(d));
            store.insert(format!("layer{l}.norm1.gain"), ones(d));
            store.insert(format!("layer{l}.norm1.bias"), zeros(d));
            store.insert(format!("layer{l}.ff.w1"), uniform(&mut rng, d, h));
            store.insert(format!("layer{l}.ff.b1"), zeros(h));
            store.insert(format!("layer{l}.ff.w2"), uniform(&mut rng, h, d));
            store.insert(format!("layer{l}.ff.b2"), zeros(d));
            store.insert(format!("layer{l}.norm2.gain"), ones(d));
            store.insert(format!("layer{l}.norm2.bias"), zeros(d));
        }
        for head in ["detector", "locator"] {
            store.insert(format!("{head}.w1"), uniform(&mut rng, d, d));
            store.insert(format!("{head}.b1"), zeros(d));
            store.insert(format!("{head}.w2"), uniform(&mut rng, d, 1));
            store.insert(format!("{head}.b2"), zeros(1));
        }
        store
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }

    /// Embedding provider reflecting the current (possibly trained) table.
    pub fn current_provider(&self) -> EmbeddingProvider {
        let mut p = self.provider.clone();
        if let Some(table) = self.params.get(EMBEDDING_TABLE) {
            p.set_table(table.clone()).expect("lookup mode");
        }
        p
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(table) = self.params.get(EMBEDDING_TABLE) {
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= table.nrows()) {
                return Err(Error::Vocabulary(bad));
            }
        }
        Ok(())
    }

    fn positional_block(&self, positions: &[usize]) -> Array2<f64> {
        let d = self.config.d_model;
        let mut out = Array2::zeros((positions.len(), d));
        for (r, &p) in positions.iter().enumerate() {
            let pe = positional_encoding(p, d).expect("validated d_model");
            out.row_mut(r).assign(&ArrayView1::from(pe.as_slice()));
        }
        out
    }

    /// Encoder input `E = e_i + p_i` for fixed (non-trainable) embeddings.
    pub fn input_matrix(&self, input: &SequenceInput) -> Result<Array2<f64>> {
        self.check_ids(&input.ids)?;
        let e = self.current_provider().embed_ids(&input.ids)?;
        Ok(e + self.positional_block(&input.positions))
    }

    /// Records the forward pass for `input` on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, input: &SequenceInput) -> Result<ForwardVars> {
        if input.is_empty() {
            return Err(Error::input("cannot run the model on an empty sequence"));
        }
        self.check_ids(&input.ids)?;
        let e = if self.params.index_of(EMBEDDING_TABLE).is_some() {
            let table = tape.param(EMBEDDING_TABLE);
            let rows: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
            let gathered = tape.gather_rows(table, &rows);
            let pe = tape.input(self.positional_block(&input.positions));
            tape.add(gathered, pe)
        } else {
            let e = self.provider.embed_ids(&input.ids)? + self.positional_block(&input.positions);
            tape.input(e)
        };
        Ok(self.forward_from(tape, e))
    }

    /// Forward pass from an already embedded, position-encoded input.
    pub fn forward_embedded(&self, tape: &mut Tape<'_>, e: &Array2<f64>) -> Result<ForwardVars> {
        if e.nrows() == 0 {
            return Err(Error::input("cannot run the model on an empty sequence"));
        }
        if e.ncols() != self.config.d_model {
            return Err(Error::shape(format!(
                "input has {} columns, model expects {}",
                e.ncols(),
                self.config.d_model
            )));
        }
        let e = tape.input(e.clone());
        Ok(self.forward_from(tape, e))
    }

    fn forward_from(&self, tape: &mut Tape<'_>, e: Var) -> ForwardVars {
        let cfg = &self.config;
        let d_k = cfg.d_k();
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut x = e;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |name: &str| format!("layer{l}.{name}");
            let pathway = |tape: &mut Tape<'_>, path: &str, x: Var| {
                let wq = tape.param(&p(&format!("{path}.w_q")));
                let wk = tape.param(&p(&format!("{path}.w_k")));
                let wv = tape.param(&p(&format!("{path}.w_v")));
                let q = tape.matmul(x, wq);
                let k = tape.matmul(x, wk);
                let v = tape.matmul(x, wv);
                let mut probs = Vec::with_capacity(cfg.n_heads);
                let mut outs = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let qh = tape.col_slice(q, h * d_k, d_k);
                    let kh = tape.col_slice(k, h * d_k, d_k);
                    let vh = tape.col_slice(v, h * d_k, d_k);
                    let logits = tape.matmul_t(qh, kh);
                    let logits = tape.scale(logits, scale);
                    let attn = tape.softmax_rows(logits);
                    outs.push(tape.matmul(attn, vh));
                    probs.push(attn);
                }
                (probs, outs)
            };
            let (positive, pos_out) = pathway(tape, "pos", x);
            let (negative, heads) = if cfg.negative_pathway {
                let (negative, neg_out) = pathway(tape, "neg", x);
                let heads: Vec<Var> = pos_out
                    .iter()
                    .zip(&neg_out)
                    .map(|(&a, &b)| tape.sub(a, b))
                    .collect();
                (negative, heads)
            } else {
                (Vec::new(), pos_out)
            };
            let combined = tape.concat_cols(&heads);

            let w_out = tape.param(&p("attn.w_out"));
            let b_out = tape.param(&p("attn.b_out"));
            let attn = tape.matmul(combined, w_out);
            let attn = tape.add_row(attn, b_out);
            let res = tape.add(x, attn);
            let normed = self.layer_norm(tape, res, &p("norm1"));

            let w1 = tape.param(&p("ff.w1"));
            let b1 = tape.param(&p("ff.b1"));
            let w2 = tape.param(&p("ff.w2"));
            let b2 = tape.param(&p("ff.b2"));
            let hidden = tape.matmul(normed, w1);
            let hidden = tape.add_row(hidden, b1);
            let hidden = tape.gelu(hidden);
            let ff = tape.matmul(hidden, w2);
            let ff = tape.add_row(ff, b2);
            let res = tape.add(normed, ff);
            x = self.layer_norm(tape, res, &p("norm2"));

            layers.push(LayerVars {
                positive,
                negative,
                combined,
            });
        }

        let last = layers.last().expect("at least one layer");
        let pos_mass = self.head_mean_mass(tape, &last.positive.clone());
        let signed = if cfg.negative_pathway {
            let neg_mass = self.head_mean_mass(tape, &last.negative.clone());
            tape.sub(pos_mass, neg_mass)
        } else {
            pos_mass
        };
        let distribution = tape.softmax_rows(signed);
        let pooled = tape.matmul(distribution, x);
        let logit = self.head(tape, pooled, "detector");
        let confidence = tape.sigmoid(logit);
        let loc_logit = self.head(tape, x, "locator");
        let locator = tape.sigmoid(loc_logit);

        ForwardVars {
            features: x,
            signed,
            distribution,
            logit,
            confidence,
            locator,
            layers,
        }
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, x: Var, prefix: &str) -> Var {
        let gain = tape.param(&format!("{prefix}.gain"));
        let bias = tape.param(&format!("{prefix}.bias"));
        let z = tape.standardize(x);
        let z = tape.mul_row(z, gain);
        tape.add_row(z, bias)
    }

    /// Mean over heads of the column means (mass received per key).
    fn head_mean_mass(&self, tape: &mut Tape<'_>, probs: &[Var]) -> Var {
        let mut total = tape.mean_rows(probs[0]);
        for &p in &probs[1..] {
            let m = tape.mean_rows(p);
            total = tape.add(total, m);
        }
        tape.scale(total, 1.0 / probs.len() as f64)
    }

    /// Two-layer head applied row-wise, returning pre-sigmoid logits.
    fn head(&self, tape: &mut Tape<'_>, x: Var, name: &str) -> Var {
        let w1 = tape.param(&format!("{name}.w1"));
        let b1 = tape.param(&format!("{name}.b1"));
        let w2 = tape.param(&format!("{name}.w2"));
        let b2 = tape.param(&format!("{name}.b2"));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    fn result_from(&self, tape: &Tape<'_>, vars: &ForwardVars, positions: Vec<usize>) -> DetectionResult {
        let confidence = tape.scalar(vars.confidence);
        let signed = tape.value(vars.signed).iter().copied().collect();
        DetectionResult {
            confidence,
            decision: Label::from_bool(confidence >= DECISION_THRESHOLD),
            attention: AttentionProfile::from_signed(signed),
            locator_scores: tape.value(vars.locator).iter().copied().collect(),
            positions,
        }
    }

    pub fn detect_input(&self, input: &SequenceInput) -> Result<DetectionResult> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward(&mut tape, input)?;
        Ok(self.result_from(&tape, &vars, input.positions.clone()))
    }

    pub fn detect(&self, seq: &EventSequence) -> Result<DetectionResult> {
        self.detect_input(&SequenceInput::from_sequence(seq))
    }

    /// Detection on `X \ e_index`, the event masked out and the survivors
    /// keeping their original positions.
    pub fn detect_without(&self, seq: &EventSequence, index: usize) -> Result<DetectionResult> {
        self.detect_input(&SequenceInput::from_sequence(seq).without(index)?)
    }

    pub fn detect_embedded(&self, e: &Array2<f64>) -> Result<DetectionResult> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_embedded(&mut tape, e)?;
        Ok(self.result_from(&tape, &vars, (0..e.nrows()).collect()))
    }

    /// Encoder features and attention profile for an embedded input.
    pub fn encode(&self, e: &Array2<f64>) -> Result<(Array2<f64>, AttentionProfile)> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_embedded(&mut tape, e)?;
        let signed = tape.value(vars.signed).iter().copied().collect();
        Ok((tape.value(vars.features).clone(), AttentionProfile::from_signed(signed)))
    }

    /// Locator scores `L(e_i)` for a feature matrix, row by row.
    pub fn locate(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.config.d_model {
            return Err(Error::shape(format!(
                "features have {} columns, model expects {}",
                features.ncols(),
                self.config.d_model
            )));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.input(features.clone());
        let logits = self.head(&mut tape, x, "locator");
        let out = tape.sigmoid(logits);
        Ok(tape.value(out).iter().copied().collect())
    }

    pub fn attention_trace(&self, e: &Array2<f64>) -> Result<AttentionTrace> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_embedded(&mut tape, e)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(AttentionTrace {
            layers: vars
                .layers
                .iter()
                .map(|l| LayerTrace {
                    positive: grab(&l.positive),
                    negative: grab(&l.negative),
                    combined: tape.value(l.combined).clone(),
                })
                .collect(),
        })
    }

    /// Copies every positive-pathway projection onto the negative pathway.
    pub fn mirror_pathways(&mut self) -> Result<()> {
        if !self.config.negative_pathway {
            return Err(Error::config("negative pathway is disabled"));
        }
        for l in 0..self.config.n_layers {
            for proj in ["q", "k", "v"] {
                let w = self.params.get(&format!("layer{l}.pos.w_{proj}")).expect("exists").clone();
                *self.params.get_mut(&format!("layer{l}.neg.w_{proj}")).expect("exists") = w;
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        provider: EmbeddingProvider,
    ) -> Self {
        Self {
            config,
            params,
            provider,
        }
    }

    /// Parameter names and shapes a model with `config` must have.
    pub fn expected_shapes(config: &ModelConfig, provider: &EmbeddingProvider) -> Vec<(String, (usize, usize))> {
        Self::init_params(config, provider)
            .iter()
            .map(|(n, v)| (n.to_string(), v.dim()))
            .collect()
    }
}
