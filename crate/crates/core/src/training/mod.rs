//! End-to-end training of the detector, locator and attention.
//!
//! Every mini-batch is scored with
//! `λ1·CE + λ2·Rank + λ3·KL + λ4·Consistency`:
//!
//! * CE is summed over the batch.
//! * Rank pairs each anomalous sequence with one normal sequence drawn
//!   uniformly from the same batch and averages the hinge over pairs.
//! * KL pulls each sequence's attention distribution toward its normalized
//!   locator scores (treated as a fixed target) and is averaged over the batch.
//! * Consistency re-runs detection on every anomalous sequence with its
//!   highest-attention event masked out and averages the hinge over them.
//!
//! Each sequence is differentiated on its own tape. The ranking hinge only
//! couples sequences through their maximum locator score, so its gradient is
//! applied as a per-sequence seed once all forwards are done. Gradients are
//! summed in batch order, which keeps results bitwise identical for any
//! thread count.

pub mod loss;

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faithfulness::detection_scores;
use crate::log_pipeline::{EventSequence, EventTemplate};
use crate::model::{argmax_lowest, FaithLogModel, ForwardVars, ModelConfig, SequenceInput};
use crate::params::ParamStore;
use crate::tape::{ParamGrads, Tape, Var};

pub use loss::{
    ce_loss, consistency_loss, kl_loss, normalize_locator, rank_loss, LossBreakdown, LossWeights,
    LOCATOR_EPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Worker threads for per-sequence passes; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            seed: 7,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.weights.rank > 0.0 && self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 when the ranking loss is enabled",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        Ok(())
    }
}

/// One normal/anomalous pairing for the ranking loss, as batch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankPair {
    pub normal: usize,
    pub anomalous: usize,
}

/// Pairs each anomalous batch member with a uniformly drawn normal member.
/// Empty when the batch lacks either class.
pub fn sample_pairs(batch: &[&EventSequence], rng: &mut impl Rng) -> Vec<RankPair> {
    let normals: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].is_anomalous()).collect();
    if normals.is_empty() {
        return Vec::new();
    }
    (0..batch.len())
        .filter(|&i| batch[i].is_anomalous())
        .map(|anomalous| RankPair {
            normal: normals[rng.gen_range(0..normals.len())],
            anomalous,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub total: f64,
    pub terms: LossBreakdown,
    pub grads: Option<ParamGrads>,
    pub pairs: usize,
    /// Sequences that contributed to the consistency term.
    pub consistency_count: usize,
}

struct SequencePass<'p> {
    tape: Tape<'p>,
    ce: Var,
    kl: Option<Var>,
    consistency: Option<Var>,
    max_locator: Option<Var>,
}

fn sequence_pass<'p>(
    model: &'p FaithLogModel,
    seq: &EventSequence,
    weights: &LossWeights,
    need_max_locator: bool,
) -> Result<SequencePass<'p>> {
    let mut tape = Tape::new(model.params());
    let input = SequenceInput::from_sequence(seq);
    let vars: ForwardVars = model.forward(&mut tape, &input)?;
    let target = if seq.is_anomalous() { 1.0 } else { 0.0 };
    let ce = tape.bce_logit(vars.logit, target);

    let kl = if weights.kl > 0.0 {
        let locator: Vec<f64> = tape.value(vars.locator).iter().copied().collect();
        Some(tape.kl(vars.distribution, normalize_locator(&locator)))
    } else {
        None
    };

    let consistency = if weights.consistency > 0.0 && seq.is_anomalous() && seq.len() >= 2 {
        let signed: Vec<f64> = tape.value(vars.signed).iter().copied().collect();
        let e_max = argmax_lowest(&signed);
        let reduced = model.forward(&mut tape, &input.without(e_max)?)?;
        let diff = tape.sub(reduced.confidence, vars.confidence);
        let shifted = tape.add_scalar(diff, 1.0);
        Some(tape.relu(shifted))
    } else {
        None
    };

    let max_locator = need_max_locator.then(|| tape.max(vars.locator));
    Ok(SequencePass {
        tape,
        ce,
        kl,
        consistency,
        max_locator,
    })
}

/// Evaluates the weighted objective on one batch, optionally with gradients
/// for every parameter.
pub fn batch_objective(
    model: &FaithLogModel,
    batch: &[&EventSequence],
    weights: &LossWeights,
    pairs: &[RankPair],
    with_grads: bool,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let use_rank = weights.rank > 0.0 && !pairs.is_empty();
    if weights.rank > 0.0 && pairs.is_empty() {
        log::debug!("batch lacks a normal/anomalous pair; ranking term skipped");
    }
    let passes: Vec<SequencePass<'_>> = batch
        .par_iter()
        .map(|seq| sequence_pass(model, seq, weights, use_rank))
        .collect::<Result<_>>()?;

    let mut terms = LossBreakdown::default();
    let mut rank_seed = vec![0.0; batch.len()];
    for pass in &passes {
        terms.ce += pass.tape.scalar(pass.ce);
        if let Some(kl) = pass.kl {
            terms.kl += pass.tape.scalar(kl);
        }
    }
    terms.kl /= batch.len() as f64;

    if use_rank {
        let max_of = |i: usize| {
            let p = &passes[i];
            p.tape.scalar(p.max_locator.expect("rank enabled"))
        };
        let share = weights.rank / pairs.len() as f64;
        for pair in pairs {
            let hinge = 1.0 + max_of(pair.normal) - max_of(pair.anomalous);
            if hinge > 0.0 {
                terms.rank += hinge;
                rank_seed[pair.normal] += share;
                rank_seed[pair.anomalous] -= share;
            }
        }
        terms.rank /= pairs.len() as f64;
    }

    let consistency_count = passes.iter().filter(|p| p.consistency.is_some()).count();
    if consistency_count > 0 {
        terms.consistency = passes
            .iter()
            .filter_map(|p| p.consistency.map(|c| p.tape.scalar(c)))
            .sum::<f64>()
            / consistency_count as f64;
    }

    let total = terms.total(weights);
    let grads = if with_grads {
        let kl_weight = weights.kl / batch.len() as f64;
        let cons_weight = if consistency_count > 0 {
            weights.consistency / consistency_count as f64
        } else {
            0.0
        };
        let per_seq: Vec<ParamGrads> = passes
            .par_iter()
            .zip(rank_seed.par_iter())
            .map(|(pass, &rank)| {
                let mut seeds = vec![(pass.ce, weights.ce)];
                if let Some(kl) = pass.kl {
                    seeds.push((kl, kl_weight));
                }
                if let Some(c) = pass.consistency {
                    seeds.push((c, cons_weight));
                }
                if let (Some(m), true) = (pass.max_locator, rank != 0.0) {
                    seeds.push((m, rank));
                }
                pass.tape.backward(&seeds)
            })
            .collect();
        let mut sum = ParamGrads::zeros_like(model.params());
        for g in &per_seq {
            sum.accumulate(g);
        }
        Some(sum)
    } else {
        None
    };

    Ok(BatchObjective {
        total,
        terms,
        grads,
        pairs: if use_rank { pairs.len() } else { 0 },
        consistency_count,
    })
}

/// Adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .iter()
            .map(|(_, v)| Array2::zeros(v.raw_dim()))
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for i in 0..params.len() {
            let Some(g) = grads.get(i) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(m)
                .and(v)
                .and(params.value_mut(i))
                .and(g)
                .for_each(|m, v, w, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Mini-batches of dataset indices. When `stratify` is set every batch holds
/// both classes (given both exist), anomalies spread evenly across batches.
pub fn make_batches(
    data: &[EventSequence],
    batch_size: usize,
    stratify: bool,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    if stratify {
        let (anomalous, normal): (Vec<usize>, Vec<usize>) =
            order.iter().partition(|&&i| data[i].is_anomalous());
        let (na, nn) = (anomalous.len() as f64, normal.len() as f64);
        let (mut ia, mut inn) = (0usize, 0usize);
        order.clear();
        while ia < anomalous.len() || inn < normal.len() {
            let take_anomalous = inn >= normal.len()
                || (ia < anomalous.len() && (ia as f64 + 0.5) / na <= (inn as f64 + 0.5) / nn);
            if take_anomalous {
                order.push(anomalous[ia]);
                ia += 1;
            } else {
                order.push(normal[inn]);
                inn += 1;
            }
        }
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if stratify {
        let mixed = |b: &Vec<usize>| {
            b.iter().any(|&i| data[i].is_anomalous()) && b.iter().any(|&i| !data[i].is_anomalous())
        };
        let mut merged: Vec<Vec<usize>> = Vec::with_capacity(batches.len());
        for b in batches.drain(..) {
            match merged.last_mut() {
                Some(prev) if !mixed(&b) || !mixed(prev) => prev.extend(b),
                _ => merged.push(b),
            }
        }
        batches = merged;
    }
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub terms: LossBreakdown,
    pub heldout_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FaithLogModel,
    pub log: Vec<EpochRecord>,
    pub seed: u64,
}

/// Writes the per-epoch training log as CSV.
pub fn write_training_log(
    out: impl Write,
    log: &[EpochRecord],
    header: Option<&str>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    if let Some(h) = header {
        for line in h.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "epoch,total,ce,rank,kl,consistency,heldout_f1")?;
    for r in log {
        let f1 = r.heldout_f1.map(|f| format!("{f:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch, r.total, r.terms.ce, r.terms.rank, r.terms.kl, r.terms.consistency, f1
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Trains a fresh model on `train`. `heldout`, when given, is scored with
/// detection F1 after every epoch.
pub fn fit(
    model_config: &ModelConfig,
    templates: &[EventTemplate],
    train: &[EventSequence],
    heldout: Option<&[EventSequence]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let has_anomalous = train.iter().any(EventSequence::is_anomalous);
    let has_normal = train.iter().any(|s| !s.is_anomalous());
    if config.weights.rank > 0.0 && !(has_anomalous && has_normal) {
        return Err(Error::Data(
            "the ranking loss needs both normal and anomalous training sequences".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;

    let mut model = FaithLogModel::new(model_config.clone(), templates)?;
    let mut optimizer = Adam::new(model.params(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_0c4e);
    let stratify = config.weights.rank > 0.0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let batches = make_batches(train, config.batch_size, stratify, &mut rng);
        let mut sums = LossBreakdown::default();
        let mut total = 0.0;
        for batch in &batches {
            let members: Vec<&EventSequence> = batch.iter().map(|&i| &train[i]).collect();
            let pairs = if config.weights.rank > 0.0 {
                sample_pairs(&members, &mut rng)
            } else {
                Vec::new()
            };
            let objective = pool.install(|| {
                batch_objective(&model, &members, &config.weights, &pairs, true)
            })?;
            let grads = objective.grads.as_ref().expect("requested");
            optimizer.step(model.params_mut(), grads);
            total += objective.total;
            sums.ce += objective.terms.ce;
            sums.rank += objective.terms.rank;
            sums.kl += objective.terms.kl;
            sums.consistency += objective.terms.consistency;
        }
        let nb = batches.len() as f64;
        let terms = LossBreakdown {
            ce: sums.ce / nb,
            rank: sums.rank / nb,
            kl: sums.kl / nb,
            consistency: sums.consistency / nb,
        };
        let heldout_f1 = match heldout {
            Some(h) if !h.is_empty() => {
                Some(pool.install(|| detection_scores(&model, h))?.f1)
            }
            _ => None,
        };
        log::info!(
            "epoch {epoch}: total {:.4} ce {:.4} rank {:.4} kl {:.4} cons {:.4} f1 {:?}",
            total / nb,
            terms.ce,
            terms.rank,
            terms.kl,
            terms.consistency,
            heldout_f1
        );
        log.push(EpochRecord {
            epoch,
            total: total / nb,
            terms,
            heldout_f1,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        seed: config.seed,
    })
}
