//! Synthetic log corpora with known templates and injected root causes.
//!
//! Normal sequences are walks of a sparse random Markov chain over the normal
//! templates. An anomalous sequence is a normal walk with one or two
//! positions (never the first) overwritten by anomaly templates; those
//! positions are its root-cause truth. Every event is also rendered as a
//! text line with random numeric parameters, one sequence after another, so
//! the corpus can be fed back through the parser.
//!
//! Template ids `0..n_templates` are normal, the next `n_anomaly_templates`
//! ids are anomaly templates. Each template has its own pair of leading
//! words, so the parser recovers every template exactly.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_pipeline::{EventSequence, EventTemplate, Label, Token};

/// Fraction of non-zero entries in each transition row.
pub const TRANSITION_DENSITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_templates: usize,
    pub n_anomaly_templates: usize,
    pub n_sequences: usize,
    pub seq_length: usize,
    pub anomaly_rate: f64,
    /// Probability a normal event is replaced by a uniformly drawn one.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_templates: 50,
            n_anomaly_templates: 5,
            n_sequences: 2000,
            seq_length: 20,
            anomaly_rate: 0.3,
            noise_rate: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_templates == 0 || self.n_anomaly_templates == 0 || self.n_sequences == 0 {
            return Err(Error::config("template and sequence counts must be positive"));
        }
        if self.seq_length < 2 {
            return Err(Error::config(format!(
                "seq_length must be at least 2, got {}",
                self.seq_length
            )));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate < 1.0) {
            return Err(Error::config(format!(
                "anomaly_rate must lie in (0, 1), got {}",
                self.anomaly_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!(
                "noise_rate must lie in [0, 1], got {}",
                self.noise_rate
            )));
        }
        if self.anomaly_rate * (self.n_sequences as f64) < 1.0 {
            return Err(Error::config(format!(
                "anomaly_rate {} over {} sequences yields no anomalous sequence",
                self.anomaly_rate, self.n_sequences
            )));
        }
        Ok(())
    }

    pub fn n_anomalous(&self) -> usize {
        ((self.anomaly_rate * self.n_sequences as f64).round() as usize).min(self.n_sequences)
    }

    pub fn total_templates(&self) -> usize {
        self.n_templates + self.n_anomaly_templates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub templates: Vec<EventTemplate>,
    pub sequences: Vec<EventSequence>,
    /// One rendered line per event, sequences concatenated in order.
    pub lines: Vec<String>,
    /// Whether each line is an injected root cause.
    pub line_labels: Vec<bool>,
}

impl SynthDataset {
    pub fn write_log(&self, out: impl Write) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        for line in &self.lines {
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Label sidecar, one `0`/`1` per log line.
    pub fn write_labels(&self, out: impl Write) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        for &l in &self.line_labels {
            writeln!(out, "{}", u8::from(l))?;
        }
        out.flush()?;
        Ok(())
    }
}

const NORMAL_SUBJECTS: [&str; 10] = [
    "node", "scheduler", "storage", "network", "cache", "session", "worker", "queue", "auth",
    "replica",
];
const NORMAL_VERBS: [&str; 8] = [
    "started", "completed", "received", "sent", "opened", "closed", "synced", "allocated",
];
const NORMAL_OBJECTS: [&str; 6] = ["request", "block", "job", "packet", "handle", "lease"];

const ANOMALY_SUBJECTS: [&str; 5] = ["kernel", "disk", "memory", "link", "watchdog"];
const ANOMALY_VERBS: [&str; 4] = ["panic", "failure", "corruption", "timeout"];
const ANOMALY_OBJECTS: [&str; 3] = ["detected", "reported", "escalated"];

fn alpha_suffix(mut n: usize) -> String {
    let mut out = String::new();
    while n > 0 {
        n -= 1;
        out.insert(0, (b'a' + (n % 26) as u8) as char);
        n /= 26;
    }
    out
}

fn template_text(index: usize, subjects: &[&str], verbs: &[&str], objects: &[&str]) -> String {
    let pairs = subjects.len() * verbs.len();
    let subject = format!("{}{}", subjects[index % subjects.len()], alpha_suffix(index / pairs));
    let verb = verbs[(index / subjects.len()) % verbs.len()];
    let object = objects[index % objects.len()];
    match index % 3 {
        0 => format!("{subject} {verb} {object} id <*>"),
        1 => format!("{subject} {verb} {object} id <*> after <*> ms"),
        _ => format!("{subject} {verb} {object} id <*> size <*> retries <*>"),
    }
}

/// The generator's template store.
pub fn synth_templates(config: &SynthConfig) -> Result<Vec<EventTemplate>> {
    let normal = (0..config.n_templates).map(|i| {
        template_text(i, &NORMAL_SUBJECTS, &NORMAL_VERBS, &NORMAL_OBJECTS)
    });
    let anomaly = (0..config.n_anomaly_templates).map(|i| {
        template_text(i, &ANOMALY_SUBJECTS, &ANOMALY_VERBS, &ANOMALY_OBJECTS)
    });
    normal
        .chain(anomaly)
        .enumerate()
        .map(|(id, text)| EventTemplate::from_text(id as u32, &text))
        .collect()
}

fn transition_matrix(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, f64)>> {
    let k = ((n as f64 * TRANSITION_DENSITY).round() as usize).clamp(1, n);
    let all: Vec<usize> = (0..n).collect();
    (0..n)
        .map(|_| {
            let mut targets: Vec<usize> = all.choose_multiple(rng, k).copied().collect();
            targets.sort_unstable();
            let weights: Vec<f64> = targets.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = weights.iter().sum();
            targets
                .into_iter()
                .zip(weights)
                .map(|(t, w)| (t, w / sum))
                .collect()
        })
        .collect()
}

fn step(row: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.gen();
    for &(t, p) in row {
        if u < p {
            return t;
        }
        u -= p;
    }
    row.last().expect("non-empty row").0
}

fn render(template: &EventTemplate, rng: &mut ChaCha8Rng) -> String {
    template
        .tokens
        .iter()
        .map(|t| match t {
            Token::Wildcard => rng.gen_range(0..100_000u32).to_string(),
            Token::Literal(s) => s.clone(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let templates = synth_templates(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chain = transition_matrix(config.n_templates, &mut rng);
    let mut order: Vec<usize> = (0..config.n_sequences).collect();
    order.shuffle(&mut rng);
    let mut anomalous = vec![false; config.n_sequences];
    for &i in &order[..config.n_anomalous()] {
        anomalous[i] = true;
    }

    let mut sequences = Vec::with_capacity(config.n_sequences);
    let mut lines = Vec::with_capacity(config.n_sequences * config.seq_length);
    let mut line_labels = Vec::with_capacity(lines.capacity());
    for (index, &is_anomalous) in anomalous.iter().enumerate() {
        let mut rng = sequence_rng(config.seed, index);
        let mut events = Vec::with_capacity(config.seq_length);
        let mut state = rng.gen_range(0..config.n_templates);
        events.push(state);
        for _ in 1..config.seq_length {
            state = step(&chain[state], &mut rng);
            events.push(state);
        }
        for e in events.iter_mut() {
            if rng.gen::<f64>() < config.noise_rate {
                *e = rng.gen_range(0..config.n_templates);
            }
        }
        let mut roots = Vec::new();
        if is_anomalous {
            let count = rng.gen_range(1..=2).min(config.seq_length - 1);
            let positions: Vec<usize> = (1..config.seq_length).collect();
            roots = positions.choose_multiple(&mut rng, count).copied().collect();
            roots.sort_unstable();
            for &r in &roots {
                events[r] = config.n_templates + rng.gen_range(0..config.n_anomaly_templates);
            }
        }
        for (pos, &e) in events.iter().enumerate() {
            lines.push(render(&templates[e], &mut rng));
            line_labels.push(roots.contains(&pos));
        }
        sequences.push(EventSequence::new(
            format!("seq-{index:05}"),
            events.into_iter().map(|e| e as u32).collect(),
            Label::from_bool(is_anomalous),
            roots,
        )?);
    }
    Ok(SynthDataset {
        templates,
        sequences,
        lines,
        line_labels,
    })
}

/// Stratified split into `(train, test)`; each side keeps dataset order.
pub fn split(
    data: &[EventSequence],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<EventSequence>, Vec<EventSequence>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; data.len()];
    for anomalous in [false, true] {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data[i].is_anomalous() == anomalous)
            .collect();
        idx.shuffle(&mut rng);
        let take = (train_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = data
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    let train: Vec<EventSequence> = train.into_iter().map(|(s, _)| s).collect();
    let test: Vec<EventSequence> = test.into_iter().map(|(s, _)| s).collect();
    for (name, part) in [("train", &train), ("test", &test)] {
        if !part.iter().any(EventSequence::is_anomalous) {
            return Err(Error::Data(format!("{name} split has no anomalous sequence")));
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_sequences: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn anomaly_counts() {
        let d = generate(&SynthConfig::default()).unwrap();
        let anomalous: Vec<_> = d.sequences.iter().filter(|s| s.is_anomalous()).collect();
        assert_eq!(anomalous.len(), 600);
        assert!(anomalous
            .iter()
            .all(|s| (1..=2).contains(&s.root_causes().len()) && !s.root_causes().contains(&0)));
        assert_eq!(d.lines.len(), 2000 * 20);
    }

    #[test]
    fn anomaly_templates_only_at_roots() {
        let cfg = small();
        let d = generate(&cfg).unwrap();
        let boundary = cfg.n_templates as u32;
        for s in &d.sequences {
            for (i, &e) in s.events().iter().enumerate() {
                assert_eq!(e >= boundary, s.root_causes().contains(&i), "{}", s.sequence_id);
            }
        }
    }

    #[test]
    fn leading_pairs_are_unique() {
        let cfg = SynthConfig {
            n_templates: 200,
            n_anomaly_templates: 30,
            ..small()
        };
        let t = synth_templates(&cfg).unwrap();
        let mut pairs: Vec<_> = t
            .iter()
            .map(|t| (t.tokens[0].clone(), t.tokens[1].clone()))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 230);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SynthConfig { anomaly_rate: 0.0, ..small() },
            SynthConfig { anomaly_rate: 1.0, ..small() },
            SynthConfig { seq_length: 1, ..small() },
            SynthConfig { n_sequences: 10, anomaly_rate: 0.05, ..small() },
            SynthConfig { n_templates: 0, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn split_is_stratified() {
        let d = generate(&SynthConfig::default()).unwrap();
        let (train, test) = split(&d.sequences, 0.8, 1).unwrap();
        assert_eq!((train.len(), test.len()), (1600, 400));
        let anomalous = |s: &[EventSequence]| s.iter().filter(|x| x.is_anomalous()).count();
        assert_eq!(anomalous(&train), 480);
        assert_eq!(anomalous(&test), 120);
        let mut ids: Vec<_> = train.iter().chain(&test).map(|s| s.sequence_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 2000);
        assert_eq!(split(&d.sequences, 0.8, 1).unwrap().0, train);
        assert!(split(&d.sequences, 1.0, 1).is_err());
    }

    #[test]
    fn split_without_anomalies_fails() {
        let data: Vec<EventSequence> = (0..5)
            .map(|i| EventSequence::new(format!("s{i}"), vec![1, 2], Label::Normal, vec![]).unwrap())
            .collect();
        assert!(matches!(split(&data, 0.5, 0), Err(Error::Data(_))));
    }
}
