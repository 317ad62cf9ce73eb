//! Python bindings: synthetic corpora, log parsing, training, detection and
//! faithfulness evaluation.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use faithlog_core as core;
use faithlog_core::{Detector, Error, EventTemplate, ExperimentConfig};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "EventSequence", from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: core::EventSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (sequence_id, events, anomalous, root_causes=Vec::new()))]
    fn new(sequence_id: String, events: Vec<u32>, anomalous: bool, root_causes: Vec<usize>) -> PyResult<Self> {
        let label = core::Label::from_bool(anomalous);
        core::EventSequence::new(sequence_id, events, label, root_causes)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[getter]
    fn sequence_id(&self) -> &str {
        &self.inner.sequence_id
    }

    #[getter]
    fn events(&self) -> Vec<u32> {
        self.inner.events().to_vec()
    }

    #[getter]
    fn anomalous(&self) -> bool {
        self.inner.is_anomalous()
    }

    #[getter]
    fn root_causes(&self) -> Vec<usize> {
        self.inner.root_causes().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "EventSequence({:?}, n={}, anomalous={})",
            self.inner.sequence_id,
            self.inner.len(),
            self.inner.is_anomalous()
        )
    }
}

fn unwrap_all(seqs: &[PySequence]) -> Vec<core::EventSequence> {
    seqs.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_all(seqs: Vec<core::EventSequence>) -> Vec<PySequence> {
    seqs.into_iter().map(|inner| PySequence { inner }).collect()
}

fn parse_templates(texts: &[String]) -> PyResult<Vec<EventTemplate>> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| EventTemplate::from_text(i as u32, t).map_err(to_py))
        .collect()
}

/// Generated corpus: rendered log lines plus labeled sequences.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: core::SynthDataset,
}

#[pymethods]
impl PyCorpus {
    /// Template texts, indexed by template id.
    #[getter]
    fn templates(&self) -> Vec<String> {
        self.inner.templates.iter().map(EventTemplate::render).collect()
    }

    #[getter]
    fn sequences(&self) -> Vec<PySequence> {
        wrap_all(self.inner.sequences.clone())
    }

    #[getter]
    fn lines(&self) -> Vec<String> {
        self.inner.lines.clone()
    }

    #[getter]
    fn line_labels(&self) -> Vec<bool> {
        self.inner.line_labels.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (n_sequences=2000, seq_length=20, n_templates=50, n_anomaly_templates=5, anomaly_rate=0.3, noise_rate=0.05, seed=7))]
fn generate(
    n_sequences: usize,
    seq_length: usize,
    n_templates: usize,
    n_anomaly_templates: usize,
    anomaly_rate: f64,
    noise_rate: f64,
    seed: u64,
) -> PyResult<PyCorpus> {
    let cfg = core::SynthConfig {
        n_templates,
        n_anomaly_templates,
        n_sequences,
        seq_length,
        anomaly_rate,
        noise_rate,
        seed,
    };
    core::generate(&cfg).map(|inner| PyCorpus { inner }).map_err(to_py)
}

/// Stratified split into `(train, test)`.
#[pyfunction]
#[pyo3(signature = (sequences, train_fraction=0.8, seed=7))]
fn split(sequences: Vec<PySequence>, train_fraction: f64, seed: u64) -> PyResult<(Vec<PySequence>, Vec<PySequence>)> {
    let (train, test) = core::split(&unwrap_all(&sequences), train_fraction, seed).map_err(to_py)?;
    Ok((wrap_all(train), wrap_all(test)))
}

#[pyfunction]
fn positional_encoding(i: usize, d_model: usize) -> PyResult<Vec<f64>> {
    core::positional_encoding(i, d_model).map_err(to_py)
}

/// Streaming template miner.
#[pyclass(name = "DrainParser")]
struct PyDrainParser {
    inner: core::DrainParser,
}

#[pymethods]
impl PyDrainParser {
    #[new]
    #[pyo3(signature = (depth=4, similarity_threshold=0.4, max_children=100))]
    fn new(depth: usize, similarity_threshold: f64, max_children: usize) -> PyResult<Self> {
        let config = core::log_pipeline::DrainConfig {
            depth,
            similarity_threshold,
            max_children,
        };
        core::DrainParser::new(config)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Returns `(template_id, parameters)`.
    fn parse(&mut self, line: &str) -> (u32, Vec<String>) {
        let parsed = self.inner.parse_content(line);
        (parsed.template_id, parsed.parameters)
    }

    #[getter]
    fn templates(&self) -> Vec<String> {
        self.inner.templates().iter().map(EventTemplate::render).collect()
    }
}

/// A trained or freshly initialized detector.
#[pyclass(name = "Model")]
struct PyModel {
    inner: core::FaithLogModel,
}

#[pymethods]
impl PyModel {
    /// Trains on `train`. `config` holds flat `key = value` text.
    #[staticmethod]
    #[pyo3(signature = (templates, train, heldout=None, config=None, seed=None, negative_pathway=true))]
    fn train(
        py: Python<'_>,
        templates: Vec<String>,
        train: Vec<PySequence>,
        heldout: Option<Vec<PySequence>>,
        config: Option<&str>,
        seed: Option<u64>,
        negative_pathway: bool,
    ) -> PyResult<(Self, Vec<BTreeMap<String, f64>>)> {
        let templates = parse_templates(&templates)?;
        let mut cfg = match config {
            Some(text) => ExperimentConfig::parse(text).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.model.negative_pathway = negative_pathway;
        if !negative_pathway {
            cfg.train.weights = core::LossWeights::detection_only();
        }
        let train = unwrap_all(&train);
        let heldout = heldout.map(|h| unwrap_all(&h));
        let outcome = py
            .detach(|| core::fit(&cfg.model, &templates, &train, heldout.as_deref(), &cfg.train))
            .map_err(to_py)?;
        let log = outcome
            .log
            .iter()
            .map(|r| {
                let mut row = BTreeMap::from([
                    ("epoch".to_string(), r.epoch as f64),
                    ("total".to_string(), r.total),
                    ("ce".to_string(), r.terms.ce),
                    ("rank".to_string(), r.terms.rank),
                    ("kl".to_string(), r.terms.kl),
                    ("consistency".to_string(), r.terms.consistency),
                ]);
                if let Some(f1) = r.heldout_f1 {
                    row.insert("heldout_f1".to_string(), f1);
                }
                row
            })
            .collect();
        Ok((Self { inner: outcome.model }, log))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = core::Checkpoint::load(path).map_err(to_py)?;
        ckpt.to_model().map(|inner| Self { inner }).map_err(to_py)
    }

    #[pyo3(signature = (path, run_id="python"))]
    fn save(&self, path: &str, run_id: &str) -> PyResult<()> {
        core::Checkpoint::from_model(&self.inner, run_id)
            .save(path)
            .map_err(to_py)
    }

    /// Confidence, decision, signed attention and locator scores.
    fn detect<'py>(&self, py: Python<'py>, sequence: &PySequence) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let det = self.inner.detect(&sequence.inner).map_err(to_py)?;
        let out = pyo3::types::PyDict::new(py);
        out.set_item("confidence", det.confidence)?;
        out.set_item("anomalous", det.decision.is_anomalous())?;
        out.set_item("signed_scores", det.attention.signed_scores)?;
        out.set_item("attention", det.attention.distribution)?;
        out.set_item("e_max", det.attention.argmax_index)?;
        out.set_item("locator_scores", det.locator_scores)?;
        Ok(out)
    }

    /// Confidence with event `index` removed.
    fn confidence_without(&self, sequence: &PySequence, index: usize) -> PyResult<f64> {
        self.inner
            .detect_without(&sequence.inner, index)
            .map(|d| d.confidence)
            .map_err(to_py)
    }

    /// Localization and support-rate metrics, as percentages.
    #[pyo3(signature = (sequences, ks=vec![1, 3, 5]))]
    fn evaluate(&self, py: Python<'_>, sequences: Vec<PySequence>, ks: Vec<usize>) -> PyResult<BTreeMap<String, f64>> {
        let data = unwrap_all(&sequences);
        let model = &self.inner;
        py.detach(|| core::evaluate_faithfulness(model as &dyn Detector, &data, &ks))
            .map(|r| r.metric_table())
            .map_err(to_py)
    }

    /// Held-out detection precision, recall and F1.
    fn detection_scores(&self, sequences: Vec<PySequence>) -> PyResult<(f64, f64, f64)> {
        let s = core::faithfulness::detection_scores(&self.inner, &unwrap_all(&sequences)).map_err(to_py)?;
        Ok((s.precision, s.recall, s.f1))
    }
}

#[pymodule]
fn faithlog(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyDrainParser>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(positional_encoding, m)?)?;
    Ok(())
}
