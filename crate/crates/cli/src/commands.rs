use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use sha2::{Digest, Sha256};

use faithlog_core::faithfulness::{
    localize, perturbation_verdicts, support_rate_from, write_verdicts, Detector, OracleDetector,
};
use faithlog_core::log_pipeline::{
    load_dataset, load_templates, read_raw_log, sessionize, write_dataset, write_templates,
    DatasetFormat, DrainConfig, DrainParser, ParsedRecord, WindowConfig,
};
use faithlog_core::model::CheckpointKind;
use faithlog_core::training::write_training_log;
use faithlog_core::{
    evaluate_faithfulness, fit, generate, split, Checkpoint, Error, EventSequence,
    ExperimentConfig, SynthConfig,
};

use crate::{Cli, Command, Common, EvalArgs, EvaluateArgs, GenerateArgs, ParseArgs, SplitArgs, TrainArgs};

const DEFAULT_SEED: u64 = 7;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Input(_) | Error::Parse { .. } | Error::Json(_) => 2,
                Error::Config(_) | Error::Data(_) => 3,
                Error::Checkpoint(_) | Error::Shape(_) | Error::Vocabulary(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

/// Hex digest of the canonical configuration text; the text includes the seed.
pub fn run_id(kind: &str, canonical: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(b"\n");
    h.update(canonical.as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn header(command: &str, run_id: &str) -> String {
    format!("run_id={run_id}\ncommand={command}")
}

fn out_path(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| anyhow!(Error::Input("--out is required".into())))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    File::create(path)
        .map_err(Error::from)
        .with_context(|| format!("cannot create {}", path.display()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path)
        .map_err(Error::from)
        .with_context(|| format!("cannot read {}", path.display()))
}

fn load_sequences(path: &Path) -> Result<Vec<EventSequence>> {
    load_dataset(path, DatasetFormat::Sequences).with_context(|| format!("dataset {}", path.display()))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.train.threads = common.threads;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    // Training builds its own pool; this one serves evaluation.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build_global();
    match &cli.command {
        Command::Parse(a) => parse(&cli.common, a),
        Command::Generate(a) => generate_corpus(&cli.common, a),
        Command::Split(a) => split_dataset(&cli.common, a),
        Command::Train(a) => train(&cli.common, a),
        Command::Detect(a) => detect(&cli.common, a),
        Command::Evaluate(a) => evaluate(&cli.common, a),
        Command::Perturb(a) => perturb(&cli.common, a),
    }
}

fn parse(common: &Common, args: &ParseArgs) -> Result<()> {
    let out = out_path(common)?;
    let drain = DrainConfig {
        depth: args.depth,
        similarity_threshold: args.similarity_threshold,
        max_children: args.max_children,
    };
    let window = WindowConfig::Count {
        size: args.window,
        stride: args.stride.unwrap_or(args.window),
    };
    window.validate()?;
    let mut parser = DrainParser::new(drain)?;

    let log = open(&args.log)?;
    let labels = args.labels.as_deref().map(open).transpose()?;
    let source = args.log.display().to_string();
    let records = read_raw_log(log, labels, &source)?;
    let parsed: Vec<ParsedRecord> = records
        .iter()
        .map(|(record, tag)| ParsedRecord {
            line_no: record.line_no,
            timestamp: record.timestamp,
            template_id: parser.parse_line(record).template_id,
            anomalous: *tag,
        })
        .collect();
    let sequences = sessionize(&parsed, window)?;

    let canonical = format!(
        "depth={} threshold={:?} max_children={} window={:?}",
        args.depth, args.similarity_threshold, args.max_children, window
    );
    let head = header("parse", &run_id("parse", &canonical));
    let templates_path = args
        .templates
        .clone()
        .unwrap_or_else(|| with_suffix(out, "templates"));
    write_templates(create(&templates_path)?, parser.templates(), Some(&head))?;
    write_dataset(create(out)?, &sequences, Some(&head))?;
    println!("templates: {}", parser.num_templates());
    println!("sequences: {}", sequences.len());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn generate_corpus(common: &Common, args: &GenerateArgs) -> Result<()> {
    let dir = out_path(common)?;
    let config = SynthConfig {
        n_templates: args.n_templates,
        n_anomaly_templates: args.n_anomaly_templates,
        n_sequences: args.n_sequences,
        seq_length: args.seq_length,
        anomaly_rate: args.anomaly_rate,
        noise_rate: args.noise_rate,
        seed: common.seed.unwrap_or(DEFAULT_SEED),
    };
    let data = generate(&config)?;
    let canonical = serde_json::to_string(&config)?;
    let id = run_id("generate", &canonical);
    let head = header("generate", &id);
    fs::create_dir_all(dir).map_err(Error::from)?;
    data.write_log(create(&dir.join("corpus.log"))?)?;
    data.write_labels(create(&dir.join("corpus.labels"))?)?;
    write_dataset(create(&dir.join("sequences.tsv"))?, &data.sequences, Some(&head))?;
    write_templates(create(&dir.join("templates.tsv"))?, &data.templates, Some(&head))?;
    let manifest = serde_json::json!({ "run_id": id, "config": config });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(Error::from)?;
    let anomalous = data.sequences.iter().filter(|s| s.is_anomalous()).count();
    println!("templates: {}", data.templates.len());
    println!("sequences: {} ({} anomalous)", data.sequences.len(), anomalous);
    println!("lines: {}", data.lines.len());
    Ok(())
}

fn split_dataset(common: &Common, args: &SplitArgs) -> Result<()> {
    let dir = out_path(common)?;
    let data = load_sequences(&args.dataset)?;
    let seed = common.seed.unwrap_or(DEFAULT_SEED);
    let (train, test) = split(&data, args.train_fraction, seed)?;
    let head = header(
        "split",
        &run_id("split", &format!("train_fraction={:?}\nseed={seed}", args.train_fraction)),
    );
    fs::create_dir_all(dir).map_err(Error::from)?;
    write_dataset(create(&dir.join("train.tsv"))?, &train, Some(&head))?;
    write_dataset(create(&dir.join("test.tsv"))?, &test, Some(&head))?;
    println!("train: {}", train.len());
    println!("test: {}", test.len());
    Ok(())
}

fn train(common: &Common, args: &TrainArgs) -> Result<()> {
    let out = out_path(common)?;
    let mut cfg = load_config(common)?;
    if args.no_negative_pathway {
        cfg.model.negative_pathway = false;
    }
    let templates = match &args.templates {
        Some(p) => load_templates(p).with_context(|| format!("templates {}", p.display()))?,
        None => Vec::new(),
    };
    let data = load_sequences(&args.dataset)?;
    let heldout = args.heldout.as_deref().map(load_sequences).transpose()?;
    let id = run_id("train", &cfg.to_string());
    let start = std::time::Instant::now();
    let outcome = fit(&cfg.model, &templates, &data, heldout.as_deref(), &cfg.train)?;
    Checkpoint::from_model(&outcome.model, &id).save(out)?;
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(out, "log.csv"));
    write_training_log(create(&log_path)?, &outcome.log, Some(&header("train", &id)))?;
    println!("run_id: {id}");
    println!("epochs: {}", outcome.log.len());
    if let Some(last) = outcome.log.last() {
        println!("final loss: {:.6}", last.total);
        if let Some(f1) = last.heldout_f1 {
            println!("heldout f1: {f1:.4}");
        }
    }
    println!("seconds: {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}

struct Loaded {
    detector: Box<dyn Detector>,
    run_id: String,
}

fn load_detector(common: &Common, args: &EvalArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    if common.config.is_some() && ckpt.header.kind == CheckpointKind::Model {
        let cfg = load_config(common)?.model;
        let h = &ckpt.header;
        let found = (h.d_model, h.n_heads, h.n_layers, h.negative_pathway);
        let expected = (cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.negative_pathway);
        if found != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint (d_model, n_heads, n_layers, negative_pathway) = {found:?}, config expects {expected:?}"
            ))
            .into());
        }
    }
    let detector: Box<dyn Detector> = match ckpt.header.kind {
        CheckpointKind::Model => Box::new(ckpt.to_model()?),
        CheckpointKind::Oracle => Box::new(OracleDetector),
    };
    Ok(Loaded {
        detector,
        run_id: ckpt.header.run_id.clone(),
    })
}

fn detect(common: &Common, args: &EvalArgs) -> Result<()> {
    use std::io::Write;
    let out = out_path(common)?;
    let loaded = load_detector(common, args)?;
    let data = load_sequences(&args.dataset)?;
    let mut w = std::io::BufWriter::new(create(out)?);
    for line in header("detect", &loaded.run_id).lines() {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "sequence_id\tp\tdecision\te_max\tsigned_scores")?;
    let mut flagged = 0;
    for seq in &data {
        let det = loaded.detector.detect(seq)?;
        flagged += usize::from(det.decision.is_anomalous());
        let scores: Vec<String> = det
            .attention
            .signed_scores
            .iter()
            .map(|a| format!("{a:.6}"))
            .collect();
        writeln!(
            w,
            "{}\t{:.17e}\t{}\t{}\t{}",
            seq.sequence_id,
            det.confidence,
            det.decision.as_digit(),
            det.attention.argmax_index,
            scores.join(",")
        )?;
    }
    w.flush()?;
    println!("sequences: {}", data.len());
    println!("detected anomalous: {flagged}");
    Ok(())
}

fn evaluate(common: &Common, args: &EvaluateArgs) -> Result<()> {
    let out = out_path(common)?;
    let loaded = load_detector(common, &args.eval)?;
    let data = load_sequences(&args.eval.dataset)?;
    let report = evaluate_faithfulness(loaded.detector.as_ref(), &data, &args.ks)?;
    report.write_json(create(out)?, &loaded.run_id)?;
    if let Some(path) = &args.verdicts {
        write_verdicts(
            create(path)?,
            &report.verdicts,
            &report.localizations,
            Some(&header("evaluate", &loaded.run_id)),
        )?;
    }
    for (k, v) in report.metric_table() {
        println!("{k}: {v:.2}");
    }
    Ok(())
}

fn perturb(common: &Common, args: &EvalArgs) -> Result<()> {
    let out = out_path(common)?;
    let loaded = load_detector(common, args)?;
    let data = load_sequences(&args.dataset)?;
    let detector = loaded.detector.as_ref();
    let localizations = localize(detector, &data)?.by_attention;
    let verdicts = perturbation_verdicts(detector, &data)?;
    write_verdicts(
        create(out)?,
        &verdicts,
        &localizations,
        Some(&header("perturb", &loaded.run_id)),
    )?;
    let support = support_rate_from(verdicts)?;
    let skipped = support
        .verdicts
        .iter()
        .filter(|v| v.kind == faithlog_core::faithfulness::VerdictKind::SkippedShort)
        .count();
    println!("supportive: {}", support.supportive);
    println!("evaluated: {}", support.evaluated);
    println!("skipped: {skipped}");
    println!("sr: {:.4}", support.sr);
    Ok(())
}
