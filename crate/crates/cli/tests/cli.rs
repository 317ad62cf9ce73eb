use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faithlog_core::Checkpoint;
use tempfile::TempDir;

macro_rules! a {
    ($($x:expr),* $(,)?) => { &[$(OsString::from($x)),*][..] };
}

fn faithlog(args: &[OsString]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faithlog"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[OsString]) -> String {
    let out = faithlog(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[OsString]) -> i32 {
    faithlog(args).status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

const TINY: &str = "epochs = 1\nbatch_size = 16\nd_model = 8\nn_heads = 2\nn_layers = 1\n";

struct Corpus {
    _dir: TempDir,
    root: PathBuf,
}

impl Corpus {
    fn new(n_sequences: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        ok(a!["generate", "--n-sequences", n_sequences, "--out", s(&root.join("corpus"))]);
        fs::write(root.join("tiny.cfg"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let ckpt = self.path(out);
        let mut args = a![
            "train",
            self.path("corpus/sequences.tsv"),
            "--templates",
            self.path("corpus/templates.tsv"),
            "--config",
            self.path("tiny.cfg"),
            "--out",
            &ckpt,
        ]
        .to_vec();
        args.extend(extra.iter().map(OsString::from));
        ok(&args);
        ckpt
    }
}

#[test]
fn parse_recovers_generated_templates() {
    let c = Corpus::new("60");
    let out = c.path("parsed.tsv");
    let stdout = ok(a![
        "parse",
        s(&c.path("corpus/corpus.log")),
        "--labels",
        s(&c.path("corpus/corpus.labels")),
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("templates: 55\n"), "{stdout}");
    assert!(stdout.contains("sequences: 60\n"), "{stdout}");
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# run_id="));
    let templates = fs::read_to_string(c.path("parsed.tsv.templates")).unwrap();
    assert_eq!(templates.lines().filter(|l| !l.starts_with('#')).count(), 55);
}

#[test]
fn parse_empty_and_missing_inputs() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.log");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("out.tsv");
    let stdout = ok(a!["parse", s(&empty), "--out", s(&out)]);
    assert!(stdout.contains("sequences: 0"));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().all(|l| l.starts_with('#')));

    assert_eq!(code(a!["parse", s(&dir.path().join("missing.log")), "--out", s(&out)]), 2);
}

#[test]
fn split_is_stratified() {
    let c = Corpus::new("200");
    let stdout = ok(a![
        "split",
        s(&c.path("corpus/sequences.tsv")),
        "--out",
        s(&c.path("split")),
    ]);
    assert!(stdout.contains("train: 160\ntest: 40\n"), "{stdout}");
}

#[test]
fn training_is_reproducible_and_records_ablation() {
    let c = Corpus::new("80");
    let a = c.train("a.json", &[]);
    let b = c.train("b.json", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(c.path("a.json.log.csv")).unwrap();
    assert!(log.contains("epoch,total,ce,rank,kl,consistency,heldout_f1\n"));

    let ablated = c.train("ablated.json", &["--no-negative-pathway"]);
    let ckpt = Checkpoint::load(&ablated).unwrap();
    assert!(!ckpt.header.negative_pathway);
    assert!(Checkpoint::load(&a).unwrap().header.negative_pathway);
}

#[test]
fn single_class_training_exits_3() {
    let c = Corpus::new("80");
    let normal: String = fs::read_to_string(c.path("corpus/sequences.tsv"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\t0\t"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(c.path("normal.tsv"), normal).unwrap();
    let args = a![
        "train",
        s(&c.path("normal.tsv")),
        "--config",
        s(&c.path("tiny.cfg")),
        "--out",
        s(&c.path("x.json")),
    ];
    assert_eq!(code(args), 3);
}

#[test]
fn unknown_config_key_is_rejected() {
    let c = Corpus::new("40");
    fs::write(c.path("bad.cfg"), "lamda2 = 0.1\n").unwrap();
    let out = faithlog(a![
        "train",
        s(&c.path("corpus/sequences.tsv")),
        "--config",
        s(&c.path("bad.cfg")),
        "--out",
        s(&c.path("x.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda2"));
}

#[test]
fn oracle_report_is_perfect_and_stable() {
    let c = Corpus::new("60");
    let oracle = c.path("oracle.json");
    Checkpoint::oracle("oracle").save(&oracle).unwrap();
    let data = c.path("corpus/sequences.tsv");
    let report = c.path("report.json");
    let run = || {
        ok(a!["evaluate", s(&data), "--checkpoint", s(&oracle), "--out", s(&report)]);
        fs::read(&report).unwrap()
    };
    let first = run();
    assert_eq!(first, run());

    let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let metrics = json["metrics"].as_object().unwrap();
    let keys: Vec<&str> = metrics.keys().map(String::as_str).collect();
    assert_eq!(keys, ["hr@1", "hr@3", "hr@5", "map@3", "map@5", "mrr", "pr@3", "pr@5", "sr"]);
    for k in ["hr@1", "hr@3", "hr@5", "map@3", "map@5", "mrr", "sr"] {
        assert_eq!(metrics[k].as_f64(), Some(100.0), "{k}");
    }
    assert_eq!(json["run_id"], "oracle");
}

#[test]
fn config_mismatch_exits_4() {
    let c = Corpus::new("60");
    let ckpt = c.train("m.json", &[]);
    fs::write(c.path("wide.cfg"), "d_model = 16\nn_heads = 2\n").unwrap();
    let args = a![
        "evaluate",
        s(&c.path("corpus/sequences.tsv")),
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&c.path("wide.cfg")),
        "--out",
        s(&c.path("r.json")),
    ];
    assert_eq!(code(args), 4);
    fs::write(c.path("junk.json"), "{\"header\": 1}").unwrap();
    let args = a![
        "detect",
        s(&c.path("corpus/sequences.tsv")),
        "--checkpoint",
        s(&c.path("junk.json")),
        "--out",
        s(&c.path("d.tsv")),
    ];
    assert_eq!(code(args), 4);
}

#[test]
fn perturb_verdicts_reconcile_with_sr() {
    let c = Corpus::new("60");
    let data = c.path("mixed.tsv");
    let mut text = fs::read_to_string(c.path("corpus/sequences.tsv")).unwrap();
    text.push_str("short-0\t1\t51;0\n");
    fs::write(&data, text).unwrap();
    let oracle = c.path("oracle.json");
    Checkpoint::oracle("o").save(&oracle).unwrap();
    let verdicts = c.path("verdicts.tsv");
    let run = || {
        let stdout = ok(a!["perturb", s(&data), "--checkpoint", s(&oracle), "--out", s(&verdicts)]);
        (stdout, fs::read(&verdicts).unwrap())
    };
    let (stdout, bytes) = run();
    assert_eq!(run().1, bytes);

    let text = String::from_utf8(bytes).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    let count = |v: &str| rows.iter().filter(|r| r[3] == v).count();
    let (sup, non) = (count("supportive"), count("non-supportive"));
    assert!(stdout.contains(&format!("supportive: {sup}\n")), "{stdout}");
    assert!(stdout.contains(&format!("evaluated: {}\n", sup + non)), "{stdout}");
    assert!(stdout.contains(&format!("sr: {:.4}\n", sup as f64 / (sup + non) as f64)));
    let short = rows.iter().find(|r| r[0] == "short-0").unwrap();
    assert_eq!(short[3], "skipped");
    assert!(stdout.contains("skipped: 1\n"));
}

#[test]
fn detect_writes_one_row_per_sequence() {
    let c = Corpus::new("40");
    let ckpt = c.train("m.json", &[]);
    let out = c.path("det.tsv");
    ok(a![
        "detect",
        s(&c.path("corpus/sequences.tsv")),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
        "--threads",
        "2",
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 41);
}
