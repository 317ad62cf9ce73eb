//! Text formats for sequence datasets, template stores and raw logs.
//!
//! Sequence dataset, one record per line:
//!
//! ```text
//! <sequence_id>\t<0|1>\t<id>,<id>,...;<root>,<root>,...
//! ```
//!
//! Template store, one record per line:
//!
//! ```text
//! <template_id>\t<token> <token> ...
//! ```
//!
//! Lines starting with `#` are comments (output files carry a run-id header).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{EventSequence, EventTemplate, Label, LogRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Tab-separated sequence records (see module docs).
    Sequences,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequences" => Ok(DatasetFormat::Sequences),
            other => Err(Error::config(format!("unknown dataset format {other:?}"))),
        }
    }
}

fn header_lines(out: &mut impl Write, header: Option<&str>) -> Result<()> {
    if let Some(header) = header {
        for line in header.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

pub fn write_dataset(
    out: impl Write,
    sequences: &[EventSequence],
    header: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(out);
    header_lines(&mut out, header)?;
    for seq in sequences {
        let events = join(seq.events());
        let roots = join(seq.root_causes());
        writeln!(
            out,
            "{}\t{}\t{};{}",
            seq.sequence_id,
            seq.label().as_digit(),
            events,
            roots
        )?;
    }
    out.flush()?;
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: FromStr>(field: &str, line: usize, what: &str) -> Result<Vec<T>> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid {what} {v:?}")))
        })
        .collect()
}

pub fn read_dataset(input: impl Read) -> Result<Vec<EventSequence>> {
    let reader = BufReader::new(input);
    let mut sequences = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = fields[0];
        let label = match fields[1] {
            "0" => Label::Normal,
            "1" => Label::Anomalous,
            other => return Err(Error::parse(line_no, format!("invalid label {other:?}"))),
        };
        let (events, roots) = fields[2]
            .split_once(';')
            .ok_or_else(|| Error::parse(line_no, "missing ';' between events and root causes"))?;
        let events: Vec<u32> = parse_list(events, line_no, "template id")?;
        let roots: Vec<usize> = parse_list(roots, line_no, "root cause index")?;
        if let Some(bad) = roots.iter().find(|&&r| r >= events.len()) {
            return Err(Error::parse(
                line_no,
                format!(
                    "sequence {id}: root cause index {bad} out of range for length {}",
                    events.len()
                ),
            ));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(line_no, format!("duplicate sequence id {id}")));
        }
        let seq = EventSequence::new(id, events, label, roots)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        sequences.push(seq);
    }
    Ok(sequences)
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<EventSequence>> {
    match format {
        DatasetFormat::Sequences => read_dataset(File::open(path)?),
    }
}

pub fn write_templates(
    out: impl Write,
    templates: &[EventTemplate],
    header: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(out);
    header_lines(&mut out, header)?;
    for t in templates {
        writeln!(out, "{}\t{}", t.template_id, t.render())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_templates(input: impl Read) -> Result<Vec<EventTemplate>> {
    let reader = BufReader::new(input);
    let mut templates = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected <id>\\t<tokens>"))?;
        let id: u32 = id
            .parse()
            .map_err(|_| Error::parse(line_no, format!("invalid template id {id:?}")))?;
        templates.push(
            EventTemplate::from_text(id, text).map_err(|e| Error::parse(line_no, e.to_string()))?,
        );
    }
    Ok(templates)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<EventTemplate>> {
    read_templates(File::open(path)?)
}

/// Reads a raw log (one message per line) and an optional sidecar holding a
/// `0`/`1` tag per line. Blank lines are skipped, keeping their line numbers.
pub fn read_raw_log(
    log: impl Read,
    labels: Option<impl Read>,
    source: &str,
) -> Result<Vec<(LogRecord, Option<bool>)>> {
    let label_lines: Option<Vec<String>> = match labels {
        Some(r) => Some(BufReader::new(r).lines().collect::<std::io::Result<_>>()?),
        None => None,
    };
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(log).lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let tag = match &label_lines {
            None => None,
            Some(tags) => {
                let tag = tags.get(idx).ok_or_else(|| {
                    Error::parse(line_no, "label file has fewer lines than the log")
                })?;
                match tag.trim() {
                    "0" => Some(false),
                    "1" => Some(true),
                    other => {
                        return Err(Error::parse(line_no, format!("invalid label {other:?}")))
                    }
                }
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        out.push((LogRecord::new(line_no as u64, None, source, line)?, tag));
    }
    Ok(out)
}
