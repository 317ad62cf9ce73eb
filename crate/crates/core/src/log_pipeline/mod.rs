//! Raw log lines to labeled event sequences.

mod dataset;
mod drain;
mod window;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    load_dataset, load_templates, read_dataset, read_raw_log, read_templates, write_dataset,
    write_templates, DatasetFormat,
};
pub use drain::{is_numeric_token, DrainConfig, DrainParser, ParsedLine};
pub use window::{sessionize, ParsedRecord, WindowConfig};

/// Wildcard literal used in template files.
pub const WILDCARD: &str = "<*>";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Wildcard,
    Literal(String),
}

impl Token {
    pub fn from_text(text: &str) -> Self {
        if text == WILDCARD {
            Token::Wildcard
        } else {
            Token::Literal(text.to_string())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Token::Wildcard => WILDCARD,
            Token::Literal(s) => s,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One raw log message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub line_no: u64,
    /// Epoch milliseconds, passed through untouched.
    pub timestamp: Option<i64>,
    pub source: String,
    pub content: String,
}

impl LogRecord {
    pub fn new(
        line_no: u64,
        timestamp: Option<i64>,
        source: impl Into<String>,
        content: impl Into<String>,
    ) -> Result<Self> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(Error::input(format!("log line {line_no} is empty")));
        }
        Ok(Self {
            line_no,
            timestamp,
            source: source.into(),
            content,
        })
    }
}

/// A parsed log template: literal tokens plus wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventTemplate {
    pub template_id: u32,
    pub tokens: Vec<Token>,
}

impl EventTemplate {
    pub fn new(template_id: u32, tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::input(format!(
                "template {template_id} has no tokens"
            )));
        }
        Ok(Self {
            template_id,
            tokens,
        })
    }

    /// Builds a template from whitespace-separated text, `<*>` marking wildcards.
    pub fn from_text(template_id: u32, text: &str) -> Result<Self> {
        Self::new(template_id, text.split_whitespace().map(Token::from_text).collect())
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn wildcard_count(&self) -> usize {
        self.tokens.iter().filter(|t| **t == Token::Wildcard).count()
    }

    pub fn render(&self) -> String {
        self.tokens
            .iter()
            .map(Token::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_bool(anomalous: bool) -> Self {
        if anomalous {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_digit(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }
}

/// An ordered window of template ids with its label and, for anomalous
/// windows, the positions of the root-cause events when known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSequence {
    pub sequence_id: String,
    events: Vec<u32>,
    label: Label,
    root_causes: Vec<usize>,
}

impl EventSequence {
    /// Validates the sequence invariants. Root causes are sorted and
    /// deduplicated.
    pub fn new(
        sequence_id: impl Into<String>,
        events: Vec<u32>,
        label: Label,
        mut root_causes: Vec<usize>,
    ) -> Result<Self> {
        let sequence_id = sequence_id.into();
        if sequence_id.is_empty() || sequence_id.contains(char::is_whitespace) {
            return Err(Error::input(format!(
                "sequence id {sequence_id:?} must be non-empty without whitespace"
            )));
        }
        if events.is_empty() {
            return Err(Error::input(format!("sequence {sequence_id} has no events")));
        }
        root_causes.sort_unstable();
        root_causes.dedup();
        if let Some(&bad) = root_causes.iter().find(|&&i| i >= events.len()) {
            return Err(Error::input(format!(
                "sequence {sequence_id}: root cause index {bad} out of range for length {}",
                events.len()
            )));
        }
        if !root_causes.is_empty() && label == Label::Normal {
            return Err(Error::input(format!(
                "sequence {sequence_id}: root causes given for a normal sequence"
            )));
        }
        Ok(Self {
            sequence_id,
            events,
            label,
            root_causes,
        })
    }

    pub fn events(&self) -> &[u32] {
        &self.events
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn root_causes(&self) -> &[usize] {
        &self.root_causes
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_anomalous(&self) -> bool {
        self.label.is_anomalous()
    }
}
