//! Fixed-depth prefix tree template miner.
//!
//! Lines are routed first by token count and then by their leading tokens,
//! `depth - 2` of them, down to a leaf holding candidate templates. The line
//! joins the most similar template in that leaf when the similarity reaches
//! the threshold, generalizing divergent literal positions to wildcards.
//! Otherwise a new template is created.
//!
//! ```text
//!                 root
//!                  |
//!            token count (4)
//!                  |
//!            "Connection"
//!                  |
//!                "from"
//!                  |
//!     [Connection from <*> failed]
//! ```

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{EventTemplate, LogRecord, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrainConfig {
    /// Total tree depth including the root and the leaf level.
    pub depth: usize,
    pub similarity_threshold: f64,
    /// Maximum literal children per internal node; overflow goes to `<*>`.
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::config(format!(
                "parser depth must be at least 3, got {}",
                self.depth
            )));
        }
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold < 1.0) {
            return Err(Error::config(format!(
                "similarity threshold must lie in (0, 1), got {}",
                self.similarity_threshold
            )));
        }
        if self.max_children == 0 {
            return Err(Error::config("max_children must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    children: BTreeMap<Token, Node>,
    templates: Vec<u32>,
}

/// Result of parsing one line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLine {
    pub template_id: u32,
    /// Original tokens at the wildcard positions of the matched template.
    pub parameters: Vec<String>,
}

/// Parser state. Mutated by every call to [`DrainParser::parse_line`]; use
/// one parser per input stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DrainParser {
    config: DrainConfig,
    by_length: BTreeMap<usize, Node>,
    templates: Vec<EventTemplate>,
    by_tokens: HashMap<Vec<Token>, u32>,
}

/// Tokens made only of digits and numeric punctuation (counters, sizes,
/// dotted addresses) are masked before routing.
pub fn is_numeric_token(token: &str) -> bool {
    token.bytes().any(|b| b.is_ascii_digit())
        && token
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b',' | b':' | b'-' | b'+'))
}

fn tokenize(content: &str) -> (Vec<&str>, Vec<Token>) {
    let raw: Vec<&str> = content.split_whitespace().collect();
    let masked = raw
        .iter()
        .map(|t| {
            if is_numeric_token(t) || *t == super::WILDCARD {
                Token::Wildcard
            } else {
                Token::Literal((*t).to_string())
            }
        })
        .collect();
    (raw, masked)
}

impl DrainParser {
    pub fn new(config: DrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            by_length: BTreeMap::new(),
            templates: Vec::new(),
            by_tokens: HashMap::new(),
        })
    }

    pub fn config(&self) -> &DrainConfig {
        &self.config
    }

    /// Templates indexed by id.
    pub fn templates(&self) -> &[EventTemplate] {
        &self.templates
    }

    pub fn template(&self, id: u32) -> Option<&EventTemplate> {
        self.templates.get(id as usize)
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn parse_line(&mut self, record: &LogRecord) -> ParsedLine {
        self.parse_content(&record.content)
    }

    /// Parse raw message text. Blank input maps to a single wildcard template.
    pub fn parse_content(&mut self, content: &str) -> ParsedLine {
        let (raw, mut tokens) = tokenize(content);
        let raw = if raw.is_empty() {
            tokens.push(Token::Wildcard);
            vec![""]
        } else {
            raw
        };

        let prefix_levels = (self.config.depth - 2).min(tokens.len());
        let max_children = self.config.max_children;
        let mut node = self.by_length.entry(tokens.len()).or_default();
        for token in tokens.iter().take(prefix_levels) {
            let key = if node.children.contains_key(token) {
                token.clone()
            } else if *token == Token::Wildcard {
                Token::Wildcard
            } else {
                let literal_children = node
                    .children
                    .keys()
                    .filter(|k| **k != Token::Wildcard)
                    .count();
                if literal_children < max_children {
                    token.clone()
                } else {
                    Token::Wildcard
                }
            };
            node = node.children.entry(key).or_default();
        }

        // Prefer a template the line already fits; otherwise the most similar.
        let mut best: Option<(bool, f64, usize, u32)> = None;
        for &id in &node.templates {
            let template = &self.templates[id as usize];
            let (fits, sim) = similarity(&template.tokens, &tokens);
            let wildcards = template.wildcard_count();
            let candidate = (fits, sim, wildcards, id);
            let better = match best {
                None => true,
                Some((bf, bs, bw, _)) => (fits, sim, wildcards) > (bf, bs, bw),
            };
            if better {
                best = Some(candidate);
            }
        }

        let chosen = match best {
            Some((true, _, _, id)) => Some(id),
            Some((false, sim, _, id)) if sim >= self.config.similarity_threshold => Some(id),
            _ => None,
        };

        let template_id = match chosen {
            Some(id) => {
                let current = &self.templates[id as usize].tokens;
                let merged: Vec<Token> = current
                    .iter()
                    .zip(&tokens)
                    .map(|(t, l)| if t == l { t.clone() } else { Token::Wildcard })
                    .collect();
                if merged == *current {
                    id
                } else if let Some(&existing) = self.by_tokens.get(&merged) {
                    // Generalizing would duplicate a stored template; the line
                    // fits that one by construction.
                    existing
                } else {
                    self.by_tokens.remove(current);
                    self.by_tokens.insert(merged.clone(), id);
                    self.templates[id as usize].tokens = merged;
                    id
                }
            }
            None => {
                if let Some(&existing) = self.by_tokens.get(&tokens) {
                    existing
                } else {
                    let id = self.templates.len() as u32;
                    self.templates.push(EventTemplate {
                        template_id: id,
                        tokens: tokens.clone(),
                    });
                    self.by_tokens.insert(tokens, id);
                    node.templates.push(id);
                    id
                }
            }
        };

        let parameters = self.templates[template_id as usize]
            .tokens
            .iter()
            .zip(&raw)
            .filter(|(t, _)| **t == Token::Wildcard)
            .map(|(_, r)| (*r).to_string())
            .collect();
        ParsedLine {
            template_id,
            parameters,
        }
    }
}

/// Returns whether every literal of `template` matches `line`, and the
/// fraction of positions holding equal literal tokens.
fn similarity(template: &[Token], line: &[Token]) -> (bool, f64) {
    let mut matches = 0usize;
    let mut fits = true;
    for (t, l) in template.iter().zip(line) {
        match t {
            Token::Wildcard => {}
            Token::Literal(_) if t == l => matches += 1,
            Token::Literal(_) => fits = false,
        }
    }
    (fits, matches as f64 / template.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parser() -> DrainParser {
        DrainParser::new(DrainConfig::default()).unwrap()
    }

    #[test]
    fn generalizes_divergent_token() {
        let mut p = parser();
        let a = p.parse_content("Connection from host-a failed");
        let b = p.parse_content("Connection from host-b failed");
        assert_eq!(a.template_id, b.template_id);
        assert!(a.parameters.is_empty());
        assert_eq!(b.parameters, vec!["host-b"]);
        assert_eq!(
            p.template(a.template_id).unwrap().render(),
            "Connection from <*> failed"
        );
    }

    #[test]
    fn ip_addresses_are_masked_up_front() {
        let mut p = parser();
        let a = p.parse_content("Connection from 10.0.0.1 failed");
        let b = p.parse_content("Connection from 10.0.0.2 failed");
        assert_eq!(a.template_id, b.template_id);
        assert_eq!(b.parameters, vec!["10.0.0.2"]);
        assert_eq!(
            p.template(b.template_id).unwrap().render(),
            "Connection from <*> failed"
        );
    }

    #[test]
    fn identical_lines_share_template() {
        let mut p = parser();
        let a = p.parse_content("disk sda ok");
        let b = p.parse_content("disk sda ok");
        assert_eq!(a, b);
        assert_eq!(p.num_templates(), 1);
    }

    #[test]
    fn dissimilar_lines_split() {
        let mut p = parser();
        let a = p.parse_content("alpha beta gamma delta epsilon zeta");
        let b = p.parse_content("alpha beta one two three four");
        assert_ne!(a.template_id, b.template_id);
    }

    #[test]
    fn different_lengths_never_merge() {
        let mut p = parser();
        let a = p.parse_content("a b c");
        let b = p.parse_content("a b c d");
        assert_ne!(a.template_id, b.template_id);
    }

    #[test]
    fn overflow_children_route_to_wildcard() {
        let config = DrainConfig {
            max_children: 2,
            ..DrainConfig::default()
        };
        let mut p = DrainParser::new(config).unwrap();
        for word in ["a", "b", "c", "d"] {
            p.parse_content(&format!("{word} x y z"));
        }
        // c and d overflow into the same wildcard branch and merge there.
        assert_eq!(p.num_templates(), 3);
        assert_eq!(p.templates()[2].render(), "<*> x y z");
    }

    #[test]
    fn rejects_bad_config() {
        for config in [
            DrainConfig { depth: 2, ..DrainConfig::default() },
            DrainConfig { similarity_threshold: 1.0, ..DrainConfig::default() },
            DrainConfig { similarity_threshold: 0.0, ..DrainConfig::default() },
        ] {
            assert!(matches!(DrainParser::new(config), Err(Error::Config(_))));
        }
    }

    #[test]
    fn numeric_token_detection() {
        assert!(is_numeric_token("42"));
        assert!(is_numeric_token("10.0.0.1"));
        assert!(is_numeric_token("-3.5"));
        assert!(!is_numeric_token("blk_42"));
        assert!(!is_numeric_token("..."));
    }
}
