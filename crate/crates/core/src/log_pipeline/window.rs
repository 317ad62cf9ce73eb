use serde::{Deserialize, Serialize};

use super::{EventSequence, Label};
use crate::error::{Error, Result};

/// A log line after template assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRecord {
    pub line_no: u64,
    pub timestamp: Option<i64>,
    pub template_id: u32,
    /// Per-line anomaly tag, when a label sidecar was supplied.
    pub anomalous: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowConfig {
    /// Sliding window over record counts. A shorter tail window is kept.
    Count { size: usize, stride: usize },
    /// Tumbling window over timestamps of the given span.
    Time { span_ms: i64 },
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig::Count {
            size: 20,
            stride: 20,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WindowConfig::Count { size, stride } => {
                if size < 1 {
                    return Err(Error::config("window size must be at least 1"));
                }
                if stride < 1 {
                    return Err(Error::config("window stride must be at least 1"));
                }
            }
            WindowConfig::Time { span_ms } => {
                if span_ms < 1 {
                    return Err(Error::config("time window span must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Groups parsed records into labeled sequences.
///
/// A window is anomalous iff any member line is tagged anomalous; the
/// in-window offsets of tagged lines become the root-cause positions.
/// Sequence ids are `w<index>`.
pub fn sessionize(records: &[ParsedRecord], window: WindowConfig) -> Result<Vec<EventSequence>> {
    window.validate()?;
    let ranges = match window {
        WindowConfig::Count { size, stride } => count_ranges(records.len(), size, stride),
        WindowConfig::Time { span_ms } => time_ranges(records, span_ms)?,
    };
    ranges
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| {
            let members = &records[start..end];
            let events = members.iter().map(|r| r.template_id).collect();
            let roots: Vec<usize> = members
                .iter()
                .enumerate()
                .filter(|(_, r)| r.anomalous == Some(true))
                .map(|(i, _)| i)
                .collect();
            let label = Label::from_bool(!roots.is_empty());
            EventSequence::new(format!("w{index}"), events, label, roots)
        })
        .collect()
}

fn count_ranges(len: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + size).min(len);
        ranges.push((start, end));
        if end == len {
            break;
        }
        start += stride;
    }
    ranges
}

fn time_ranges(records: &[ParsedRecord], span_ms: i64) -> Result<Vec<(usize, usize)>> {
    let mut ranges = Vec::new();
    let mut current: Option<(i64, usize)> = None;
    for (i, record) in records.iter().enumerate() {
        let ts = record.timestamp.ok_or_else(|| {
            Error::input(format!(
                "line {} has no timestamp; required for time windows",
                record.line_no
            ))
        })?;
        let bucket = ts.div_euclid(span_ms);
        match current {
            Some((b, _)) if b == bucket => {}
            Some((_, start)) => {
                ranges.push((start, i));
                current = Some((bucket, i));
            }
            None => current = Some((bucket, i)),
        }
    }
    if let Some((_, start)) = current {
        ranges.push((start, records.len()));
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(n: usize, anomalous_at: &[usize]) -> Vec<ParsedRecord> {
        (0..n)
            .map(|i| ParsedRecord {
                line_no: i as u64 + 1,
                timestamp: Some(i as i64 * 1000),
                template_id: (i % 7) as u32,
                anomalous: Some(anomalous_at.contains(&i)),
            })
            .collect()
    }

    fn count(size: usize, stride: usize) -> WindowConfig {
        WindowConfig::Count { size, stride }
    }

    #[test]
    fn exact_division() {
        let seqs = sessionize(&stream(100, &[]), count(20, 20)).unwrap();
        assert_eq!(seqs.len(), 5);
        assert!(seqs.iter().all(|s| s.len() == 20));
    }

    #[test]
    fn tail_window_is_kept() {
        let seqs = sessionize(&stream(105, &[]), count(20, 20)).unwrap();
        assert_eq!(seqs.len(), 6);
        assert_eq!(seqs[5].len(), 5);
    }

    #[test]
    fn anomalous_line_marks_its_window() {
        let seqs = sessionize(&stream(100, &[37]), count(20, 20)).unwrap();
        // Oracle: enumerate windows and check membership.
        let expected: Vec<bool> = (0..5).map(|w| (w * 20..w * 20 + 20).contains(&37)).collect();
        let got: Vec<bool> = seqs.iter().map(|s| s.is_anomalous()).collect();
        assert_eq!(got, expected);
        assert_eq!(seqs.iter().filter(|s| s.is_anomalous()).count(), 1);
        assert!(seqs[1].is_anomalous());
        assert_eq!(seqs[1].root_causes(), &[17]);
    }

    #[test]
    fn overlapping_windows_stop_at_end() {
        let seqs = sessionize(&stream(25, &[]), count(20, 10)).unwrap();
        let lens: Vec<usize> = seqs.iter().map(EventSequence::len).collect();
        assert_eq!(lens, vec![20, 15]);
    }

    #[test]
    fn empty_stream() {
        assert!(sessionize(&[], count(20, 20)).unwrap().is_empty());
    }

    #[test]
    fn zero_size_is_config_error() {
        assert!(matches!(
            sessionize(&stream(3, &[]), count(0, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn time_windows_tumble() {
        // one record per second, 5 s windows
        let seqs = sessionize(&stream(12, &[]), WindowConfig::Time { span_ms: 5000 }).unwrap();
        let lens: Vec<usize> = seqs.iter().map(EventSequence::len).collect();
        assert_eq!(lens, vec![5, 5, 2]);
    }

    #[test]
    fn time_windows_need_timestamps() {
        let mut records = stream(3, &[]);
        records[1].timestamp = None;
        assert!(sessionize(&records, WindowConfig::Time { span_ms: 10 }).is_err());
    }

    #[test]
    fn stride_equal_size_covers_each_index_once() {
        for n in 1..60 {
            for size in 1..9 {
                let ranges = count_ranges(n, size, size);
                let mut seen = vec![0; n];
                for (s, e) in ranges {
                    for c in &mut seen[s..e] {
                        *c += 1;
                    }
                }
                assert!(seen.iter().all(|&c| c == 1), "n={n} size={size}");
            }
        }
    }
}
