//! Diagnostic-faithfulness evaluation.
//!
//! Two tasks are run against any [`Detector`]:
//!
//! * root-cause localization: events of each labeled anomalous sequence are
//!   ranked by signed attention score and scored with HR@k, PR@k, MAP@k
//!   and MRR against the true root-cause positions;
//! * event perturbation: for every sequence the detector flags as anomalous,
//!   the highest-attention event is masked and detection re-run. The verdict
//!   is supportive when confidence strictly drops; the support rate (SR) is
//!   the supportive fraction.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log_pipeline::{EventSequence, Label};
use crate::model::{AttentionProfile, DetectionResult, FaithLogModel, DECISION_THRESHOLD};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// Anything that produces detections with per-event attention.
pub trait Detector: Sync {
    fn detect(&self, seq: &EventSequence) -> Result<DetectionResult>;

    /// Detection with the event at `index` masked out.
    fn detect_without(&self, seq: &EventSequence, index: usize) -> Result<DetectionResult>;
}

impl Detector for FaithLogModel {
    fn detect(&self, seq: &EventSequence) -> Result<DetectionResult> {
        FaithLogModel::detect(self, seq)
    }

    fn detect_without(&self, seq: &EventSequence, index: usize) -> Result<DetectionResult> {
        FaithLogModel::detect_without(self, seq, index)
    }
}

/// Reference detector that reads the labels: confidence 1 with attention
/// spread evenly over the root causes of anomalous sequences, and
/// confidence 0 once any event is removed.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleDetector;

impl OracleDetector {
    fn result(n: usize, confidence: f64, focus: &[usize], positions: Vec<usize>) -> DetectionResult {
        let mut signed = vec![0.0; n];
        for &f in focus {
            signed[f] = 1.0;
        }
        let locator_scores = signed.clone();
        DetectionResult {
            confidence,
            decision: Label::from_bool(confidence >= DECISION_THRESHOLD),
            attention: AttentionProfile::from_signed(signed),
            locator_scores,
            positions,
        }
    }
}

impl Detector for OracleDetector {
    fn detect(&self, seq: &EventSequence) -> Result<DetectionResult> {
        let confidence = if seq.is_anomalous() { 1.0 } else { 0.0 };
        Ok(Self::result(seq.len(), confidence, seq.root_causes(), (0..seq.len()).collect()))
    }

    fn detect_without(&self, seq: &EventSequence, index: usize) -> Result<DetectionResult> {
        if seq.len() < 2 || index >= seq.len() {
            return Err(Error::input(format!(
                "cannot remove event {index} from a sequence of length {}",
                seq.len()
            )));
        }
        let positions: Vec<usize> = (0..seq.len()).filter(|&i| i != index).collect();
        Ok(Self::result(seq.len() - 1, 0.0, &[], positions))
    }
}

/// Event indices ordered by descending score, lowest index first on ties.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLocalization {
    pub sequence_id: String,
    pub ranked_events: Vec<usize>,
    pub truth: Vec<usize>,
}

impl RankedLocalization {
    /// 1-based rank of the first true root cause, if any is ranked.
    pub fn first_hit_rank(&self) -> Option<usize> {
        self.ranked_events
            .iter()
            .position(|e| self.truth.contains(e))
            .map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub hr: BTreeMap<usize, f64>,
    pub pr: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub count: usize,
}

/// HR@k, PR@k, MAP@k and MRR with their standard retrieval definitions.
///
/// AP@k divides by `min(|truth|, k)`.
pub fn rank_metrics(localizations: &[RankedLocalization], ks: &[usize]) -> Result<RankMetrics> {
    if localizations.is_empty() {
        return Err(Error::input("no localizations to score"));
    }
    if let Some(l) = localizations.iter().find(|l| l.truth.is_empty()) {
        return Err(Error::input(format!(
            "sequence {} has no root-cause labels",
            l.sequence_id
        )));
    }
    if ks.contains(&0) {
        return Err(Error::config("cutoff k must be at least 1"));
    }
    let count = localizations.len() as f64;
    let mut hr = BTreeMap::new();
    let mut pr = BTreeMap::new();
    let mut map = BTreeMap::new();
    for &k in ks {
        let (mut h, mut p, mut ap) = (0.0, 0.0, 0.0);
        for loc in localizations {
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            for (r, e) in loc.ranked_events.iter().take(k).enumerate() {
                if loc.truth.contains(e) {
                    hits += 1;
                    precision_sum += hits as f64 / (r + 1) as f64;
                }
            }
            if hits > 0 {
                h += 1.0;
            }
            p += hits as f64 / k as f64;
            ap += precision_sum / loc.truth.len().min(k) as f64;
        }
        hr.insert(k, h / count);
        pr.insert(k, p / count);
        map.insert(k, ap / count);
    }
    let mrr = localizations
        .iter()
        .map(|l| l.first_hit_rank().map_or(0.0, |r| 1.0 / r as f64))
        .sum::<f64>()
        / count;
    Ok(RankMetrics {
        hr,
        pr,
        map,
        mrr,
        count: localizations.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationOutcome {
    /// Ranked by signed attention score.
    pub by_attention: Vec<RankedLocalization>,
    /// Ranked by locator score.
    pub by_locator: Vec<RankedLocalization>,
    /// Anomalous sequences skipped for lacking root-cause labels.
    pub excluded: usize,
}

/// Ranks the events of every labeled anomalous sequence.
pub fn localize(detector: &dyn Detector, data: &[EventSequence]) -> Result<LocalizationOutcome> {
    let anomalous: Vec<&EventSequence> = data.iter().filter(|s| s.is_anomalous()).collect();
    let labeled: Vec<&EventSequence> = anomalous
        .iter()
        .copied()
        .filter(|s| !s.root_causes().is_empty())
        .collect();
    let results: Vec<(RankedLocalization, RankedLocalization)> = labeled
        .par_iter()
        .map(|seq| {
            let det = detector.detect(seq)?;
            let make = |scores: &[f64]| RankedLocalization {
                sequence_id: seq.sequence_id.clone(),
                ranked_events: rank_by_scores(scores),
                truth: seq.root_causes().to_vec(),
            };
            Ok((make(&det.attention.signed_scores), make(&det.locator_scores)))
        })
        .collect::<Result<_>>()?;
    let (by_attention, by_locator) = results.into_iter().unzip();
    Ok(LocalizationOutcome {
        by_attention,
        by_locator,
        excluded: anomalous.len() - labeled.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictKind {
    Supportive,
    NonSupportive,
    /// Single-event sequence; nothing to remove.
    SkippedShort,
    /// Not detected as anomalous, so not perturbed.
    NotDetected,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Supportive => "supportive",
            VerdictKind::NonSupportive => "non-supportive",
            VerdictKind::SkippedShort => "skipped",
            VerdictKind::NotDetected => "not-detected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sequence_id: String,
    pub p: f64,
    pub p_removed: Option<f64>,
    pub removed_index: Option<usize>,
    pub kind: VerdictKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportOutcome {
    pub sr: f64,
    pub supportive: usize,
    pub evaluated: usize,
    pub verdicts: Vec<Verdict>,
}

/// Per-sequence perturbation verdicts over the whole dataset.
pub fn perturbation_verdicts(detector: &dyn Detector, data: &[EventSequence]) -> Result<Vec<Verdict>> {
    data.par_iter()
        .map(|seq| {
            let det = detector.detect(seq)?;
            let base = Verdict {
                sequence_id: seq.sequence_id.clone(),
                p: det.confidence,
                p_removed: None,
                removed_index: None,
                kind: VerdictKind::NotDetected,
            };
            if det.decision != Label::Anomalous {
                return Ok(base);
            }
            if seq.len() < 2 {
                return Ok(Verdict {
                    kind: VerdictKind::SkippedShort,
                    ..base
                });
            }
            let e_max = det.attention.argmax_index;
            let p_removed = detector.detect_without(seq, e_max)?.confidence;
            let kind = if p_removed < det.confidence {
                VerdictKind::Supportive
            } else {
                VerdictKind::NonSupportive
            };
            Ok(Verdict {
                p_removed: Some(p_removed),
                removed_index: Some(e_max),
                kind,
                ..base
            })
        })
        .collect()
}

/// Support rate from verdicts; errors when nothing was eligible.
pub fn support_rate_from(verdicts: Vec<Verdict>) -> Result<SupportOutcome> {
    let supportive = verdicts
        .iter()
        .filter(|v| v.kind == VerdictKind::Supportive)
        .count();
    let evaluated = supportive
        + verdicts
            .iter()
            .filter(|v| v.kind == VerdictKind::NonSupportive)
            .count();
    if evaluated == 0 {
        return Err(Error::input(
            "no detected anomalous sequence with at least two events; support rate undefined",
        ));
    }
    Ok(SupportOutcome {
        sr: supportive as f64 / evaluated as f64,
        supportive,
        evaluated,
        verdicts,
    })
}

pub fn support_rate(detector: &dyn Detector, data: &[EventSequence]) -> Result<SupportOutcome> {
    support_rate_from(perturbation_verdicts(detector, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub sequences: usize,
    pub localized: usize,
    pub excluded_unlabeled: usize,
    pub perturbed: usize,
    pub supportive: usize,
    pub skipped_short: usize,
    pub not_detected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessReport {
    pub attention: RankMetrics,
    pub locator: RankMetrics,
    pub sr: f64,
    pub counts: ReportCounts,
    pub localizations: Vec<RankedLocalization>,
    pub verdicts: Vec<Verdict>,
}

fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

impl FaithfulnessReport {
    /// The headline metrics as percentages with two decimals.
    pub fn metric_table(&self) -> BTreeMap<String, f64> {
        let m = &self.attention;
        let mut out = BTreeMap::new();
        for k in [1, 3, 5] {
            if let Some(v) = m.hr.get(&k) {
                out.insert(format!("hr@{k}"), pct(*v));
            }
        }
        for k in [3, 5] {
            if let Some(v) = m.pr.get(&k) {
                out.insert(format!("pr@{k}"), pct(*v));
            }
            if let Some(v) = m.map.get(&k) {
                out.insert(format!("map@{k}"), pct(*v));
            }
        }
        out.insert("mrr".into(), pct(m.mrr));
        out.insert("sr".into(), pct(self.sr));
        out
    }

    pub fn to_json(&self, run_id: &str) -> serde_json::Value {
        let locator: BTreeMap<String, f64> = self
            .locator
            .hr
            .iter()
            .map(|(k, v)| (format!("hr@{k}"), pct(*v)))
            .chain(std::iter::once(("mrr".to_string(), pct(self.locator.mrr))))
            .collect();
        serde_json::json!({
            "run_id": run_id,
            "metrics": self.metric_table(),
            "locator_metrics": locator,
            "counts": self.counts,
        })
    }

    pub fn write_json(&self, out: impl Write, run_id: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        serde_json::to_writer_pretty(&mut out, &self.to_json(run_id))?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }
}

/// Tab-separated verdict rows: `sequence_id p p' verdict first_hit_rank`.
/// `p'` is `-` for unperturbed sequences; the rank is `-` when the sequence
/// was not localized or no root cause was ranked.
pub fn write_verdicts(
    out: impl Write,
    verdicts: &[Verdict],
    localizations: &[RankedLocalization],
    header: Option<&str>,
) -> Result<()> {
    let ranks: BTreeMap<&str, Option<usize>> = localizations
        .iter()
        .map(|l| (l.sequence_id.as_str(), l.first_hit_rank()))
        .collect();
    let mut out = std::io::BufWriter::new(out);
    if let Some(h) = header {
        for line in h.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "sequence_id\tp\tp_removed\tverdict\tfirst_hit_rank")?;
    for v in verdicts {
        let p_removed = v.p_removed.map_or("-".to_string(), |p| format!("{p:.17e}"));
        let rank = ranks
            .get(v.sequence_id.as_str())
            .copied()
            .flatten()
            .map_or("-".to_string(), |r| r.to_string());
        writeln!(
            out,
            "{}\t{:.17e}\t{}\t{}\t{}",
            v.sequence_id,
            v.p,
            p_removed,
            v.kind.as_str(),
            rank
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Runs both tasks and assembles the report.
pub fn evaluate_faithfulness(
    detector: &dyn Detector,
    data: &[EventSequence],
    ks: &[usize],
) -> Result<FaithfulnessReport> {
    let loc = localize(detector, data)?;
    let attention = rank_metrics(&loc.by_attention, ks)?;
    let locator = rank_metrics(&loc.by_locator, ks)?;
    let verdicts = perturbation_verdicts(detector, data)?;
    let skipped_short = verdicts
        .iter()
        .filter(|v| v.kind == VerdictKind::SkippedShort)
        .count();
    let not_detected = verdicts
        .iter()
        .filter(|v| v.kind == VerdictKind::NotDetected)
        .count();
    let support = support_rate_from(verdicts)?;
    Ok(FaithfulnessReport {
        counts: ReportCounts {
            sequences: data.len(),
            localized: loc.by_attention.len(),
            excluded_unlabeled: loc.excluded,
            perturbed: support.evaluated,
            supportive: support.supportive,
            skipped_short,
            not_detected,
        },
        attention,
        locator,
        sr: support.sr,
        localizations: loc.by_attention,
        verdicts: support.verdicts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Precision, recall and F1 of anomalous-class detection.
pub fn detection_scores(detector: &dyn Detector, data: &[EventSequence]) -> Result<DetectionScores> {
    let decisions: Vec<(bool, bool)> = data
        .par_iter()
        .map(|s| Ok((detector.detect(s)?.decision.is_anomalous(), s.is_anomalous())))
        .collect::<Result<_>>()?;
    let tp = decisions.iter().filter(|&&(p, y)| p && y).count();
    let fp = decisions.iter().filter(|&&(p, y)| p && !y).count();
    let fn_ = decisions.iter().filter(|&&(p, y)| !p && y).count();
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionScores {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(ranked: Vec<usize>, truth: Vec<usize>) -> RankedLocalization {
        RankedLocalization {
            sequence_id: "s".into(),
            ranked_events: ranked,
            truth,
        }
    }

    #[test]
    fn perfect_localization() {
        let m = rank_metrics(&[loc(vec![2, 0, 1], vec![2])], &DEFAULT_KS).unwrap();
        assert_eq!(m.hr[&1], 1.0);
        assert_eq!(m.pr[&1], 1.0);
        assert_eq!(m.map[&1], 1.0);
        assert_eq!(m.mrr, 1.0);
    }

    #[test]
    fn truth_at_rank_two() {
        let m = rank_metrics(&[loc(vec![0, 1, 2, 3], vec![1])], &DEFAULT_KS).unwrap();
        assert_eq!(m.hr[&1], 0.0);
        assert_eq!(m.hr[&3], 1.0);
        assert_eq!(m.mrr, 0.5);
        assert!((m.pr[&3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.map[&3], 0.5);
    }

    #[test]
    fn two_sequences_mrr() {
        let m = rank_metrics(
            &[loc(vec![4, 0, 1, 2, 3], vec![4]), loc(vec![0, 1, 2, 3, 4], vec![3])],
            &DEFAULT_KS,
        )
        .unwrap();
        assert_eq!(m.mrr, 0.625);
        assert_eq!(m.hr[&3], 0.5);
    }

    #[test]
    fn empty_or_unlabeled_input_rejected() {
        assert!(rank_metrics(&[], &DEFAULT_KS).is_err());
        assert!(rank_metrics(&[loc(vec![0], vec![])], &DEFAULT_KS).is_err());
    }

    #[test]
    fn tie_break_prefers_lowest_index() {
        assert_eq!(rank_by_scores(&[0.0; 5]), vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_by_scores(&[0.1, 0.3, 0.3, -1.0]), vec![1, 2, 0, 3]);
    }

    fn verdict(kind: VerdictKind) -> Verdict {
        Verdict {
            sequence_id: "x".into(),
            p: 0.9,
            p_removed: None,
            removed_index: None,
            kind,
        }
    }

    #[test]
    fn support_rate_ratio() {
        use VerdictKind::*;
        let v = [Supportive, NonSupportive, Supportive, Supportive, SkippedShort, NotDetected]
            .into_iter()
            .map(verdict)
            .collect();
        let out = support_rate_from(v).unwrap();
        assert_eq!(out.sr, 0.75);
        assert_eq!(out.evaluated, 4);
        assert!(support_rate_from(vec![verdict(SkippedShort)]).is_err());
    }

    #[test]
    fn oracle_is_perfect() {
        let data = vec![
            EventSequence::new("a", vec![1, 2, 3], Label::Anomalous, vec![2]).unwrap(),
            EventSequence::new("b", vec![1, 2, 3, 4], Label::Anomalous, vec![0, 3]).unwrap(),
            EventSequence::new("c", vec![1, 2], Label::Normal, vec![]).unwrap(),
            EventSequence::new("d", vec![5], Label::Anomalous, vec![0]).unwrap(),
        ];
        let report = evaluate_faithfulness(&OracleDetector, &data, &DEFAULT_KS).unwrap();
        let table = report.metric_table();
        let keys: Vec<&str> = table.keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["hr@1", "hr@3", "hr@5", "map@3", "map@5", "mrr", "pr@3", "pr@5", "sr"]
        );
        assert_eq!(table["hr@1"], 100.0);
        assert_eq!(table["mrr"], 100.0);
        assert_eq!(table["sr"], 100.0);
        assert_eq!(report.counts.skipped_short, 1);
        assert_eq!(report.counts.not_detected, 1);
    }
}
