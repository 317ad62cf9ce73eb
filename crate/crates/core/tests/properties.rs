use std::collections::BTreeSet;

use proptest::prelude::*;

use faithlog_core::faithfulness::{perturbation_verdicts, rank_by_scores, rank_metrics, RankedLocalization};
use faithlog_core::log_pipeline::{
    read_dataset, sessionize, write_dataset, DrainConfig, ParsedRecord, WindowConfig,
};
use faithlog_core::model::DetectionResult;
use faithlog_core::training::loss::{ce_loss, consistency_loss, kl_loss, rank_loss};
use faithlog_core::*;

const WORDS: [&str; 8] = ["open", "close", "block", "disk", "node", "sync", "42", "7.5"];

fn line_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..6).prop_map(|w| w.join(" "))
}

fn parse_all(lines: &[String]) -> (Vec<u32>, Vec<String>, Vec<usize>) {
    let mut parser = DrainParser::new(DrainConfig::default()).unwrap();
    let mut counts = Vec::new();
    let ids = lines
        .iter()
        .map(|l| {
            let id = parser.parse_content(l).template_id;
            counts.push(parser.num_templates());
            id
        })
        .collect();
    let templates = parser.templates().iter().map(EventTemplate::render).collect();
    (ids, templates, counts)
}

fn sequence_strategy() -> impl Strategy<Value = EventSequence> {
    (1usize..10, any::<bool>(), any::<u64>()).prop_map(|(n, anomalous, salt)| {
        let events: Vec<u32> = (0..n).map(|i| ((salt >> (i % 16)) % 6) as u32).collect();
        let roots = if anomalous { vec![(salt as usize) % n] } else { vec![] };
        EventSequence::new(format!("s{salt}"), events, Label::from_bool(anomalous), roots).unwrap()
    })
}

fn small_model() -> FaithLogModel {
    let templates: Vec<EventTemplate> = (0..6)
        .map(|i| EventTemplate::from_text(i, &format!("kind{i} id <*>")).unwrap())
        .collect();
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        hidden: 8,
        ..ModelConfig::default()
    };
    FaithLogModel::new(config, &templates).unwrap()
}

/// Passes confidences through a strictly increasing map.
struct Warped<'a>(&'a FaithLogModel);

impl Warped<'_> {
    fn warp(mut d: DetectionResult) -> DetectionResult {
        d.confidence = (3.0 * d.confidence).exp() - 1.0;
        d
    }
}

impl Detector for Warped<'_> {
    fn detect(&self, seq: &EventSequence) -> faithlog_core::Result<DetectionResult> {
        let mut d = Self::warp(self.0.detect(seq)?);
        d.decision = self.0.detect(seq)?.decision;
        Ok(d)
    }

    fn detect_without(&self, seq: &EventSequence, index: usize) -> faithlog_core::Result<DetectionResult> {
        self.0.detect_without(seq, index).map(Self::warp)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parser_is_deterministic_and_monotone(lines in prop::collection::vec(line_strategy(), 0..60)) {
        let first = parse_all(&lines);
        prop_assert_eq!(&first, &parse_all(&lines));
        prop_assert!(first.2.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn count_windows_cover_every_record(n in 0usize..120, size in 1usize..25, tags in any::<u64>()) {
        let records: Vec<ParsedRecord> = (0..n)
            .map(|i| ParsedRecord {
                line_no: i as u64 + 1,
                timestamp: None,
                template_id: (i % 5) as u32,
                anomalous: Some((tags >> (i % 64)) & 1 == 1),
            })
            .collect();
        let seqs = sessionize(&records, WindowConfig::Count { size, stride: size }).unwrap();
        prop_assert_eq!(seqs.iter().map(EventSequence::len).sum::<usize>(), n);
        let mut offset = 0;
        for s in &seqs {
            for (k, &e) in s.events().iter().enumerate() {
                prop_assert_eq!(e, records[offset + k].template_id);
            }
            let tagged: Vec<usize> = (0..s.len())
                .filter(|&k| records[offset + k].anomalous == Some(true))
                .collect();
            prop_assert_eq!(s.root_causes(), &tagged[..]);
            prop_assert_eq!(s.is_anomalous(), !tagged.is_empty());
            offset += s.len();
        }
    }

    #[test]
    fn dataset_round_trip(seqs in prop::collection::vec(sequence_strategy(), 0..12)) {
        let seqs: Vec<EventSequence> = seqs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                EventSequence::new(format!("q{i}"), s.events().to_vec(), s.label(), s.root_causes().to_vec()).unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &seqs, Some("run_id=p")).unwrap();
        prop_assert_eq!(read_dataset(&buf[..]).unwrap(), seqs);
    }

    #[test]
    fn sequence_embedding_matches_template_rows(ids in prop::collection::vec(0u32..40, 1..15)) {
        let mut provider = EmbeddingProvider::hashed(16, 5).unwrap();
        let templates: Vec<EventTemplate> = (0..20)
            .map(|i| EventTemplate::from_text(i, &format!("event {i} <*>")).unwrap())
            .collect();
        provider.register_all(&templates);
        let seq = EventSequence::new("x", ids.clone(), Label::Normal, vec![]).unwrap();
        let matrix = provider.embed_sequence(&seq).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            prop_assert_eq!(matrix.row(i).to_vec(), provider.embed_id(id).unwrap());
        }
    }

    #[test]
    fn loss_terms_are_bounded(
        p in prop::collection::vec(0.0f64..=1.0, 1..8),
        q in prop::collection::vec(0.0f64..=1.0, 1..8),
        logits in prop::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let labels: Vec<bool> = p.iter().map(|x| *x > 0.5).collect();
        prop_assert!(ce_loss(&p, &labels).unwrap() >= 0.0);
        let r = rank_loss(&p, &q).unwrap();
        prop_assert!((0.0..=2.0).contains(&r));
        let c = consistency_loss(p[0], q[0]);
        prop_assert!((0.0..=2.0).contains(&c));
        let n = logits.len().min(p.len());
        let z: f64 = logits[..n].iter().map(|x| x.exp()).sum();
        let attention: Vec<f64> = logits[..n].iter().map(|x| x.exp() / z).collect();
        prop_assert!(kl_loss(&p[..n], &attention).unwrap() >= -1e-12);
    }

    #[test]
    fn signed_scores_are_balanced(seq in sequence_strategy()) {
        let det = small_model().detect(&seq).unwrap();
        let signed = &det.attention.signed_scores;
        prop_assert!(signed.iter().all(|a| (-1.0..=1.0).contains(a)));
        prop_assert!(signed.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!((det.attention.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hit_rate_grows_with_k(perms in prop::collection::vec((1usize..9, any::<u64>()), 1..10)) {
        let locs: Vec<RankedLocalization> = perms
            .iter()
            .enumerate()
            .map(|(i, &(n, salt))| {
                let scores: Vec<f64> = (0..n).map(|j| ((salt >> (j * 3)) & 7) as f64).collect();
                RankedLocalization {
                    sequence_id: format!("s{i}"),
                    ranked_events: rank_by_scores(&scores),
                    truth: vec![(salt as usize) % n],
                }
            })
            .collect();
        let m = rank_metrics(&locs, &[1, 3, 5]).unwrap();
        prop_assert!(m.hr[&1] <= m.hr[&3] && m.hr[&3] <= m.hr[&5]);
        for v in m.hr.values().chain(m.pr.values()).chain(m.map.values()).chain([&m.mrr]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn ranking_ignores_increasing_transforms(scores in prop::collection::vec(-1.0f64..1.0, 1..12)) {
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 0.5 * s).collect();
        prop_assert_eq!(rank_by_scores(&scores), rank_by_scores(&warped));
    }

    #[test]
    fn verdicts_ignore_increasing_confidence_maps(seqs in prop::collection::vec(sequence_strategy(), 1..6)) {
        let model = small_model();
        let plain = perturbation_verdicts(&model, &seqs).unwrap();
        let warped = perturbation_verdicts(&Warped(&model), &seqs).unwrap();
        let kinds = |v: &[faithfulness::Verdict]| v.iter().map(|x| x.kind).collect::<Vec<_>>();
        prop_assert_eq!(kinds(&plain), kinds(&warped));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_roots_hold_anomaly_templates(
        n_sequences in 20usize..80,
        seq_length in 2usize..12,
        seed in any::<u64>(),
    ) {
        let cfg = SynthConfig {
            n_templates: 12,
            n_anomaly_templates: 3,
            n_sequences,
            seq_length,
            seed,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let anomaly: BTreeSet<u32> = (12..15).collect();
        for s in &data.sequences {
            for (i, e) in s.events().iter().enumerate() {
                prop_assert_eq!(anomaly.contains(e), s.root_causes().contains(&i));
            }
        }
        prop_assert_eq!(data.lines.len(), n_sequences * seq_length);
    }
}
