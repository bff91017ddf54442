use std::collections::HashSet;

use phishlens_core::corpus::{load_corpus, part_sizes, save_corpus, split_items};
use phishlens_core::domain::DomainResolver;
use phishlens_core::encoders::{hash_features, EncoderConfig};
use phishlens_core::extractor::{Extractor, NUMERIC_FEATURES};
use phishlens_core::fusion::{Prediction, StreamTables, TrainConfig, FusedModel, Variant};
use phishlens_core::metrics::report;
use phishlens_core::tabnet::NormStats;
use phishlens_core::{Label, LabeledDocument};
use proptest::prelude::*;

fn items(labels: &[bool]) -> Vec<(String, Label)> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &p)| (format!("doc-{i}"), if p { Label::Phishing } else { Label::Benign }))
        .collect()
}

fn fractions() -> impl Strategy<Value = [f64; 3]> {
    (0u32..=20, 0u32..=20).prop_filter_map("sum at most 20", |(a, b)| {
        (a + b <= 20).then(|| [a as f64 / 20.0, b as f64 / 20.0, (20 - a - b) as f64 / 20.0])
    })
}

proptest! {
    #[test]
    fn split_partitions_the_corpus(
        labels in prop::collection::vec(any::<bool>(), 0..300),
        fractions in fractions(),
        seed in any::<u64>(),
        stratified in any::<bool>(),
    ) {
        let items = items(&labels);
        let Ok(sizes) = part_sizes(items.len(), fractions) else {
            prop_assert!(split_items(&items, fractions, seed, stratified).is_err());
            return Ok(());
        };
        let split = split_items(&items, fractions, seed, stratified).unwrap();
        let parts = [&split.train, &split.validation, &split.test];
        let total: usize = parts.iter().map(|p| p.len()).sum();
        prop_assert_eq!(total, items.len());
        let union: HashSet<&String> = parts.iter().flat_map(|p| p.iter()).collect();
        prop_assert_eq!(union.len(), items.len());
        for (k, part) in parts.iter().enumerate() {
            prop_assert_eq!(part.len(), sizes[k]);
            let exact = fractions[k] * items.len() as f64;
            prop_assert!((part.len() as f64 - exact).abs() <= 1.0 + 1e-9);
        }
        prop_assert_eq!(&split, &split_items(&items, fractions, seed, stratified).unwrap());
    }

    #[test]
    fn stratified_parts_track_class_shares(
        labels in prop::collection::vec(any::<bool>(), 1..300),
        fractions in fractions(),
        seed in any::<u64>(),
    ) {
        let items = items(&labels);
        prop_assume!(part_sizes(items.len(), fractions).is_ok());
        let split = split_items(&items, fractions, seed, true).unwrap();
        let phishing: HashSet<&str> = items.iter().filter(|(_, l)| *l == Label::Phishing).map(|(id, _)| id.as_str()).collect();
        let share = phishing.len() as f64 / items.len() as f64;
        for part in [&split.train, &split.validation, &split.test] {
            let count = part.iter().filter(|id| phishing.contains(id.as_str())).count() as f64;
            prop_assert!((count - share * part.len() as f64).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn metrics_are_bounded_and_f1_is_consistent(
        tp in 0u64..100_000, fp in 0u64..100_000, tn in 0u64..100_000, fn_ in 0u64..100_000,
    ) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let r = report(tp, fp, tn, fn_).unwrap();
        for m in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        if r.precision > 0.0 && r.recall > 0.0 {
            prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
            prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
        }
        let direct = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        prop_assert!((r.f1 - direct).abs() < 1e-12);
    }

    #[test]
    fn hashing_ignores_surrounding_whitespace(
        text in "[a-zA-Z0-9 .,!?]{0,60}",
        lead in "[ \t\n\r]{0,5}",
        trail in "[ \t\n\r]{0,5}",
    ) {
        for config in [EncoderConfig::title_default(), EncoderConfig::content_default()] {
            let plain = hash_features(&text, &config);
            prop_assert_eq!(&plain, &hash_features(&format!("{lead}{text}{trail}"), &config));
            prop_assert_eq!(&plain, &hash_features(&text, &config));
            if !plain.entries.is_empty() {
                prop_assert!((plain.l2_normalized().norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extraction_accepts_any_bytes(bytes in prop::collection::vec(any::<u8>(), 0..2000), with_url in any::<bool>()) {
        let html = String::from_utf8_lossy(&bytes);
        let url = with_url.then_some("https://www.example.com/login");
        let row = Extractor::default().extract_html(&html, url, Label::Benign);
        prop_assert!(row.check_invariants().is_ok());
        prop_assert_eq!(row.numeric().len(), NUMERIC_FEATURES);
    }

    #[test]
    fn prediction_score_is_a_probability(benign in -50.0f64..50.0, phishing in -50.0f64..50.0) {
        let p = Prediction::from_logits(benign, phishing);
        prop_assert!((0.0..=1.0).contains(&p.score));
        prop_assert_eq!(p.label == Label::Phishing, phishing > benign);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn head_scaling_keeps_labels(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut config = TrainConfig::default();
        config.seed = seed;
        config.title.buckets = 64;
        config.content.buckets = 64;
        let widths = [NUMERIC_FEATURES, 8, 8, 8, 6, 2];
        let mut model = FusedModel::<f64>::init_with_widths(
            Variant::Fused, &config, StreamTables::default(), NormStats::identity(NUMERIC_FEATURES), &widths,
        ).unwrap();
        let mut k = seed;
        model.head.weight.mapv_inplace(|_| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        model.head.bias[0] = 0.05;
        let docs = phishlens_core::synth::generate_corpus(&phishlens_core::synth::SynthConfig {
            documents: 12,
            seed,
            ..Default::default()
        });
        let samples: Vec<_> = docs.iter().map(|d| model.prepare(&d.id, &Extractor::default().extract(d))).collect();
        let before: Vec<Label> = model.predict_samples(&samples).unwrap().iter().map(|p| p.label).collect();
        model.head.weight.mapv_inplace(|w| w * scale);
        model.head.bias.mapv_inplace(|b| b * scale);
        let after: Vec<Label> = model.predict_samples(&samples).unwrap().iter().map(|p| p.label).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn corpus_round_trips(docs in prop::collection::vec(("[ -~]{0,40}", any::<bool>(), any::<bool>()), 0..12)) {
        let resolver = DomainResolver::heuristic();
        let docs: Vec<LabeledDocument> = docs
            .into_iter()
            .enumerate()
            .map(|(i, (html, phishing, with_url))| {
                let url = with_url.then(|| format!("https://site{i}.example.org/p"));
                let label = if phishing { Label::Phishing } else { Label::Benign };
                LabeledDocument::new(format!("d{i}"), url, format!("{html}\u{e9}\n\"q\""), label, &resolver)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&path, &docs).unwrap();
        prop_assert_eq!(load_corpus(&path).unwrap(), docs);
    }
}

#[test]
fn seeds_change_the_train_set() {
    for n in [20, 57, 200] {
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let items = items(&labels);
        let trains: HashSet<Vec<String>> = (0..5u64)
            .map(|seed| {
                let mut t = split_items(&items, [0.7, 0.15, 0.15], seed, true).unwrap().train;
                t.sort();
                t
            })
            .collect();
        assert!(trains.len() > 1, "n = {n}");
    }
}
