//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use num_rational::Ratio;
use phishlens_core::domain::DomainResolver;
use phishlens_core::encoders::{hash_features, EncoderConfig, EncoderKind, TextEncoderParams};
use phishlens_core::extractor::{Extractor, FeatureRow, NUMERIC_FEATURES};
use phishlens_core::fusion::{FusedModel, StreamTables, TextStream, TrainConfig, Variant};
use phishlens_core::metrics::EvalReport;
use phishlens_core::synth::{generate_corpus, SynthConfig};
use phishlens_core::tabnet::{mlp_backward, MlpParams, NormStats};
use phishlens_core::{Label, LabeledDocument};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- fixtures

pub struct Fixture {
    pub name: String,
    pub url: Option<String>,
    pub html: String,
    pub expected: FeatureRow,
}

impl Fixture {
    pub fn document(&self) -> LabeledDocument {
        LabeledDocument::new(&self.name, self.url.clone(), &self.html, Label::Benign, &DomainResolver::heuristic())
    }
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Every `NAME.html` with its `NAME.json` expectation, sorted by name.
pub fn fixtures() -> Vec<Fixture> {
    let mut names: Vec<String> = std::fs::read_dir(fixture_dir())
        .expect("fixture directory")
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "html").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let dir = fixture_dir();
            let html = std::fs::read_to_string(dir.join(format!("{name}.html"))).unwrap();
            let meta: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json"))).unwrap()).unwrap();
            let mut expected = meta["expected"].clone();
            expected["label"] = "benign".into();
            Fixture {
                url: meta["url"].as_str().map(str::to_string),
                expected: serde_json::from_value(expected).unwrap_or_else(|e| panic!("{name}.json: {e}")),
                name,
                html,
            }
        })
        .collect()
}

/// Extracts a fixture and describes every field that differs.
pub fn check_fixture(fixture: &Fixture) -> Result<(), String> {
    let got = Extractor::default().extract(&fixture.document());
    if got == fixture.expected {
        return Ok(());
    }
    let got = serde_json::to_value(&got).unwrap();
    let want = serde_json::to_value(&fixture.expected).unwrap();
    let diffs: Vec<String> = want
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| got[k.as_str()] != **v)
        .map(|(k, v)| format!("{k}: expected {v}, got {}", got[k.as_str()]))
        .collect();
    Err(format!("{}: {}", fixture.name, diffs.join("; ")))
}

// ---------------------------------------------------------------- fuzzing

const SPLICES: [&[u8]; 16] = [
    b"<",
    b">",
    b"</",
    b"\"",
    b"<a href=\"",
    b"<a href=\"https://x.example/\">",
    b"<form><input type=password>",
    b"<script>",
    b"</script>",
    b"<!--",
    b"<footer>",
    b"<title>",
    b"&amp;",
    b"\0",
    b"\xff\xfe",
    b"<![CDATA[",
];

/// One random edit: byte flip, splice of an HTML-ish token, deletion,
/// duplication, or truncation.
pub fn mutate(bytes: &mut Vec<u8>, rng: &mut ChaCha8Rng) {
    let len = bytes.len();
    match rng.random_range(0..5) {
        0 if len > 0 => {
            let i = rng.random_range(0..len);
            bytes[i] = rng.random();
        }
        1 => {
            let at = rng.random_range(0..=len);
            let token = SPLICES[rng.random_range(0..SPLICES.len())];
            bytes.splice(at..at, token.iter().copied());
        }
        2 if len > 0 => {
            let start = rng.random_range(0..len);
            let end = (start + rng.random_range(1..64)).min(len);
            bytes.drain(start..end);
        }
        3 if len > 0 => {
            let start = rng.random_range(0..len);
            let end = (start + rng.random_range(1..128)).min(len);
            let copy = bytes[start..end].to_vec();
            let at = rng.random_range(0..=bytes.len());
            bytes.splice(at..at, copy);
        }
        _ if len > 0 => bytes.truncate(rng.random_range(0..len)),
        _ => bytes.push(b'<'),
    }
}

/// Extracts `iterations` random mutations (1-8 edits each) of the fixtures
/// and checks every row's invariants.
pub fn fuzz_extraction(iterations: usize, seed: u64) -> Result<(), String> {
    let fixtures = fixtures();
    let extractor = Extractor::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..iterations {
        let fixture = &fixtures[i % fixtures.len()];
        let mut bytes = fixture.html.clone().into_bytes();
        for _ in 0..rng.random_range(1..=8) {
            mutate(&mut bytes, &mut rng);
        }
        let html = String::from_utf8_lossy(&bytes);
        let url = if rng.random_bool(0.2) { None } else { fixture.url.as_deref() };
        let row = extractor.extract_html(&html, url, Label::Phishing);
        row.check_invariants()
            .map_err(|e| format!("mutation {i} of {}: {e}\n{html}", fixture.name))?;
        if row.numeric().len() != NUMERIC_FEATURES || row.numeric().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(format!("mutation {i} of {}: bad numeric vector {:?}", fixture.name, row.numeric()));
        }
        if i % 97 == 0 && extractor.extract_html(&html, url, Label::Phishing) != row {
            return Err(format!("mutation {i} of {}: extraction is not repeatable", fixture.name));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; central
/// differences cannot resolve them relatively.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// (tensor, index, analytic, numeric) at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences for every scalar reachable through `params`,
/// compared with the matching `analytic` gradient tensors.
pub fn finite_difference<M: Clone>(
    model: &M,
    params: impl Fn(&mut M) -> Vec<&mut [f64]>,
    analytic: &[Vec<f64>],
    loss: impl Fn(&M) -> f64,
) -> FdReport {
    let mut work = model.clone();
    let shapes: Vec<usize> = params(&mut work).iter().map(|s| s.len()).collect();
    assert_eq!(shapes, analytic.iter().map(Vec::len).collect::<Vec<_>>(), "gradient layout");
    let mut report = FdReport::default();
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let original = params(&mut work)[t][i];
            params(&mut work)[t][i] = original + FD_STEP;
            let plus = loss(&work);
            params(&mut work)[t][i] = original - FD_STEP;
            let minus = loss(&work);
            params(&mut work)[t][i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[t][i], numeric);
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((t, i, analytic[t][i], numeric));
            }
            report.checked += 1;
        }
    }
    report
}

fn owned(slices: Vec<&[f64]>) -> Vec<Vec<f64>> {
    slices.into_iter().map(<[f64]>::to_vec).collect()
}

fn mixed_labels(n: usize) -> Vec<Label> {
    (0..n).map(|i| Label::from_index((i * 7 / 3) % 2)).collect()
}

/// Narrow MLP (11-12-10-8-6-2), train mode with dropout, batch of 8.
pub fn mlp_gradient_check() -> FdReport {
    let widths = [NUMERIC_FEATURES, 12, 10, 8, 6, 2];
    let params = MlpParams::<f64>::with_widths(&widths, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Array2::from_shape_simple_fn((8, NUMERIC_FEATURES), || rng.random_range(-2.0..2.0));
    let labels = mixed_labels(8);
    let dropout_seed = 99;
    let (_, grads) = mlp_backward(&params, x.view(), &labels, dropout_seed).unwrap();
    finite_difference(&params, |p| p.slices_mut(), &owned(grads.slices()), |p| {
        mlp_backward(p, x.view(), &labels, dropout_seed).unwrap().0
    })
}

/// A hashing encoder under a fixed random linear read-out of its outputs.
pub fn encoder_gradient_check(kind: EncoderKind) -> FdReport {
    let config = EncoderConfig {
        kind,
        buckets: 48,
        ngram_min: if kind == EncoderKind::CharNgram { 2 } else { 1 },
        ngram_max: if kind == EncoderKind::CharNgram { 3 } else { 2 },
        dim: 5,
    };
    let mut params = TextEncoderParams::<f64>::init(&config, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    params.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    let texts = ["Sign in to your account", "verify billing now", "Weekly garden club notes", "PayPal login"];
    let inputs: Vec<_> = texts.iter().map(|t| hash_features(t, &config).l2_normalized()).collect();
    let refs: Vec<_> = inputs.iter().collect();
    let readout = Array2::from_shape_simple_fn((texts.len(), config.dim), || rng.random_range(-1.0..1.0));
    let loss = |p: &TextEncoderParams<f64>| (&p.forward_batch(&refs).1 * &readout).sum();
    let (pre, _) = params.forward_batch(&refs);
    let mut grads = TextEncoderParams::zeros(&config);
    params.backward_batch(&refs, &pre, &readout, &mut grads);
    finite_difference(&params, |p| p.slices_mut(), &owned(grads.slices()), loss)
}

/// Every trainable tensor of a fused model (narrow MLP, small encoders,
/// random head) under mean cross-entropy on extracted synthetic pages.
pub fn fused_gradient_check() -> FdReport {
    let mut config = TrainConfig::default();
    config.title = EncoderConfig {
        kind: EncoderKind::CharNgram,
        buckets: 64,
        ngram_min: 2,
        ngram_max: 3,
        dim: 4,
    };
    config.content = EncoderConfig {
        kind: EncoderKind::WordHash,
        buckets: 64,
        ngram_min: 1,
        ngram_max: 1,
        dim: 4,
    };
    let docs = generate_corpus(&SynthConfig {
        documents: 10,
        seed: 5,
        ..SynthConfig::default()
    });
    let rows: Vec<FeatureRow> = docs.iter().map(|d| Extractor::default().extract(d)).collect();
    let numerics: Vec<_> = rows.iter().map(FeatureRow::numeric).collect();
    let norm = NormStats::fit(&numerics).unwrap();
    let widths = [NUMERIC_FEATURES, 10, 9, 8, 6, 2];
    let mut model =
        FusedModel::<f64>::init_with_widths(Variant::Fused, &config, StreamTables::default(), norm, &widths).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    model.head.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    model.head.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    // Zero encoder biases would put empty-text pages exactly on the
    // leaky-ReLU kink, where central differences are meaningless.
    for stream in [&mut model.title, &mut model.content].into_iter().flatten() {
        if let TextStream::Hashed { params, .. } = stream {
            params.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }
    let samples: Vec<_> = docs.iter().zip(&rows).map(|(d, r)| model.prepare(&d.id, r)).collect();
    let batch: Vec<_> = samples.iter().collect();
    let dropout_seed = 4;
    let (_, grads) = model.loss_and_grads(&batch, dropout_seed).unwrap();
    finite_difference(&model, |m| m.slices_mut(), &owned(grads.slices()), |m| {
        m.loss_and_grads(&batch, dropout_seed).unwrap().0
    })
}

// ---------------------------------------------------------------- metrics oracle

type Q = Ratio<i128>;

fn q_to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn q_ratio(num: i128, den: i128) -> Q {
    if den == 0 {
        Q::from_integer(0)
    } else {
        Q::new(num, den)
    }
}

/// Accuracy, precision, recall and F1 in exact rational arithmetic, with
/// the harmonic mean written as 2PR/(P+R) and 0/0 taken as 0.
pub fn rational_report(tp: u64, fp: u64, tn: u64, fn_: u64) -> [f64; 4] {
    let (tp, fp, tn, fn_) = (tp as i128, fp as i128, tn as i128, fn_ as i128);
    let accuracy = q_ratio(tp + tn, tp + fp + tn + fn_);
    let precision = q_ratio(tp, tp + fp);
    let recall = q_ratio(tp, tp + fn_);
    let sum = precision + recall;
    let f1 = if sum == Q::from_integer(0) {
        Q::from_integer(0)
    } else {
        Q::from_integer(2) * (precision * recall) / sum
    };
    [accuracy, precision, recall, f1].map(q_to_f64)
}

pub fn report_values(r: &EvalReport) -> [f64; 4] {
    [r.accuracy, r.precision, r.recall, r.f1]
}

/// Largest deviation of `report` from the rational oracle over `n` seeded
/// random confusion matrices (including sparse ones with zero cells).
pub fn metrics_oracle_max_diff(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let cell = |rng: &mut ChaCha8Rng| {
            if i % 5 == 0 && rng.random_bool(0.5) {
                0
            } else {
                rng.random_range(0..1_000_000u64)
            }
        };
        let (tp, fp, tn, fn_) = (cell(&mut rng), cell(&mut rng), cell(&mut rng), cell(&mut rng));
        if tp + fp + tn + fn_ == 0 {
            continue;
        }
        let got = report_values(&phishlens_core::metrics::report(tp, fp, tn, fn_).unwrap());
        let want = rational_report(tp, fp, tn, fn_);
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    worst
}
