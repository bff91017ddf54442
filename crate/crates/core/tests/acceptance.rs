//! Acceptance runner: one PASS/FAIL/SKIP line per criterion; exits nonzero
//! if any criterion fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use phishlens_core::corpus::{load_corpus, part_sizes, save_corpus, split_corpus, split_items, CorpusSplit, Part};
use phishlens_core::encoders::EncoderKind;
use phishlens_core::extractor::{load_features, save_features, Extractor};
use phishlens_core::fusion::{ablate, evaluate, load_model, save_model, TrainConfig, Trainer, Variant};
use phishlens_core::synth::{generate_corpus, SynthConfig};
use phishlens_core::Label;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn within(limit: Duration, elapsed: Duration, detail: String, ok: bool) -> Outcome {
    let detail = format!("{detail}; {elapsed:.2?} (limit {limit:?})");
    if ok && elapsed <= limit {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let diff = common::metrics_oracle_max_diff(1000, 0xacce);
    within(Duration::from_secs(1), start.elapsed(), format!("1000 matrices, max diff {diff:.3e}"), diff < 1e-12)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = [
        ("mlp", common::mlp_gradient_check()),
        ("char encoder", common::encoder_gradient_check(EncoderKind::CharNgram)),
        ("word encoder", common::encoder_gradient_check(EncoderKind::WordHash)),
        ("fused", common::fused_gradient_check()),
    ];
    let ok = reports.iter().all(|(_, r)| r.passed());
    let detail = reports
        .iter()
        .map(|(name, r)| format!("{name} {:.2e} over {}", r.max_relative_error, r.checked))
        .collect::<Vec<_>>()
        .join(", ");
    within(Duration::from_secs(30), start.elapsed(), detail, ok)
}

fn extraction() -> Outcome {
    let fixtures = common::fixtures();
    let failures: Vec<String> = fixtures
        .iter()
        .filter_map(|f| common::check_fixture(f).err().map(|e| format!("{}: {e}", f.name)))
        .collect();
    if fixtures.len() < 12 || !failures.is_empty() {
        return Outcome::Fail(format!("{} fixtures; {}", fixtures.len(), failures.join("; ")));
    }
    match common::fuzz_extraction(10_000, 0x5eed) {
        Ok(()) => Outcome::Pass(format!("{} fixtures exact, 10000 fuzz mutations clean", fixtures.len())),
        Err(e) => Outcome::Fail(format!("fuzz: {e}")),
    }
}

fn desk_scale() -> Result<Outcome, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let synth = SynthConfig::default();
    let docs = generate_corpus(&synth);
    let records = Extractor::default().extract_corpus(&docs, 4);
    let config = TrainConfig::default();
    let split = split_corpus(&docs, config.fractions, config.seed, config.stratified)?;
    let trainer = Trainer::<f32>::new(config);
    let (model, _) = trainer.train(&records, &split)?;
    let validation = evaluate(&model, &records, &split, Part::Validation)?.f1;
    let table = ablate(&records, &split, &trainer)?;
    let f1 = |v: Variant| table.get(v).map_or(f64::NAN, |r| r.f1);
    let best_single = f1(Variant::MlpOnly).max(f1(Variant::TitleOnly)).max(f1(Variant::ContentOnly));
    let fused = f1(Variant::Fused);
    let detail = format!(
        "{} docs, validation f1 {validation:.4} (>= 0.95), test f1 fused {fused:.4} vs mlp {:.4} title {:.4} content {:.4}",
        docs.len(),
        f1(Variant::MlpOnly),
        f1(Variant::TitleOnly),
        f1(Variant::ContentOnly)
    );
    let ok = validation >= 0.95 && fused >= best_single - 0.01;
    Ok(within(Duration::from_secs(180), start.elapsed(), detail, ok))
}

fn split_protocol() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut checked = 0;
    for n in [100usize, 1000] {
        let items: Vec<(String, Label)> = (0..n)
            .map(|i| (format!("d{i}"), if i % 3 == 0 { Label::Phishing } else { Label::Benign }))
            .collect();
        for fractions in [[0.7, 0.15, 0.15], [0.8, 0.0, 0.2]] {
            for seed in [0u64, 42, 7777] {
                let split = split_items(&items, fractions, seed, true)?;
                let sizes = [split.train.len(), split.validation.len(), split.test.len()];
                if sizes != part_sizes(n, fractions)? {
                    return Ok(Outcome::Fail(format!("n={n} {fractions:?}: sizes {sizes:?}")));
                }
                for (size, f) in sizes.iter().zip(fractions) {
                    if (*size as f64 - f * n as f64).abs() > 1.0 {
                        return Ok(Outcome::Fail(format!("n={n} {fractions:?}: sizes {sizes:?}")));
                    }
                }
                if split != split_items(&items, fractions, seed, true)? {
                    return Ok(Outcome::Fail(format!("n={n} seed {seed}: not deterministic")));
                }
                checked += 1;
            }
        }
    }
    Ok(Outcome::Pass(format!("{checked} (N, fractions, seed) combinations within ±1 and repeatable")))
}

/// extract → split → train → eval through files, returning checkpoint
/// bytes and the printed report.
fn pipeline_run(dir: &Path, corpus: &Path, config: &TrainConfig) -> Result<(Vec<u8>, String), Box<dyn std::error::Error>> {
    let docs = load_corpus(corpus)?;
    let features = dir.join("features.jsonl");
    save_features(&features, &Extractor::default().extract_corpus(&docs, 3))?;
    let split_path = dir.join("split.json");
    split_corpus(&docs, config.fractions, config.seed, config.stratified)?.save(&split_path)?;
    let records = load_features(&features)?;
    let split = CorpusSplit::load(&split_path)?;
    let (model, _) = Trainer::<f32>::new(config.clone()).train(&records, &split)?;
    let checkpoint = dir.join("model.mtlp");
    save_model(&model, &checkpoint)?;
    let report = evaluate(&load_model(&checkpoint)?, &records, &split, Part::Test)?;
    Ok((std::fs::read(&checkpoint)?, report.to_string()))
}

fn determinism() -> Result<Outcome, Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let corpus = root.path().join("corpus.jsonl");
    save_corpus(&corpus, &generate_corpus(&SynthConfig {
        documents: 150,
        ..SynthConfig::default()
    }))?;
    let mut config = TrainConfig::default();
    config.epochs = 4;
    config.seed = 31;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.path().join(name);
        std::fs::create_dir(&dir)?;
        runs.push(pipeline_run(&dir, &corpus, &config)?);
    }
    let same_bytes = runs[0].0 == runs[1].0;
    let same_report = runs[0].1 == runs[1].1;
    let detail = format!("checkpoint {} bytes identical: {same_bytes}, reports identical: {same_report}", runs[0].0.len());
    Ok(if same_bytes && same_report { Outcome::Pass(detail) } else { Outcome::Fail(detail) })
}

fn full_corpus() -> Result<Outcome, Box<dyn std::error::Error>> {
    let Some(path) = std::env::var_os("PHISHLENS_MTLP_CORPUS") else {
        return Ok(Outcome::Skip("set PHISHLENS_MTLP_CORPUS to a labeled JSONL corpus to run".into()));
    };
    let start = Instant::now();
    let docs = load_corpus(Path::new(&path))?;
    let jobs = std::thread::available_parallelism().map_or(4, |n| n.get());
    let records = Extractor::default().extract_corpus(&docs, jobs);
    let config = TrainConfig::default();
    let split = split_corpus(&docs, config.fractions, config.seed, config.stratified)?;
    let (model, _) = Trainer::<f32>::new(config).train(&records, &split)?;
    let r = evaluate(&model, &records, &split, Part::Test)?;
    Ok(Outcome::Pass(format!(
        "{} docs, test accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}; {:.1?} (not gated)",
        docs.len(),
        r.accuracy,
        r.precision,
        r.recall,
        r.f1,
        start.elapsed()
    )))
}

fn flatten(result: Result<Outcome, Box<dyn std::error::Error>>) -> Outcome {
    result.unwrap_or_else(|e| Outcome::Fail(format!("error: {e}")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("metric oracle equivalence", metric_oracle),
        ("gradient correctness", gradients),
        ("feature extraction fixtures and fuzz", extraction),
        ("desk-scale end-to-end", || flatten(desk_scale())),
        ("split protocol", || flatten(split_protocol())),
        ("pipeline determinism", || flatten(determinism())),
        ("full corpus run", || flatten(full_corpus())),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{}] {name}: {detail}", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
