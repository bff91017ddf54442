//! Writes a planted-signal synthetic corpus as JSONL.
//!
//! usage: synth_corpus OUT [DOCUMENTS] [SEED] [--numeric-only]

use std::path::PathBuf;
use std::process::ExitCode;

use phishlens_core::corpus::save_corpus;
use phishlens_core::synth::{generate_corpus, SynthConfig};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let numeric_only = args.iter().any(|a| a == "--numeric-only");
    let positional: Vec<&String> = args.iter().filter(|a| !a.starts_with("--")).collect();
    let Some(out) = positional.first() else {
        eprintln!("usage: synth_corpus OUT [DOCUMENTS] [SEED] [--numeric-only]");
        return ExitCode::from(1);
    };
    let mut config = SynthConfig::default();
    if let Some(n) = positional.get(1).and_then(|s| s.parse().ok()) {
        config.documents = n;
    }
    if let Some(seed) = positional.get(2).and_then(|s| s.parse().ok()) {
        config.seed = seed;
    }
    if numeric_only {
        config = SynthConfig::numeric_only(config.documents, config.seed);
    }
    let docs = generate_corpus(&config);
    if let Err(e) = save_corpus(&PathBuf::from(out.as_str()), &docs) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    println!("wrote {} documents to {out}", docs.len());
    ExitCode::SUCCESS
}
