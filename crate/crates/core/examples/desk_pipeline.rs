//! End-to-end run on a synthetic corpus: extract, split 70/15/15, train
//! every model variant, and print the test-set comparison.
//!
//! usage: desk_pipeline [DOCUMENTS] [SEED]

use std::time::Instant;

use phishlens_core::corpus::split_corpus;
use phishlens_core::extractor::Extractor;
use phishlens_core::fusion::{ablate, TrainConfig, Trainer};
use phishlens_core::synth::{generate_corpus, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut synth = SynthConfig::default();
    if let Some(n) = args.next() {
        synth.documents = n.parse()?;
    }
    if let Some(seed) = args.next() {
        synth.seed = seed.parse()?;
    }
    let start = Instant::now();
    let docs = generate_corpus(&synth);
    let records = Extractor::default().extract_corpus(&docs, 4);
    let config = TrainConfig::default();
    let split = split_corpus(&docs, config.fractions, config.seed, config.stratified)?;
    let trainer = Trainer::<f32>::new(config);
    let (_, history) = trainer.train(&records, &split)?;
    for e in &history {
        println!(
            "epoch {:>2} loss {:.4} train f1 {:.4} validation f1 {:.4}",
            e.epoch,
            e.loss,
            e.train.f1,
            e.validation.map_or(f64::NAN, |v| v.f1)
        );
    }
    println!("{}", ablate(&records, &split, &trainer)?);
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
