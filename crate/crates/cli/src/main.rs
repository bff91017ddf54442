use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use phishlens_core::corpus::{self, CorpusSplit, Part};
use phishlens_core::domain::DomainResolver;
use phishlens_core::encoders::load_precomputed;
use phishlens_core::extractor::{self, Extractor, DEFAULT_CONTENT_CAP};
use phishlens_core::fusion::{self, parse_fractions, StreamTables, TrainConfig, Trainer};
use phishlens_core::harvester::{self, FetchTask, HarvestOptions, HttpTransport};
use phishlens_core::Label;

const USAGE_ERROR: u8 = 1;
const DATA_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "phishlens", version, about = "Phishing page detection from HTML content")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fetch a URL list into a labeled corpus
    Harvest(HarvestArgs),
    /// Compute numeric features, title and content for every document
    Extract(ExtractArgs),
    /// Partition a corpus into train/validation/test id lists
    Split(SplitArgs),
    /// Train a fused model and write a checkpoint
    Train(TrainArgs),
    /// Report accuracy, precision, recall and F1 of a checkpoint
    Eval(EvalArgs),
    /// Train and test every model variant under one configuration
    Ablate(AblateArgs),
    /// Classify one HTML file or every document of a corpus
    Predict(PredictArgs),
    /// Print the program and checkpoint format versions
    Version,
}

#[derive(Args, Debug)]
struct HarvestArgs {
    /// URL list: one URL per line, `#` starts a comment
    #[arg(long)]
    urls: PathBuf,
    /// Label given to every fetched page
    #[arg(long)]
    label: Label,
    /// Corpus file (JSONL) to write
    #[arg(long)]
    out: PathBuf,
    /// Add to an existing corpus instead of replacing it
    #[arg(long)]
    append: bool,
    /// Maximum requests in flight
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    concurrency: u64,
    /// Whole-request deadline per URL
    #[arg(long, default_value_t = 15_000, value_parser = clap::value_parser!(u64).range(1..))]
    timeout_ms: u64,
    /// Extra attempts after a timeout or network error
    #[arg(long, default_value_t = 0)]
    retries: usize,
    /// Minimum gap between requests to the same host
    #[arg(long, default_value_t = 1000)]
    per_host_interval_ms: u64,
    /// Body size cap in bytes
    #[arg(long, default_value_t = harvester::DEFAULT_MAX_BYTES as u64, value_parser = clap::value_parser!(u64).range(1..))]
    max_bytes: u64,
    /// Public suffix list used to derive base domains
    #[arg(long)]
    suffix_list: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Corpus file (JSONL)
    #[arg(long)]
    corpus: PathBuf,
    /// Feature file (JSONL) to write
    #[arg(long)]
    out: PathBuf,
    /// Maximum characters of visible text kept as content
    #[arg(long, default_value_t = DEFAULT_CONTENT_CAP)]
    cap_chars: usize,
    /// Worker threads
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Public suffix list used to derive base domains
    #[arg(long)]
    suffix_list: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Corpus file (JSONL)
    #[arg(long)]
    corpus: PathBuf,
    /// Train, validation and test fractions summing to 1
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = fractions)]
    fractions: [f64; 3],
    /// Shuffle seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Shuffle without preserving class proportions
    #[arg(long)]
    no_stratify: bool,
    /// Split file (JSON) to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Feature file (JSONL)
    #[arg(long)]
    features: PathBuf,
    /// Split file (JSON)
    #[arg(long)]
    split: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Training configuration (key=value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Title embeddings (`id<TAB>v1 v2 ...`) replacing the hashing encoder
    #[arg(long)]
    precomputed_title: Option<PathBuf>,
    /// Content embeddings (`id<TAB>v1 v2 ...`) replacing the hashing encoder
    #[arg(long)]
    precomputed_content: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Feature file (JSONL)
    #[arg(long)]
    features: PathBuf,
    /// Split file (JSON)
    #[arg(long)]
    split: PathBuf,
    /// Which part of the split to score: train, validation or test
    #[arg(long, default_value = "test")]
    part: Part,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Feature file (JSONL)
    #[arg(long)]
    features: PathBuf,
    /// Split file (JSON)
    #[arg(long)]
    split: PathBuf,
    /// Training configuration (key=value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the table as JSONL
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["html", "corpus"]))]
struct PredictArgs {
    /// Checkpoint
    #[arg(long)]
    model: PathBuf,
    /// A single HTML file
    #[arg(long)]
    html: Option<PathBuf>,
    /// URL the HTML file was fetched from
    #[arg(long, requires = "html")]
    url: Option<String>,
    /// Corpus file (JSONL); one prediction per document
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Maximum characters of visible text kept as content
    #[arg(long, default_value_t = DEFAULT_CONTENT_CAP)]
    cap_chars: usize,
    /// Public suffix list used to derive base domains
    #[arg(long)]
    suffix_list: Option<PathBuf>,
}

fn fractions(text: &str) -> std::result::Result<[f64; 3], String> {
    parse_fractions(text).map_err(|e| e.to_string())
}

fn resolver(suffix_list: Option<&Path>) -> Result<DomainResolver> {
    Ok(match suffix_list {
        Some(path) => DomainResolver::from_suffix_list(path)?,
        None => DomainResolver::heuristic(),
    })
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

fn harvest(args: HarvestArgs) -> Result<()> {
    let resolver = resolver(args.suffix_list.as_deref())?;
    let urls = harvester::load_url_list(&args.urls)?;
    let tasks: Vec<FetchTask> = urls
        .into_iter()
        .map(|url| {
            FetchTask::new(url, args.label)
                .with_timeout(Duration::from_millis(args.timeout_ms))
                .with_max_bytes(args.max_bytes as usize)
        })
        .collect();
    let options = HarvestOptions {
        max_concurrency: args.concurrency as usize,
        per_host_interval: Duration::from_millis(args.per_host_interval_ms),
        retries: args.retries,
    };
    let result = harvester::harvest(&tasks, Arc::new(HttpTransport::default()), &options, &resolver)?;
    for failure in &result.failures {
        log::warn!("{}: {:?} {}", failure.task.url, failure.status, failure.detail);
    }
    let mut docs = if args.append && args.out.exists() {
        corpus::load_corpus_with(&args.out, &resolver)?
    } else {
        Vec::new()
    };
    let before = docs.len();
    let mut known: std::collections::HashSet<String> = docs.iter().map(|d| d.id.clone()).collect();
    docs.extend(result.documents.into_iter().filter(|d| known.insert(d.id.clone())));
    corpus::save_corpus(&args.out, &docs)?;
    println!(
        "fetched {} of {} URLs ({} failed); {} new documents in {}",
        tasks.len() - result.failures.len(),
        tasks.len(),
        result.failures.len(),
        docs.len() - before,
        args.out.display()
    );
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<()> {
    let resolver = resolver(args.suffix_list.as_deref())?;
    let docs = corpus::load_corpus_with(&args.corpus, &resolver)?;
    let extractor = Extractor::new(args.cap_chars).with_resolver(resolver);
    let records = extractor.extract_corpus(&docs, args.jobs as usize);
    extractor::save_features(&args.out, &records)?;
    println!("extracted {} documents to {}", records.len(), args.out.display());
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let docs = corpus::load_corpus(&args.corpus)?;
    let split = corpus::split_corpus(&docs, args.fractions, args.seed, !args.no_stratify)?;
    split.save(&args.out)?;
    println!(
        "train {} / validation {} / test {} -> {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = train_config(args.config.as_deref())?;
    let records = extractor::load_features(&args.features)?;
    let split = CorpusSplit::load(&args.split)?;
    let tables: StreamTables<f32> = StreamTables {
        title: args.precomputed_title.as_deref().map(|p| load_precomputed(p, None)).transpose()?,
        content: args.precomputed_content.as_deref().map(|p| load_precomputed(p, None)).transpose()?,
    };
    let (model, history) = Trainer::new(config).tables(tables).train(&records, &split)?;
    for epoch in &history {
        let validation = epoch
            .validation
            .map_or_else(|| "-".to_string(), |v| format!("{:.4}", v.f1));
        println!(
            "epoch {:>3}  loss {:.6}  train f1 {:.4}  validation f1 {validation}",
            epoch.epoch, epoch.loss, epoch.train.f1
        );
    }
    fusion::save_model(&model, &args.out)?;
    println!("saved {} model to {}", model.variant.display_name(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = fusion::load_model(&args.model)?;
    let records = extractor::load_features(&args.features)?;
    let split = CorpusSplit::load(&args.split)?;
    let report = fusion::evaluate(&model, &records, &split, args.part)?;
    println!("{report}");
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let config = train_config(args.config.as_deref())?;
    let records = extractor::load_features(&args.features)?;
    let split = CorpusSplit::load(&args.split)?;
    let table = fusion::ablate(&records, &split, &Trainer::<f32>::new(config))?;
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, table.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = fusion::load_model(&args.model)?;
    let resolver = resolver(args.suffix_list.as_deref())?;
    if let Some(path) = &args.html {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let html = String::from_utf8_lossy(&bytes);
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let extractor = Extractor::new(args.cap_chars).with_resolver(resolver);
        let p = model.predict_html(&extractor, &id, &html, args.url.as_deref())?;
        println!("{}\t{:.4}", p.label, p.score);
    } else if let Some(path) = &args.corpus {
        let docs = corpus::load_corpus_with(path, &resolver)?;
        let extractor = Extractor::new(args.cap_chars).with_resolver(resolver);
        for doc in &docs {
            let p = model.predict_row(&doc.id, &extractor.extract(doc))?;
            println!("{}\t{}\t{:.4}", doc.id, p.label, p.score);
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Harvest(a) => harvest(a),
        Command::Extract(a) => extract(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Predict(a) => predict(a),
        Command::Version => {
            println!("phishlens {}", env!("CARGO_PKG_VERSION"));
            println!("checkpoint format {}", fusion::FORMAT_VERSION);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHISHLENS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(DATA_ERROR)
        }
    }
}
