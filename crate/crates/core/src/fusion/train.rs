use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FusedModel, Sample, Variant};
use crate::corpus::{CorpusSplit, Label, Part};
use crate::encoders::{EncoderConfig, PrecomputedEmbeddings};
use crate::error::{Error, Result};
use crate::extractor::{FeatureRecord, NUMERIC_FEATURES};
use crate::metrics::{confusion, percent, EvalReport};
use crate::optim::{derive_seed, minibatches, Adam, AdamConfig};
use crate::real::Real;
use crate::tabnet::{softmax_cross_entropy, Mode, NormStats};

/// Training hyperparameters. Serialized as flat `key=value` lines; see
/// [`TrainConfig::parse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub stratified: bool,
    pub fractions: [f64; 3],
    pub title: EncoderConfig,
    pub content: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: adam.learning_rate,
            seed: 42,
            early_stop_patience: 5,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            stratified: true,
            fractions: [0.7, 0.15, 0.15],
            title: EncoderConfig::title_default(),
            content: EncoderConfig::content_default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalization)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(self.fractions));
        }
        self.title.validate()?;
        self.content.validate()
    }

    /// Sets one `key=value` entry. Encoder settings use `title_` and
    /// `content_` prefixes (`title_kind`, `content_buckets`, ...).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "stratified" => self.stratified = parse_value(key, value)?,
            "fractions" => self.fractions = parse_fractions(value)?,
            _ => {
                let (enc, field) = if let Some(f) = key.strip_prefix("title_") {
                    (&mut self.title, f)
                } else if let Some(f) = key.strip_prefix("content_") {
                    (&mut self.content, f)
                } else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                };
                match field {
                    "kind" => enc.kind = value.parse().map_err(Error::Config)?,
                    "buckets" => enc.buckets = parse_value(key, value)?,
                    "ngram_min" => enc.ngram_min = parse_value(key, value)?,
                    "ngram_max" => enc.ngram_max = parse_value(key, value)?,
                    "dim" => enc.dim = parse_value(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Defaults overridden by `key=value` lines; blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            config.set(key.trim(), value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_config_string(&self) -> String {
        let f = self.fractions;
        let mut out = format!(
            "epochs={}\nbatch_size={}\nlearning_rate={}\nseed={}\nearly_stop_patience={}\n\
             adam_beta1={}\nadam_beta2={}\nadam_epsilon={}\nstratified={}\nfractions={},{},{}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.seed,
            self.early_stop_patience,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_epsilon,
            self.stratified,
            f[0],
            f[1],
            f[2]
        );
        for (prefix, enc) in [("title", &self.title), ("content", &self.content)] {
            out.push_str(&format!(
                "{prefix}_kind={}\n{prefix}_buckets={}\n{prefix}_ngram_min={}\n{prefix}_ngram_max={}\n{prefix}_dim={}\n",
                enc.kind.as_str(),
                enc.buckets,
                enc.ngram_min,
                enc.ngram_max,
                enc.dim
            ));
        }
        out
    }
}

/// Parses `a,b,c` split fractions.
pub fn parse_fractions(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("fractions need three comma-separated values, got {text:?}")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_value("fractions", p)?;
    }
    Ok(out)
}

/// Optional precomputed embedding tables, one per text stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTables<F: Real> {
    pub title: Option<PrecomputedEmbeddings<F>>,
    pub content: Option<PrecomputedEmbeddings<F>>,
}

impl<F: Real> Default for StreamTables<F> {
    fn default() -> Self {
        Self {
            title: None,
            content: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub train: EvalReport,
    pub validation: Option<EvalReport>,
}

fn index_records<'a>(records: &'a [FeatureRecord]) -> HashMap<&'a str, &'a FeatureRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

fn select<'a>(
    index: &HashMap<&str, &'a FeatureRecord>,
    split: &CorpusSplit,
    part: Part,
) -> Result<Vec<&'a FeatureRecord>> {
    split
        .part(part)
        .iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::UnknownDocument(id.clone())))
        .collect()
}

fn report_on<F: Real>(model: &FusedModel<F>, samples: &[Sample]) -> Result<EvalReport> {
    let predicted: Vec<Label> = model.predict_samples(samples)?.iter().map(|p| p.label).collect();
    let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
    EvalReport::from_confusion(confusion(&predicted, &truth)?)
}

/// Joint end-to-end training of every trainable stream and the head.
#[derive(Debug, Clone)]
pub struct Trainer<F: Real = f32> {
    pub config: TrainConfig,
    pub variant: Variant,
    pub tables: StreamTables<F>,
    /// MLP widths; production models keep the default.
    pub widths: Vec<usize>,
}

impl<F: Real> Trainer<F> {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            variant: Variant::Fused,
            tables: StreamTables::default(),
            widths: crate::tabnet::MLP_WIDTHS.to_vec(),
        }
    }

    pub fn variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn tables(mut self, tables: StreamTables<F>) -> Self {
        self.tables = tables;
        self
    }

    pub fn widths(mut self, widths: &[usize]) -> Self {
        self.widths = widths.to_vec();
        self
    }

    /// Trains on the split's train part. With a non-empty validation part,
    /// early stopping on validation F1 restores the best epoch's
    /// parameters; with an empty one every epoch runs and the last
    /// parameters are kept.
    pub fn train(&self, records: &[FeatureRecord], split: &CorpusSplit) -> Result<(FusedModel<F>, Vec<EpochRecord>)> {
        let cfg = &self.config;
        cfg.validate()?;
        let index = index_records(records);
        let train_recs = select(&index, split, Part::Train)?;
        let val_recs = select(&index, split, Part::Validation)?;
        if train_recs.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let numeric: Vec<[f64; NUMERIC_FEATURES]> = train_recs.iter().map(|r| r.row.numeric()).collect();
        let norm = NormStats::fit(&numeric)?;
        let mut model = FusedModel::init_with_widths(self.variant, cfg, self.tables.clone(), norm, &self.widths)?;
        let mut history = Vec::new();
        if cfg.epochs == 0 {
            return Ok((model, history));
        }
        if model.mlp.is_some() && train_recs.len() < 2 {
            return Err(Error::BatchTooSmall(train_recs.len()));
        }

        let prepare = |recs: &[&FeatureRecord], model: &FusedModel<F>| -> Vec<Sample> {
            recs.iter().map(|r| model.prepare(&r.id, &r.row)).collect()
        };
        let train = prepare(&train_recs, &model);
        let validation = prepare(&val_recs, &model);

        let mut adam = Adam::new(cfg.adam());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, 0));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, FusedModel<F>)> = None;
        let mut stale = 0;
        let mut step = 0u64;

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let batches = minibatches(&order, cfg.batch_size);
            let mut loss_sum = 0.0;
            for (b, idx) in batches.iter().enumerate() {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
                let (logits, cache) = model.forward_batch(&batch, Mode::Train, derive_seed(cfg.seed, 2, step))?;
                step += 1;
                let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
                let (loss, d_logits) = softmax_cross_entropy(&logits, &labels);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 });
                }
                loss_sum += loss;
                let grads = model.backward(&batch, &cache, &d_logits);
                adam.step(model.slices_mut(), grads.slices());
                model.absorb_batch_stats(&cache);
            }
            let val_report = if validation.is_empty() {
                None
            } else {
                Some(report_on(&model, &validation)?)
            };
            let record = EpochRecord {
                epoch: epoch + 1,
                loss: loss_sum / batches.len() as f64,
                train: report_on(&model, &train)?,
                validation: val_report,
            };
            log::info!(
                "epoch {:>3}  loss {:.5}  train F1 {}  validation F1 {}",
                record.epoch,
                record.loss,
                percent(record.train.f1),
                record.validation.as_ref().map_or("-".into(), |r| percent(r.f1))
            );
            history.push(record);

            if let Some(v) = val_report {
                if best.as_ref().is_none_or(|(f1, _)| v.f1 > *f1) {
                    best = Some((v.f1, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        log::info!("early stop after epoch {}", epoch + 1);
                        break;
                    }
                }
            }
        }
        if let Some((_, best_model)) = best {
            model = best_model;
        }
        Ok((model, history))
    }
}

/// Trains the fused model with hashing encoders for both text streams.
pub fn train_fused(
    records: &[FeatureRecord],
    split: &CorpusSplit,
    config: &TrainConfig,
) -> Result<(FusedModel, Vec<EpochRecord>)> {
    Trainer::new(config.clone()).train(records, split)
}

/// Metrics of `model` on one part of the split.
pub fn evaluate<F: Real>(
    model: &FusedModel<F>,
    records: &[FeatureRecord],
    split: &CorpusSplit,
    part: Part,
) -> Result<EvalReport> {
    let index = index_records(records);
    let recs = select(&index, split, part)?;
    if recs.is_empty() {
        return Err(Error::Empty("evaluation split part"));
    }
    let samples: Vec<Sample> = recs.iter().map(|r| model.prepare(&r.id, &r.row)).collect();
    report_on(model, &samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: Variant,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Test-part metrics of each model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.model == variant).map(|r| &r.report)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}{:>11}{:>10}{:>10}", "model", "accuracy", "precision", "recall", "f1")?;
        for row in &self.rows {
            let r = &row.report;
            writeln!(
                f,
                "{:<14}{:>10}{:>11}{:>10}{:>10}",
                row.model.display_name(),
                percent(r.accuracy),
                percent(r.precision),
                percent(r.recall),
                percent(r.f1)
            )?;
        }
        Ok(())
    }
}

/// Trains every variant under the same configuration and seed and
/// evaluates each on the test part.
pub fn ablate<F: Real>(
    records: &[FeatureRecord],
    split: &CorpusSplit,
    trainer: &Trainer<F>,
) -> Result<AblationTable> {
    if split.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let mut rows = Vec::with_capacity(4);
    for variant in Variant::ALL {
        log::info!("training {}", variant.display_name());
        let (model, _) = trainer.clone().variant(variant).train(records, split)?;
        rows.push(AblationRow {
            model: variant,
            report: evaluate(&model, records, split, Part::Test)?,
        });
    }
    Ok(AblationTable { rows })
}
