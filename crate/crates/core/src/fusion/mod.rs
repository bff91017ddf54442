//! Embedding fusion: the MLP embedding and the two text embeddings are
//! concatenated and classified by one linear head.
//!
//! The fused vector is a plain concatenation with no extra normalization
//! or dropout:
//!
//! ```text
//! numeric row --standardize--> MLP --FC4 block--> 16 ┐
//! page_title  --------------> title encoder -----> d1 ├─ concat ─> head (2 x (16+d1+d2)) ─> logits
//! page_content -------------> content encoder ---> d2 ┘
//! ```
//!
//! Ablation variants drop streams from the concatenation. The MLP's own
//! FC5 layer is never used for classification; the fusion head takes its
//! place in every variant.

mod checkpoint;
mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::encoders::{hash_features, EncoderConfig, EncoderKind, PrecomputedEmbeddings, SparseVector, TextEncoderParams};
use crate::error::{Error, Result};
use crate::extractor::{Extractor, FeatureRecord, FeatureRow};
use crate::optim::derive_seed;
use crate::real::{softmax2, Real};
use crate::tabnet::{argmax_label, softmax_cross_entropy, Linear, MlpCache, MlpGrads, MlpParams, Mode, NormStats};

pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model, FORMAT_VERSION, MAGIC};
pub use train::{
    ablate, evaluate, parse_fractions, train_fused, AblationRow, AblationTable, EpochRecord, StreamTables, TrainConfig, Trainer,
};

/// Which streams feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MlpOnly,
    TitleOnly,
    ContentOnly,
    Fused,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MlpOnly, Variant::TitleOnly, Variant::ContentOnly, Variant::Fused];

    pub fn uses_mlp(self) -> bool {
        matches!(self, Variant::MlpOnly | Variant::Fused)
    }

    pub fn uses_title(self) -> bool {
        matches!(self, Variant::TitleOnly | Variant::Fused)
    }

    pub fn uses_content(self) -> bool {
        matches!(self, Variant::ContentOnly | Variant::Fused)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MlpOnly => "mlp_only",
            Variant::TitleOnly => "title_only",
            Variant::ContentOnly => "content_only",
            Variant::Fused => "fused",
        }
    }

    /// Human-readable name used in tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::MlpOnly => "MLP-only",
            Variant::TitleOnly => "title-only",
            Variant::ContentOnly => "content-only",
            Variant::Fused => "fused",
        }
    }
}

/// A text stream: a trainable hashing encoder or a frozen lookup table.
#[derive(Debug, Clone, PartialEq)]
pub enum TextStream<F: Real> {
    Hashed {
        config: EncoderConfig,
        params: TextEncoderParams<F>,
    },
    Precomputed(PrecomputedEmbeddings<F>),
}

impl<F: Real> TextStream<F> {
    pub fn hashed(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.kind == EncoderKind::Precomputed {
            return Err(Error::Config("a precomputed stream needs an embedding table".into()));
        }
        let params = TextEncoderParams::init(&config, seed);
        Ok(TextStream::Hashed { config, params })
    }

    pub fn dim(&self) -> usize {
        match self {
            TextStream::Hashed { config, .. } => config.dim,
            TextStream::Precomputed(table) => table.dim,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, TextStream::Hashed { .. })
    }

    fn hashing_config(&self) -> Option<&EncoderConfig> {
        match self {
            TextStream::Hashed { config, .. } => Some(config),
            TextStream::Precomputed(_) => None,
        }
    }
}

/// Model inputs for one document; text is hashed and L2-normalized once.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub numeric: [f64; crate::extractor::NUMERIC_FEATURES],
    pub title: SparseVector,
    pub content: SparseVector,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Softmax probability of the phishing class.
    pub score: f64,
}

impl Prediction {
    pub fn from_logits<F: Real>(benign: F, phishing: F) -> Self {
        let (_, p) = softmax2(benign, phishing);
        Self {
            label: argmax_label(benign, phishing),
            score: p.as_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel<F: Real = f32> {
    pub variant: Variant,
    pub config: TrainConfig,
    pub norm: NormStats<F>,
    pub mlp: Option<MlpParams<F>>,
    pub title: Option<TextStream<F>>,
    pub content: Option<TextStream<F>>,
    /// 2 x fused width; row 0 scores benign, row 1 phishing.
    pub head: Linear<F>,
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct FusedCache<F: Real> {
    mlp: Option<MlpCache<F>>,
    title_pre: Option<Array2<F>>,
    content_pre: Option<Array2<F>>,
    fused: Array2<F>,
}

/// Gradients in the order of [`FusedModel::slices_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGrads<F: Real> {
    pub mlp: Option<MlpGrads<F>>,
    pub title: Option<TextEncoderParams<F>>,
    pub content: Option<TextEncoderParams<F>>,
    pub head: Linear<F>,
}

impl<F: Real> FusedGrads<F> {
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        if let Some(g) = &self.mlp {
            out.extend(g.slices());
        }
        for g in [&self.title, &self.content].into_iter().flatten() {
            out.extend(g.slices());
        }
        out.extend(self.head.slices());
        out
    }
}

impl<F: Real> FusedModel<F> {
    /// Fresh model: MLP and hashing encoders randomly initialized from
    /// `config.seed`, head weights and bias zero (so an untrained model
    /// scores every page 0.5). Precomputed tables replace the hashing
    /// encoder of their stream.
    pub fn init(variant: Variant, config: &TrainConfig, tables: StreamTables<F>, norm: NormStats<F>) -> Result<Self> {
        Self::init_with_widths(variant, config, tables, norm, &crate::tabnet::MLP_WIDTHS)
    }

    /// As [`FusedModel::init`] with non-production MLP widths, for
    /// numerical checks on small networks.
    pub fn init_with_widths(
        variant: Variant,
        config: &TrainConfig,
        tables: StreamTables<F>,
        norm: NormStats<F>,
        widths: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mlp = if variant.uses_mlp() {
            Some(MlpParams::with_widths(widths, derive_seed(seed, 10, 0))?)
        } else {
            None
        };
        let make_stream = |used: bool, table: Option<PrecomputedEmbeddings<F>>, cfg: &EncoderConfig, tag: u64| {
            if !used {
                return Ok(None);
            }
            match table {
                Some(t) => Ok(Some(TextStream::Precomputed(t))),
                None => TextStream::hashed(cfg.clone(), derive_seed(seed, tag, 0)).map(Some),
            }
        };
        let title = make_stream(variant.uses_title(), tables.title, &config.title, 11)?;
        let content = make_stream(variant.uses_content(), tables.content, &config.content, 12)?;
        if norm.mean.len() != widths[0] {
            return Err(Error::dim("normalization width", widths[0], norm.mean.len()));
        }
        let mut model = Self {
            variant,
            config: config.clone(),
            norm,
            mlp,
            title,
            content,
            head: Linear::zeros(0, 2),
        };
        model.head = Linear::zeros(model.fused_dim(), 2);
        Ok(model)
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp.as_ref().map_or(0, MlpParams::embedding_dim)
    }

    pub fn title_dim(&self) -> usize {
        self.title.as_ref().map_or(0, TextStream::dim)
    }

    pub fn content_dim(&self) -> usize {
        self.content.as_ref().map_or(0, TextStream::dim)
    }

    /// Width of the concatenated embedding.
    pub fn fused_dim(&self) -> usize {
        self.mlp_dim() + self.title_dim() + self.content_dim()
    }

    /// Hashes a feature row's text for this model's streams.
    pub fn prepare(&self, id: &str, row: &FeatureRow) -> Sample {
        let hash = |stream: &Option<TextStream<F>>, text: &str| {
            stream
                .as_ref()
                .and_then(TextStream::hashing_config)
                .map(|cfg| hash_features(text, cfg).l2_normalized())
                .unwrap_or_default()
        };
        Sample {
            id: id.to_string(),
            numeric: row.numeric(),
            title: hash(&self.title, &row.page_title),
            content: hash(&self.content, &row.page_content),
            label: row.label,
        }
    }

    pub fn prepare_all(&self, records: &[FeatureRecord]) -> Vec<Sample> {
        records.iter().map(|r| self.prepare(&r.id, &r.row)).collect()
    }

    fn stream_forward(
        stream: &Option<TextStream<F>>,
        batch: &[&Sample],
        text: fn(&Sample) -> &SparseVector,
    ) -> Result<Option<(Option<Array2<F>>, Array2<F>)>> {
        let Some(stream) = stream else {
            return Ok(None);
        };
        Ok(Some(match stream {
            TextStream::Hashed { params, .. } => {
                let inputs: Vec<&SparseVector> = batch.iter().map(|s| text(s)).collect();
                let (pre, out) = params.forward_batch(&inputs);
                (Some(pre), out)
            }
            TextStream::Precomputed(table) => {
                let mut out = Array2::zeros((batch.len(), table.dim));
                for (mut row, s) in out.rows_mut().into_iter().zip(batch) {
                    row.assign(table.get(&s.id)?);
                }
                (None, out)
            }
        }))
    }

    /// Batched forward pass returning the logits (n x 2) and a cache
    /// holding the fused embeddings.
    pub fn forward_batch(&self, batch: &[&Sample], mode: Mode, dropout_seed: u64) -> Result<(Array2<F>, FusedCache<F>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut parts: Vec<Array2<F>> = Vec::with_capacity(3);
        let mlp_cache = match &self.mlp {
            Some(mlp) => {
                let mut x = Array2::zeros((batch.len(), mlp.input_dim()));
                for (mut row, s) in x.rows_mut().into_iter().zip(batch) {
                    row.assign(&self.norm.standardize(&s.numeric));
                }
                let out = mlp.forward(x.view(), mode, dropout_seed)?;
                parts.push(out.embedding);
                Some(out.cache)
            }
            None => None,
        };
        let mut pres = [None, None];
        for (k, (stream, text)) in [
            (&self.title, (|s: &Sample| &s.title) as fn(&Sample) -> &SparseVector),
            (&self.content, |s: &Sample| &s.content),
        ]
        .into_iter()
        .enumerate()
        {
            if let Some((pre, out)) = Self::stream_forward(stream, batch, text)? {
                pres[k] = pre;
                parts.push(out);
            }
        }
        let views: Vec<ArrayView2<'_, F>> = parts.iter().map(|p| p.view()).collect();
        let fused = concatenate(Axis(1), &views).expect("parts share the batch dimension");
        let logits = self.head.forward(fused.view());
        let [title_pre, content_pre] = pres;
        Ok((
            logits,
            FusedCache {
                mlp: mlp_cache,
                title_pre,
                content_pre,
                fused,
            },
        ))
    }

    /// Gradients of a loss whose gradient w.r.t. the logits is `d_logits`.
    pub fn backward(&self, batch: &[&Sample], cache: &FusedCache<F>, d_logits: &Array2<F>) -> FusedGrads<F> {
        let (head, d_fused) = self.head.backward(cache.fused.view(), d_logits);
        let mut offset = 0;
        let mut take = |width: usize| {
            let block = d_fused.slice(s![.., offset..offset + width]).to_owned();
            offset += width;
            block
        };
        let mlp = match (&self.mlp, &cache.mlp) {
            (Some(params), Some(mc)) => {
                let d_emb = take(params.embedding_dim());
                Some(params.backward(mc, None, Some(&d_emb)))
            }
            _ => None,
        };
        let mut stream_grads = [None, None];
        for (k, (stream, pre, text)) in [
            (&self.title, &cache.title_pre, (|s: &Sample| &s.title) as fn(&Sample) -> &SparseVector),
            (&self.content, &cache.content_pre, |s: &Sample| &s.content),
        ]
        .into_iter()
        .enumerate()
        {
            let Some(stream) = stream else { continue };
            let d_out = take(stream.dim());
            if let (TextStream::Hashed { config, params }, Some(pre)) = (stream, pre) {
                let inputs: Vec<&SparseVector> = batch.iter().map(|s| text(s)).collect();
                let mut grads = TextEncoderParams::zeros(config);
                params.backward_batch(&inputs, pre, &d_out, &mut grads);
                stream_grads[k] = Some(grads);
            }
        }
        let [title, content] = stream_grads;
        FusedGrads { mlp, title, content, head }
    }

    /// Train-mode mean cross-entropy and its gradients.
    pub fn loss_and_grads(&self, batch: &[&Sample], dropout_seed: u64) -> Result<(f64, FusedGrads<F>)> {
        let (logits, cache) = self.forward_batch(batch, Mode::Train, dropout_seed)?;
        let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
        let (loss, d_logits) = softmax_cross_entropy(&logits, &labels);
        Ok((loss, self.backward(batch, &cache, &d_logits)))
    }

    /// Trainable tensors: MLP (see [`MlpParams::slices_mut`]), hashing
    /// encoders (weight, bias; title first), then head (weight, bias).
    /// Precomputed tables and normalization statistics are frozen.
    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        if let Some(mlp) = &mut self.mlp {
            out.extend(mlp.slices_mut());
        }
        for stream in [&mut self.title, &mut self.content].into_iter().flatten() {
            if let TextStream::Hashed { params, .. } = stream {
                out.extend(params.slices_mut());
            }
        }
        out.extend(self.head.slices_mut());
        out
    }

    pub fn absorb_batch_stats(&mut self, cache: &FusedCache<F>) {
        if let (Some(mlp), Some(mc)) = (&mut self.mlp, &cache.mlp) {
            mlp.absorb_batch_stats(mc);
        }
    }

    /// Eval-mode predictions, computed in chunks.
    pub fn predict_samples(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let batch: Vec<&Sample> = chunk.iter().collect();
            let (logits, _) = self.forward_batch(&batch, Mode::Eval, 0)?;
            out.extend(logits.rows().into_iter().map(|r| Prediction::from_logits(r[0], r[1])));
        }
        Ok(out)
    }

    pub fn predict_row(&self, id: &str, row: &FeatureRow) -> Result<Prediction> {
        Ok(self.predict_samples(&[self.prepare(id, row)])?[0])
    }

    /// Extracts features from raw HTML and classifies the page. `id` is only
    /// consulted by precomputed streams.
    pub fn predict_html(&self, extractor: &Extractor, id: &str, html: &str, url: Option<&str>) -> Result<Prediction> {
        let row = extractor.extract_html(html, url, Label::Benign);
        self.predict_row(id, &row)
    }
}

/// Single-document forward pass: standardizes the row's numerics and
/// returns the logits and the fused embedding.
pub fn fused_forward<F: Real>(
    model: &FusedModel<F>,
    id: &str,
    row: &FeatureRow,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Array1<F>, Array1<F>)> {
    let sample = model.prepare(id, row);
    let (logits, cache) = model.forward_batch(&[&sample], mode, dropout_seed)?;
    Ok((logits.row(0).to_owned(), cache.fused.row(0).to_owned()))
}

pub fn predict<F: Real>(model: &FusedModel<F>, extractor: &Extractor, id: &str, html: &str, url: Option<&str>) -> Result<Prediction> {
    model.predict_html(extractor, id, html, url)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::NUMERIC_FEATURES;
    use ndarray::array;

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.title.buckets = 32;
        c.title.dim = 3;
        c.content.buckets = 64;
        c.content.dim = 2;
        c
    }

    fn small(variant: Variant) -> FusedModel<f64> {
        FusedModel::init_with_widths(
            variant,
            &small_config(),
            StreamTables::default(),
            NormStats::identity(NUMERIC_FEATURES),
            &[11, 6, 5, 5, 4, 2],
        )
        .unwrap()
    }

    fn row(title: &str) -> FeatureRow {
        let mut r = FeatureRow::empty(Label::Phishing);
        r.page_title = title.into();
        r.page_content = "verify your account now".into();
        r.hyperlink_count = 3;
        r
    }

    #[test]
    fn default_fused_width() {
        let m = FusedModel::<f32>::init(
            Variant::Fused,
            &TrainConfig::default(),
            StreamTables::default(),
            NormStats::identity(NUMERIC_FEATURES),
        )
        .unwrap();
        assert_eq!(m.fused_dim(), 144);
        assert_eq!(m.head.weight.dim(), (2, 144));
        let (logits, fused) = fused_forward(&m, "x", &row("Login"), Mode::Eval, 0).unwrap();
        assert_eq!(fused.len(), 144);
        assert_eq!(logits, array![0.0, 0.0]);
    }

    #[test]
    fn variant_widths() {
        assert_eq!(small(Variant::MlpOnly).fused_dim(), 4);
        assert_eq!(small(Variant::TitleOnly).fused_dim(), 3);
        assert_eq!(small(Variant::ContentOnly).fused_dim(), 2);
        assert_eq!(small(Variant::Fused).fused_dim(), 9);
        assert!(small(Variant::TitleOnly).mlp.is_none());
    }

    #[test]
    fn zero_head_gives_bias() {
        let mut m = small(Variant::Fused);
        m.head.bias = array![0.25, -1.5];
        let (logits, _) = fused_forward(&m, "a", &row("anything"), Mode::Eval, 0).unwrap();
        assert_eq!(logits, array![0.25, -1.5]);
    }

    #[test]
    fn hand_set_head() {
        let head = Linear {
            weight: array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]],
            bias: array![0.5, 1.0],
        };
        let fused = array![[2.0, -1.0, 4.0]];
        // 2 - 2 + 12 + 0.5 = 12.5 ; -2 - 0.5 + 0 + 1 = -1.5
        assert_eq!(head.forward(fused.view()), array![[12.5, -1.5]]);
    }

    #[test]
    fn strongly_benign_bias() {
        let mut m = small(Variant::Fused);
        m.head.bias = array![10.0, -10.0];
        let p = m.predict_row("a", &row("Secure login")).unwrap();
        assert_eq!(p.label, Label::Benign);
        assert!(p.score < 1e-4);
    }

    #[test]
    fn untrained_model_is_a_tie() {
        let m = small(Variant::Fused);
        let p = m.predict_row("a", &row("Secure login")).unwrap();
        assert_eq!(p, Prediction { label: Label::Benign, score: 0.5 });
    }

    #[test]
    fn positive_head_scaling_keeps_labels() {
        let mut m = small(Variant::Fused);
        m.head.weight = Array2::from_shape_fn((2, 9), |(i, j)| ((i * 9 + j) as f64).sin());
        m.head.bias = array![0.1, -0.2];
        let rows: Vec<_> = ["a", "bb", "login now", "paypal"].iter().map(|t| row(t)).collect();
        let before: Vec<_> = rows.iter().map(|r| m.predict_row("x", r).unwrap().label).collect();
        m.head.weight *= 3.7;
        m.head.bias *= 3.7;
        let after: Vec<_> = rows.iter().map(|r| m.predict_row("x", r).unwrap().label).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn precomputed_stream_requires_known_ids() {
        let mut table = PrecomputedEmbeddings::<f64>::new(2);
        table.vectors.insert("known".into(), array![1.0, -1.0]);
        let tables = StreamTables {
            title: Some(table),
            content: None,
        };
        let m = FusedModel::init_with_widths(
            Variant::Fused,
            &small_config(),
            tables,
            NormStats::identity(NUMERIC_FEATURES),
            &[11, 6, 5, 5, 4, 2],
        )
        .unwrap();
        assert_eq!(m.title_dim(), 2);
        let (_, fused) = fused_forward(&m, "known", &row("t"), Mode::Eval, 0).unwrap();
        assert_eq!(fused.slice(s![4..6]), array![1.0, -1.0]);
        assert!(matches!(
            fused_forward(&m, "missing", &row("t"), Mode::Eval, 0),
            Err(Error::UnknownDocument(id)) if id == "missing"
        ));
    }

    #[test]
    fn grads_match_trainable_tensors() {
        let mut m = small(Variant::Fused);
        let samples: Vec<Sample> = ["a b", "c d", "e"].iter().map(|t| m.prepare(t, &row(t))).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let (_, grads) = m.loss_and_grads(&batch, 1).unwrap();
        let g: Vec<usize> = grads.slices().iter().map(|s| s.len()).collect();
        let p: Vec<usize> = m.slices_mut().iter().map(|s| s.len()).collect();
        assert_eq!(g, p);
    }
}
