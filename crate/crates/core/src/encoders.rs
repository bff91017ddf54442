//! Text streams for the page title and page content.
//!
//! A hashing encoder buckets character n-grams or word tokens with 64-bit
//! FNV-1a, L2-normalizes the bucket counts and applies a trainable
//! projection followed by leaky ReLU. Embeddings computed elsewhere (for
//! example by a pretrained transformer) can be plugged in instead through
//! a precomputed embedding file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{leaky_relu, leaky_relu_grad, Real};

pub const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
pub const FNV_PRIME: u64 = 1099511628211;

/// Slope of the leaky ReLU applied to encoder outputs.
pub const ENCODER_SLOPE: f64 = 0.1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    CharNgram,
    WordHash,
    Precomputed,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "char_ngram" => Ok(Self::CharNgram),
            "word_hash" => Ok(Self::WordHash),
            "precomputed" => Ok(Self::Precomputed),
            other => Err(format!("unknown encoder kind {other:?}")),
        }
    }
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::CharNgram => "char_ngram",
            Self::WordHash => "word_hash",
            Self::Precomputed => "precomputed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub buckets: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub dim: usize,
}

impl EncoderConfig {
    /// Character 2..4-grams into 4096 buckets, 64-dim output.
    pub fn title_default() -> Self {
        Self {
            kind: EncoderKind::CharNgram,
            buckets: 4096,
            ngram_min: 2,
            ngram_max: 4,
            dim: 64,
        }
    }

    /// Word tokens into 16384 buckets, 64-dim output.
    pub fn content_default() -> Self {
        Self {
            kind: EncoderKind::WordHash,
            buckets: 16384,
            ngram_min: 1,
            ngram_max: 1,
            dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Config("encoder dim must be at least 1".into()));
        }
        if self.kind != EncoderKind::Precomputed {
            if self.buckets < 2 {
                return Err(Error::Config("encoder needs at least 2 buckets".into()));
            }
            if self.ngram_min < 1 || self.ngram_min > self.ngram_max {
                return Err(Error::Config(format!(
                    "invalid n-gram range {}..={}",
                    self.ngram_min, self.ngram_max
                )));
            }
        }
        Ok(())
    }
}

/// Sparse vector of length `len` with entries sorted by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    pub len: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; the zero vector stays zero.
    pub fn l2_normalized(&self) -> Self {
        let norm = self.norm();
        if norm == 0.0 {
            return self.clone();
        }
        Self {
            len: self.len,
            entries: self.entries.iter().map(|&(i, v)| (i, v / norm)).collect(),
        }
    }
}

fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Bucketed counts of character n-grams or word tokens.
pub fn hash_features(text: &str, config: &EncoderConfig) -> SparseVector {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let buckets = config.buckets as u64;
    let mut add = |piece: &str| {
        let bucket = (fnv1a64(piece.as_bytes()) % buckets) as usize;
        *counts.entry(bucket).or_default() += 1.0;
    };
    let text = normalize_text(text);
    match config.kind {
        EncoderKind::CharNgram => {
            let bounds: Vec<usize> = text
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(text.len()))
                .collect();
            let n_chars = bounds.len() - 1;
            for n in config.ngram_min..=config.ngram_max {
                for start in 0..n_chars.saturating_sub(n - 1) {
                    add(&text[bounds[start]..bounds[start + n]]);
                }
            }
        }
        EncoderKind::WordHash => {
            text.split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .for_each(add);
        }
        EncoderKind::Precomputed => {}
    }
    SparseVector {
        len: config.buckets,
        entries: counts.into_iter().collect(),
    }
}

/// Trainable projection of a hashing encoder: `weight` is dim x buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> TextEncoderParams<F> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            weight: Array2::zeros((config.dim, config.buckets)),
            bias: Array1::zeros(config.dim),
        }
    }

    /// Uniform weights in `±1/sqrt(buckets)`, zero bias.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.buckets as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((config.dim, config.buckets), || {
            F::lit(rng.random_range(-bound..bound))
        });
        Self {
            weight,
            bias: Array1::zeros(config.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn buckets(&self) -> usize {
        self.weight.ncols()
    }

    pub fn check_shape(&self, config: &EncoderConfig) -> Result<()> {
        if self.weight.dim() != (config.dim, config.buckets) {
            return Err(Error::dim("encoder weight", config.dim * config.buckets, self.weight.len()));
        }
        if self.bias.len() != config.dim {
            return Err(Error::dim("encoder bias", config.dim, self.bias.len()));
        }
        Ok(())
    }

    /// Pre-activation `weight · x + bias` for an already normalized sparse input.
    pub fn pre_activation(&self, x: &SparseVector) -> Array1<F> {
        let mut out = self.bias.clone();
        for &(j, v) in &x.entries {
            let v = F::lit(v);
            out.scaled_add(v, &self.weight.column(j));
        }
        out
    }

    /// Batched forward over normalized inputs: returns (pre-activation, output).
    pub fn forward_batch(&self, inputs: &[&SparseVector]) -> (Array2<F>, Array2<F>) {
        let slope = F::lit(ENCODER_SLOPE);
        let mut pre = Array2::zeros((inputs.len(), self.dim()));
        for (mut row, x) in pre.rows_mut().into_iter().zip(inputs) {
            row.assign(&self.pre_activation(x));
        }
        let out = pre.mapv(|v| leaky_relu(v, slope));
        (pre, out)
    }

    /// Accumulates parameter gradients for a batch given the gradient of
    /// the loss with respect to the encoder outputs.
    pub fn backward_batch(
        &self,
        inputs: &[&SparseVector],
        pre: &Array2<F>,
        d_out: &Array2<F>,
        grads: &mut TextEncoderParams<F>,
    ) {
        let slope = F::lit(ENCODER_SLOPE);
        for ((x, pre_row), d_row) in inputs.iter().zip(pre.rows()).zip(d_out.rows()) {
            let dh: Array1<F> = d_row
                .iter()
                .zip(pre_row.iter())
                .map(|(&d, &p)| d * leaky_relu_grad(p, slope))
                .collect();
            grads.bias += &dh;
            for &(j, v) in &x.entries {
                grads.weight.column_mut(j).scaled_add(F::lit(v), &dh);
            }
        }
    }

    pub fn slices(&self) -> Vec<&[F]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Embeds `text` as `leaky_relu(weight · normalize(counts) + bias)`.
pub fn encode<F: Real>(text: &str, config: &EncoderConfig, params: &TextEncoderParams<F>) -> Result<Array1<F>> {
    if config.kind == EncoderKind::Precomputed {
        return Err(Error::Config("precomputed streams are looked up by document id".into()));
    }
    params.check_shape(config)?;
    let x = hash_features(text, config).l2_normalized();
    let slope = F::lit(ENCODER_SLOPE);
    Ok(params.pre_activation(&x).mapv(|v| leaky_relu(v, slope)))
}

/// Embeddings supplied from outside, keyed by document id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings<F: Real> {
    pub dim: usize,
    pub vectors: BTreeMap<String, Array1<F>>,
}

impl<F: Real> PrecomputedEmbeddings<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Array1<F>> {
        self.vectors
            .get(id)
            .ok_or_else(|| Error::UnknownDocument(id.to_string()))
    }
}

/// Reads `id<TAB>v1 v2 ... vd` lines. With `expected_dim = None` the
/// dimension is taken from the first record.
pub fn load_precomputed<F: Real>(path: &Path, expected_dim: Option<usize>) -> Result<PrecomputedEmbeddings<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dim = expected_dim;
    let mut vectors = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| record_err("expected `id<TAB>values`".into()))?;
        if id.is_empty() {
            return Err(record_err("empty id".into()));
        }
        let values: Vec<F> = values
            .split_ascii_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(F::lit)
                    .ok_or_else(|| record_err(format!("invalid number {v:?}")))
            })
            .collect::<Result<_>>()?;
        let want = *dim.get_or_insert(values.len());
        if values.len() != want || want == 0 {
            return Err(record_err(format!(
                "vector has {} values, expected {want}",
                values.len()
            )));
        }
        if vectors.insert(id.to_string(), Array1::from(values)).is_some() {
            return Err(record_err(format!("duplicate id {id:?}")));
        }
    }
    Ok(PrecomputedEmbeddings {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(buckets: usize) -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::WordHash,
            buckets,
            ngram_min: 1,
            ngram_max: 1,
            dim: 4,
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), FNV_OFFSET_BASIS);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        assert!(hash_features("", &word(8)).entries.is_empty());
        assert!(hash_features("   ", &EncoderConfig::title_default()).entries.is_empty());
    }

    #[test]
    fn single_word_bucket() {
        let v = hash_features("a", &word(8));
        assert_eq!(v.entries, vec![(4, 1.0)]);
    }

    #[test]
    fn repeated_word_counts() {
        let v = hash_features("ab ab", &word(1 << 20));
        let bucket = (fnv1a64(b"ab") % (1 << 20)) as usize;
        assert_eq!(v.entries, vec![(bucket, 2.0)]);
        let v = hash_features("AB, ab!", &word(1 << 20));
        assert_eq!(v.entries, vec![(bucket, 2.0)]);
    }

    #[test]
    fn char_ngram_counts() {
        let cfg = EncoderConfig {
            kind: EncoderKind::CharNgram,
            buckets: 1 << 30,
            ngram_min: 2,
            ngram_max: 3,
            dim: 1,
        };
        // "abab": bigrams ab, ba, ab; trigrams aba, bab
        let v = hash_features("  ABAB ", &cfg);
        let total: f64 = v.entries.iter().map(|e| e.1).sum();
        assert_eq!(total, 5.0);
        assert_eq!(v.get((fnv1a64(b"ab") % (1 << 30)) as usize), 2.0);
        assert_eq!(v.get((fnv1a64(b"bab") % (1 << 30)) as usize), 1.0);
        // shorter than the smallest n-gram
        assert!(hash_features("a", &cfg).entries.is_empty());
    }

    #[test]
    fn normalized_has_unit_norm() {
        let v = hash_features("the quick brown fox jumps over the lazy dog", &word(64));
        assert!((v.l2_normalized().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let cfg = word(16);
        let params = TextEncoderParams::<f64>::zeros(&cfg);
        let e = encode("anything at all", &cfg, &params).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_selects_column() {
        let cfg = word(8);
        let mut params = TextEncoderParams::<f64>::zeros(&cfg);
        for d in 0..4 {
            params.weight[[d, 4]] = (d as f64) + 1.0;
            params.bias[d] = 0.5;
        }
        params.weight[[2, 4]] = -3.0;
        let e = encode("a", &cfg, &params).unwrap();
        assert_eq!(e.to_vec(), vec![1.5, 2.5, (-3.0 + 0.5) * 0.1, 4.5]);
        // no features: leaky_relu(bias)
        let e = encode("", &cfg, &params).unwrap();
        assert_eq!(e.to_vec(), vec![0.5; 4]);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = word(8);
        let params = TextEncoderParams::<f64>::zeros(&word(16));
        assert!(encode("a", &cfg, &params).is_err());
    }

    #[test]
    fn precomputed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        std::fs::write(&path, "a\t1 2 3 4\nb\t0.5 -1 0 2e-3\n").unwrap();
        let table = load_precomputed::<f32>(&path, Some(4)).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.get("b").unwrap().to_vec(), vec![0.5, -1.0, 0.0, 0.002]);
        assert!(matches!(table.get("c"), Err(Error::UnknownDocument(_))));

        std::fs::write(&path, "a\t1 2 3 4\nb\t1 2 3 4\nc\t1 2 3\n").unwrap();
        match load_precomputed::<f32>(&path, Some(4)) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected line error, got {other:?}"),
        }

        std::fs::write(&path, "a\t1 2\na\t3 4\n").unwrap();
        assert!(load_precomputed::<f32>(&path, None).is_err());

        std::fs::write(&path, "").unwrap();
        assert!(load_precomputed::<f32>(&path, Some(4)).unwrap().is_empty());
    }
}
