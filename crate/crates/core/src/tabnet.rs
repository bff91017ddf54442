//! Multilayer perceptron over the eleven numeric page features.
//!
//! Architecture (input width 11, two output classes):
//!
//! ```text
//! FC1 11   -> 1024  BN  LeakyReLU(0.1)  Dropout(0.2)
//! FC2 1024 -> 2056  BN  LeakyReLU(0.1)  Dropout(0.2)
//! FC3 2056 -> 512   BN  LeakyReLU(0.1)  Dropout(0.2)
//! FC4 512  -> 16    BN  LeakyReLU(0.1)  Dropout(0.3)   <- 16-dim embedding
//! FC5 16   -> 2
//! ```
//!
//! Each hidden block runs linear -> batch norm -> activation -> dropout.
//! The embedding handed to the fusion head is the FC4 block output, i.e. the
//! input of FC5 (after dropout in train mode; dropout is off in eval mode).
//! Gradients are derived by hand for this fixed architecture.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::extractor::{FeatureRow, NUMERIC_FEATURES};
use crate::optim::{derive_seed, minibatches, Adam, AdamConfig};
use crate::real::{leaky_relu, leaky_relu_grad, softmax2, Real};

pub const MLP_WIDTHS: [usize; 6] = [NUMERIC_FEATURES, 1024, 2056, 512, 16, 2];
pub const EMBEDDING_DIM: usize = 16;
pub const DROPOUT_RATES: [f64; 4] = [0.2, 0.2, 0.2, 0.3];
pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

const HIDDEN_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer; `weight` is out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || F::lit(rng.random_range(-bound..bound))),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Gradients for `weight` and `bias` plus the gradient w.r.t. the input.
    pub fn backward(&self, x: ArrayView2<'_, F>, d_out: &Array2<F>) -> (Linear<F>, Array2<F>) {
        let grads = Linear {
            weight: d_out.t().dot(&x).as_standard_layout().into_owned(),
            bias: d_out.sum_axis(Axis(0)),
        };
        (grads, d_out.dot(&self.weight))
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

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrad<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

/// Non-trainable MLP settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpHyper {
    pub dropout: [f64; HIDDEN_BLOCKS],
    pub slope: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self {
            dropout: DROPOUT_RATES,
            slope: LEAKY_SLOPE,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F: Real> {
    /// FC1..FC5.
    pub layers: Vec<Linear<F>>,
    /// Batch norms after FC1..FC4.
    pub norms: Vec<BatchNorm<F>>,
    pub hyper: MlpHyper,
}

/// The production network, deterministically initialized from `seed`.
pub fn mlp_init(seed: u64) -> MlpParams<f32> {
    MlpParams::init(seed)
}

impl<F: Real> MlpParams<F> {
    pub fn init(seed: u64) -> Self {
        Self::with_widths(&MLP_WIDTHS, seed).expect("production widths are valid")
    }

    /// Same architecture with other layer widths. Production models always
    /// use [`MLP_WIDTHS`]; narrow networks exist for numerical checks.
    pub fn with_widths(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() != 6 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs 6 positive widths (input, 4 hidden, output), got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], &mut rng))
            .collect();
        let norms = widths[1..5].iter().map(|&w| BatchNorm::new(w)).collect();
        Ok(Self {
            layers,
            norms,
            hyper: MlpHyper::default(),
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs())
            .chain(self.layers.iter().map(Linear::outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[HIDDEN_BLOCKS].inputs()
    }

    /// Forward pass over a batch (rows are samples). Train mode uses batch
    /// statistics and dropout masks drawn from `dropout_seed`; eval mode
    /// uses running statistics and no dropout. Neither mode mutates the
    /// parameters; see [`MlpParams::absorb_batch_stats`].
    pub fn forward(&self, x: ArrayView2<'_, F>, mode: Mode, dropout_seed: u64) -> Result<MlpOutput<F>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("MLP input width", self.input_dim(), x.ncols()));
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("MLP batch"));
        }
        if mode == Mode::Train && x.nrows() < 2 {
            return Err(Error::BatchTooSmall(x.nrows()));
        }
        let n = x.nrows();
        let slope = F::lit(self.hyper.slope);
        let eps = F::lit(self.hyper.epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut blocks = Vec::with_capacity(HIDDEN_BLOCKS);
        let mut h = x.to_owned();
        for (i, (layer, bn)) in self.layers.iter().zip(&self.norms).enumerate() {
            let z = layer.forward(h.view());
            let (mean, var) = match mode {
                Mode::Train => (
                    z.mean_axis(Axis(0)).expect("non-empty batch"),
                    z.var_axis(Axis(0), F::zero()),
                ),
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
            let xhat = (&z - &mean) * &inv_std;
            let normed = &xhat * &bn.gamma + &bn.beta;
            let mut out = normed.mapv(|v| leaky_relu(v, slope));
            let p = self.hyper.dropout[i];
            let mask = if mode == Mode::Train && p > 0.0 {
                let keep = F::lit(1.0 / (1.0 - p));
                let mask = Array2::from_shape_simple_fn(out.raw_dim(), || {
                    if rng.random::<f64>() < p {
                        F::zero()
                    } else {
                        keep
                    }
                });
                out *= &mask;
                Some(mask)
            } else {
                None
            };
            blocks.push(BlockCache {
                input: h,
                xhat,
                inv_std,
                normed,
                mask,
                batch_mean: mean,
                batch_var: var,
            });
            h = out;
        }
        let logits = self.layers[HIDDEN_BLOCKS].forward(h.view());
        debug_assert_eq!(logits.nrows(), n);
        Ok(MlpOutput {
            logits,
            embedding: h.clone(),
            cache: MlpCache {
                mode,
                blocks,
                embedding: h,
            },
        })
    }

    /// Backpropagates gradients arriving at the logits and/or directly at
    /// the embedding.
    pub fn backward(
        &self,
        cache: &MlpCache<F>,
        d_logits: Option<&Array2<F>>,
        d_embedding: Option<&Array2<F>>,
    ) -> MlpGrads<F> {
        let n = cache.embedding.nrows();
        let slope = F::lit(self.hyper.slope);
        let head = &self.layers[HIDDEN_BLOCKS];
        let (head_grad, mut dh) = match d_logits {
            Some(d) => head.backward(cache.embedding.view(), d),
            None => (
                Linear::zeros(head.inputs(), head.outputs()),
                Array2::zeros((n, head.inputs())),
            ),
        };
        if let Some(d) = d_embedding {
            dh += d;
        }

        let mut layer_grads = Vec::with_capacity(5);
        let mut norm_grads = Vec::with_capacity(HIDDEN_BLOCKS);
        let nf = F::lit(n as f64);
        for i in (0..HIDDEN_BLOCKS).rev() {
            let block = &cache.blocks[i];
            let bn = &self.norms[i];
            let mut d = dh;
            if let Some(mask) = &block.mask {
                d *= mask;
            }
            let d_normed = ndarray::Zip::from(&d)
                .and(&block.normed)
                .map_collect(|&g, &y| g * leaky_relu_grad(y, slope));
            norm_grads.push(BatchNormGrad {
                gamma: (&d_normed * &block.xhat).sum_axis(Axis(0)),
                beta: d_normed.sum_axis(Axis(0)),
            });
            let d_xhat = &d_normed * &bn.gamma;
            let dz = match cache.mode {
                Mode::Train => {
                    let sum_d = d_xhat.sum_axis(Axis(0));
                    let sum_dx = (&d_xhat * &block.xhat).sum_axis(Axis(0));
                    ((&d_xhat * nf) - &sum_d - &(&block.xhat * &sum_dx)) * &block.inv_std / nf
                }
                Mode::Eval => &d_xhat * &block.inv_std,
            };
            let (g, d_in) = self.layers[i].backward(block.input.view(), &dz);
            layer_grads.push(g);
            dh = d_in;
        }
        layer_grads.reverse();
        layer_grads.push(head_grad);
        norm_grads.reverse();
        MlpGrads {
            layers: layer_grads,
            norms: norm_grads,
        }
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates (unbiased variance, exponential moving average).
    pub fn absorb_batch_stats(&mut self, cache: &MlpCache<F>) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.embedding.nrows() as f64;
        let m = F::lit(self.hyper.momentum);
        let keep = F::one() - m;
        let unbias = F::lit(n / (n - 1.0));
        for (bn, block) in self.norms.iter_mut().zip(&cache.blocks) {
            bn.running_mean = &bn.running_mean * keep + &block.batch_mean * m;
            bn.running_var = &bn.running_var * keep + &block.batch_var * (m * unbias);
        }
    }

    /// Trainable tensors in a fixed order: FC1..FC5 (weight, bias), then
    /// BN1..BN4 (gamma, beta). Running statistics are excluded.
    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.slices_mut());
        }
        for bn in &mut self.norms {
            out.push(bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(bn.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<F: Real> {
    input: Array2<F>,
    xhat: Array2<F>,
    inv_std: Array1<F>,
    normed: Array2<F>,
    mask: Option<Array2<F>>,
    pub batch_mean: Array1<F>,
    /// Biased (population) variance of the batch.
    pub batch_var: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F: Real> {
    pub mode: Mode,
    pub blocks: Vec<BlockCache<F>>,
    embedding: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct MlpOutput<F: Real> {
    pub logits: Array2<F>,
    pub embedding: Array2<F>,
    pub cache: MlpCache<F>,
}

/// Gradients congruent with the trainable part of [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<F: Real> {
    pub layers: Vec<Linear<F>>,
    pub norms: Vec<BatchNormGrad<F>>,
}

impl<F: Real> MlpGrads<F> {
    /// Same order as [`MlpParams::slices_mut`].
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        for layer in &self.layers {
            out.extend(layer.slices());
        }
        for bn in &self.norms {
            out.push(bn.gamma.as_slice().expect("standard layout"));
            out.push(bn.beta.as_slice().expect("standard layout"));
        }
        out
    }
}

/// Mean softmax cross-entropy over a batch of two-class logits, with its
/// gradient w.r.t. the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &Array2<F>, labels: &[Label]) -> (f64, Array2<F>) {
    let n = logits.nrows();
    let inv_n = F::lit(1.0 / n as f64);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, 2));
    for (i, &label) in labels.iter().enumerate() {
        let (p0, p1) = softmax2(logits[[i, 0]], logits[[i, 1]]);
        let y = label.index();
        let p = [p0, p1];
        loss -= p[y].as_f64().max(f64::MIN_POSITIVE).ln();
        for k in 0..2 {
            let target = if k == y { F::one() } else { F::zero() };
            grad[[i, k]] = (p[k] - target) * inv_n;
        }
    }
    (loss / n as f64, grad)
}

/// Train-mode forward and backward with mean cross-entropy loss.
pub fn mlp_backward<F: Real>(
    params: &MlpParams<F>,
    x: ArrayView2<'_, F>,
    labels: &[Label],
    dropout_seed: u64,
) -> Result<(f64, MlpGrads<F>)> {
    if labels.len() != x.nrows() {
        return Err(Error::dim("label count", x.nrows(), labels.len()));
    }
    let out = params.forward(x, Mode::Train, dropout_seed)?;
    let (loss, d_logits) = softmax_cross_entropy(&out.logits, labels);
    Ok((loss, params.backward(&out.cache, Some(&d_logits), None)))
}

/// Argmax over two-class logits; equal logits resolve to benign.
pub fn argmax_label<F: Real>(benign: F, phishing: F) -> Label {
    if phishing > benign {
        Label::Phishing
    } else {
        Label::Benign
    }
}

/// Per-feature standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<F: Real> {
    pub mean: Array1<F>,
    pub std: Array1<F>,
}

impl<F: Real> NormStats<F> {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: Array1::zeros(width),
            std: Array1::ones(width),
        }
    }

    /// Population mean and standard deviation; zero deviations become 1.
    pub fn fit(rows: &[[f64; NUMERIC_FEATURES]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("training rows for normalization"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUMERIC_FEATURES];
        let mut std = [0.0; NUMERIC_FEATURES];
        for k in 0..NUMERIC_FEATURES {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self {
            mean: mean.iter().map(|&m| F::lit(m)).collect(),
            std: std.iter().map(|&s| F::lit(s)).collect(),
        })
    }

    pub fn standardize(&self, x: &[f64; NUMERIC_FEATURES]) -> Array1<F> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (F::lit(v) - m) / s)
            .collect()
    }
}

pub fn fit_norm_stats<F: Real>(rows: &[FeatureRow]) -> Result<NormStats<F>> {
    let numeric: Vec<_> = rows.iter().map(FeatureRow::numeric).collect();
    NormStats::fit(&numeric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once eval-mode training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpEpoch {
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Predicted labels in eval mode.
pub fn mlp_predict<F: Real>(params: &MlpParams<F>, x: ArrayView2<'_, F>) -> Result<Vec<Label>> {
    let out = params.forward(x, Mode::Eval, 0)?;
    Ok(out.logits.rows().into_iter().map(|r| argmax_label(r[0], r[1])).collect())
}

/// Trains the MLP on its own (FC5 as classifier) with Adam.
pub fn train_mlp<F: Real>(
    params: &mut MlpParams<F>,
    x: &Array2<F>,
    labels: &[Label],
    config: &MlpTrainConfig,
) -> Result<Vec<MlpEpoch>> {
    if labels.len() != x.nrows() {
        return Err(Error::dim("label count", x.nrows(), labels.len()));
    }
    let mut adam = Adam::new(config.adam);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1, 0));
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let batches = minibatches(&order, config.batch_size);
        for (b, batch) in batches.iter().enumerate() {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let out = params.forward(xb.view(), Mode::Train, derive_seed(config.seed, epoch as u64 + 2, b as u64))?;
            let (loss, d_logits) = softmax_cross_entropy(&out.logits, &yb);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss;
            let grads = params.backward(&out.cache, Some(&d_logits), None);
            adam.step(params.slices_mut(), grads.slices());
            params.absorb_batch_stats(&out.cache);
        }
        let predicted = mlp_predict(params, x.view())?;
        let correct = predicted.iter().zip(labels).filter(|(p, t)| p == t).count();
        let acc = correct as f64 / labels.len() as f64;
        history.push(MlpEpoch {
            loss: loss_sum / batches.len() as f64,
            train_accuracy: acc,
        });
        if config.target_accuracy.is_some_and(|t| acc >= t) {
            break;
        }
    }
    Ok(history)
}
