use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use super::layers::{BatchNorm2d, Conv2d, MaxPool2x2, Mode, Param, Relu, BN_MOMENTUM};
use super::loss::sigmoid;
use super::{NnError, Tensor};
use crate::features::{LogMelSpectrogram, N_MELS};
use crate::gemm::Scalar;
use crate::matrix::Matrix;

/// Output channels of the four convolutional blocks.
pub const BLOCK_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Time (and frequency) downsampling of the trunk: three 2×2 pools.
pub const TIME_POOLING: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// One 5×5 convolution per block.
    Proposed5,
    /// Two 3×3 convolutions per block.
    Kong9,
}

impl Architecture {
    pub fn kernel(self) -> usize {
        match self {
            Architecture::Proposed5 => 5,
            Architecture::Kong9 => 3,
        }
    }

    pub fn convs_per_block(self) -> usize {
        match self {
            Architecture::Proposed5 => 1,
            Architecture::Kong9 => 2,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Architecture::Proposed5 => 0,
            Architecture::Kong9 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Architecture::Proposed5),
            1 => Some(Architecture::Kong9),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Proposed5 => "proposed5",
            Architecture::Kong9 => "kong9",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "proposed5" => Ok(Architecture::Proposed5),
            "kong9" => Ok(Architecture::Kong9),
            other => Err(format!("unknown architecture `{other}` (expected proposed5 or kong9)")),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu<T>),
    Pool(MaxPool2x2),
}

/// Per-frame class probabilities of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    /// T′ × K, entries in (0, 1).
    pub values: Matrix<f64>,
    pub frame_hop_seconds: f64,
}

impl FramePosteriors {
    /// Clip-level probability per class: max over frames.
    pub fn clip_probabilities(&self) -> Vec<f64> {
        (0..self.values.cols())
            .map(|k| {
                (0..self.values.rows())
                    .map(|t| self.values[(t, k)])
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    pooled: Vec<T>,
    input_shape: [usize; 4],
}

/// Convolutional trunk plus the frame-wise head: mean over frequency, dense
/// 512 → K, sigmoid (applied outside, in the loss or in `predict`).
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: Architecture,
    pub n_classes: usize,
    pub layers: Vec<Layer<T>>,
    pub dense_weight: Param<T>,
    pub dense_bias: Param<T>,
    /// Per-mel-bin input standardization; identity until a trainer sets it.
    pub feature_mean: Vec<T>,
    pub feature_std: Vec<T>,
    head: Option<HeadCache<T>>,
}

fn kaiming_uniform<T: Scalar>(rng: &mut Pcg64, n: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64_lossy(bound * (2.0 * rng.random::<f64>() - 1.0)))
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Fresh model for 64-bin log-mel input.
    pub fn build(arch: Architecture, n_classes: usize, seed: u64) -> Self {
        Self::with_input_bins(arch, n_classes, N_MELS, seed)
    }

    pub fn with_input_bins(arch: Architecture, n_classes: usize, input_bins: usize, seed: u64) -> Self {
        assert!(n_classes >= 1, "at least one class is required");
        let mut rng = Pcg64::seed_from_u64(seed);
        let k = arch.kernel();
        let mut layers = Vec::new();
        let mut cin = 1;
        for (b, &cout) in BLOCK_CHANNELS.iter().enumerate() {
            for c in 0..arch.convs_per_block() {
                let prefix = format!("block{}.conv{}", b + 1, c + 1);
                let fan_in = cin * k * k;
                let weight = kaiming_uniform(&mut rng, cout * fan_in, fan_in);
                let mut conv = Conv2d::new(&prefix, cin, cout, k, weight, vec![T::zero(); cout]);
                conv.propagate = !(b == 0 && c == 0);
                layers.push(Layer::Conv(conv));
                layers.push(Layer::BatchNorm(BatchNorm2d::new(&format!("block{}.bn{}", b + 1, c + 1), cout)));
                layers.push(Layer::Relu(Relu::default()));
                cin = cout;
            }
            if b < BLOCK_CHANNELS.len() - 1 {
                layers.push(Layer::Pool(MaxPool2x2::default()));
            }
        }
        let width = BLOCK_CHANNELS[3];
        let dense_weight = Param::new(
            "head.dense.weight",
            vec![n_classes, width],
            kaiming_uniform(&mut rng, n_classes * width, width),
        );
        let dense_bias = Param::new("head.dense.bias", vec![n_classes], vec![T::zero(); n_classes]);
        Self {
            arch,
            n_classes,
            layers,
            dense_weight,
            dense_bias,
            feature_mean: vec![T::zero(); input_bins],
            feature_std: vec![T::one(); input_bins],
            head: None,
        }
    }

    pub fn input_bins(&self) -> usize {
        self.feature_mean.len()
    }

    /// Learnable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gain);
                    out.push(&bn.bias);
                }
                _ => {}
            }
        }
        out.push(&self.dense_weight);
        out.push(&self.dense_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gain);
                    out.push(&mut bn.bias);
                }
                _ => {}
            }
        }
        out.push(&mut self.dense_weight);
        out.push(&mut self.dense_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Replaces every batch-norm running estimate with the plain average of
    /// the batch statistics over `batches`, taken at the current weights.
    /// Learnable parameters are untouched.
    pub fn estimate_batchnorm_statistics<'a>(
        &mut self,
        batches: impl IntoIterator<Item = &'a Tensor<T>>,
    ) -> Result<(), NnError>
    where
        T: 'a,
    {
        let mut seen = 0usize;
        let result = batches.into_iter().try_for_each(|x| {
            seen += 1;
            for layer in &mut self.layers {
                if let Layer::BatchNorm(bn) = layer {
                    bn.momentum = (seen - 1) as f64 / seen as f64;
                }
            }
            self.forward(x, Mode::Train).map(|_| ())
        });
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.momentum = BN_MOMENTUM;
            }
        }
        result
    }

    /// Trunk + head. Input (batch, 1, T, bins), already standardized; output
    /// logits shaped (batch, 1, T/8, K).
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let [n, c, t, f] = x.shape();
        if c != 1 || f != self.input_bins() {
            return Err(NnError::Shape(format!(
                "model expects (batch, 1, T, {}), got {:?}",
                self.input_bins(),
                x.shape()
            )));
        }
        if t < TIME_POOLING || f < TIME_POOLING || n == 0 {
            return Err(NnError::Shape(format!("input {:?} too small for three 2x2 poolings", x.shape())));
        }
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(conv) => conv.forward(&h, mode)?,
                Layer::BatchNorm(bn) => bn.forward(&h, mode)?,
                Layer::Relu(r) => r.forward(&h, mode),
                Layer::Pool(p) => p.forward(&h, mode),
            };
        }
        self.head_forward(&h, mode)
    }

    fn head_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let (logits, pooled) = dense_head_forward(x, &self.dense_weight.value, &self.dense_bias.value, self.n_classes);
        self.head = (mode == Mode::Train).then(|| HeadCache {
            pooled,
            input_shape: x.shape(),
        });
        Ok(logits)
    }

    /// Back-propagates logit gradients, accumulating into every parameter's
    /// `grad`. Requires a preceding train-mode forward.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<(), NnError> {
        let cache = self.head.take().ok_or(NnError::NoForwardCache)?;
        let mut grad = dense_head_backward(
            cache.input_shape,
            &cache.pooled,
            &self.dense_weight.value,
            grad_logits,
            &mut self.dense_weight.grad,
            &mut self.dense_bias.grad,
        )?;
        for layer in self.layers.iter_mut().rev() {
            grad = match layer {
                Layer::Conv(conv) => match conv.backward(&grad)? {
                    Some(g) => g,
                    None => return Ok(()),
                },
                Layer::BatchNorm(bn) => bn.backward(&grad)?,
                Layer::Relu(r) => r.backward(&grad)?,
                Layer::Pool(p) => p.backward(&grad)?,
            };
        }
        Ok(())
    }

    /// Standardizes a frames × bins log-mel matrix with the stored statistics.
    pub fn standardize(&self, logmel: &Matrix<f64>) -> Vec<T> {
        let bins = self.input_bins();
        logmel
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % bins;
                (T::from_f64_lossy(v) - self.feature_mean[j]) / self.feature_std[j]
            })
            .collect()
    }

    /// Eval-mode frame posteriors for one clip.
    pub fn predict(&mut self, logmel: &LogMelSpectrogram) -> Result<FramePosteriors, NnError> {
        let (frames, bins) = logmel.values.shape();
        if bins != self.input_bins() {
            return Err(NnError::Shape(format!(
                "features have {bins} bins, model expects {}",
                self.input_bins()
            )));
        }
        let x = Tensor::from_vec([1, 1, frames, bins], self.standardize(&logmel.values));
        let logits = self.forward(&x, Mode::Eval)?;
        let [_, _, t, k] = logits.shape();
        let values = Matrix::from_vec(
            t,
            k,
            logits
                .as_slice()
                .iter()
                .map(|&z| sigmoid(z).to_f64().unwrap())
                .collect(),
        );
        Ok(FramePosteriors {
            values,
            frame_hop_seconds: logmel.frame_hop_seconds * TIME_POOLING as f64,
        })
    }
}

/// Frames after the trunk's three floor-poolings.
/// Frame-wise head: mean over the frequency axis, then a dense map from
/// channels to `k` logits. Returns logits (batch, 1, T, k) and the pooled
/// (batch·T) × channels matrix needed by the backward pass.
pub fn dense_head_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], k: usize) -> (Tensor<T>, Vec<T>) {
    let [n, c, t, f] = x.shape();
    let inv_f = T::one() / T::from_usize(f).unwrap();
    let mut pooled = vec![T::zero(); n * t * c];
    for b in 0..n {
        let item = x.item(b);
        for ch in 0..c {
            for ti in 0..t {
                let s: T = item[(ch * t + ti) * f..(ch * t + ti + 1) * f].iter().copied().sum();
                pooled[(b * t + ti) * c + ch] = s * inv_f;
            }
        }
    }
    let mut logits = vec![T::zero(); n * t * k];
    for row in logits.chunks_exact_mut(k) {
        row.copy_from_slice(bias);
    }
    T::gemm(n * t, c, k, T::one(), &pooled, c as isize, 1, weight, 1, c as isize, T::one(), &mut logits, k as isize, 1);
    (Tensor::from_vec([n, 1, t, k], logits), pooled)
}

/// Backward of [`dense_head_forward`]: accumulates into `weight_grad` and
/// `bias_grad`, returns the gradient with respect to the head input.
pub fn dense_head_backward<T: Scalar>(
    input_shape: [usize; 4],
    pooled: &[T],
    weight: &[T],
    grad_logits: &Tensor<T>,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) -> Result<Tensor<T>, NnError> {
    let [n, c, t, f] = input_shape;
    let k = bias_grad.len();
    if grad_logits.shape() != [n, 1, t, k] {
        return Err(NnError::Shape(format!(
            "logit gradient {:?} does not match head output {:?}",
            grad_logits.shape(),
            [n, 1, t, k]
        )));
    }
    let dl = grad_logits.as_slice();
    let rows = n * t;
    // dW += dLᵀ · pooled
    T::gemm(k, rows, c, T::one(), dl, 1, k as isize, pooled, c as isize, 1, T::one(), weight_grad, c as isize, 1);
    for row in dl.chunks_exact(k) {
        for (g, &d) in bias_grad.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dpooled = vec![T::zero(); rows * c];
    T::gemm(rows, k, c, T::one(), dl, k as isize, 1, weight, c as isize, 1, T::zero(), &mut dpooled, c as isize, 1);
    let inv_f = T::one() / T::from_usize(f).unwrap();
    let mut grad = Tensor::zeros(input_shape);
    for b in 0..n {
        let item = grad.item_mut(b);
        for ch in 0..c {
            for ti in 0..t {
                let g = dpooled[(b * t + ti) * c + ch] * inv_f;
                item[(ch * t + ti) * f..(ch * t + ti + 1) * f].iter_mut().for_each(|v| *v = g);
            }
        }
    }
    Ok(grad)
}

pub fn output_frames(input_frames: usize) -> usize {
    input_frames / 2 / 2 / 2
}
