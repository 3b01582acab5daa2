//! Forward and backward passes of the trunk layers.

use super::{NnError, Tensor};
use crate::gemm::Scalar;

/// Training vs. inference behaviour of batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

// ---------------------------------------------------------------------------
// Convolution

fn im2col<T: Scalar>(src: &[T], cin: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    out[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                    out[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                    out[x_lo..x_hi].copy_from_slice(&srow[x_lo + kx - pad..x_hi + kx - pad]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, k: usize, pad: usize, dst: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let drow = &mut plane[(sy - pad) * w..(sy - pad + 1) * w];
                    for (d, &s) in drow[x_lo + kx - pad..x_hi + kx - pad].iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Result<(), NnError> {
    let cin = input.shape()[1];
    if k % 2 == 0 {
        return Err(NnError::Shape(format!("kernel size {k} must be odd")));
    }
    if weight.len() != cout * cin * k * k || bias.len() != cout {
        return Err(NnError::Shape(format!(
            "kernel of {} values / bias of {} values does not fit {cout}x{cin}x{k}x{k}",
            weight.len(),
            bias.len()
        )));
    }
    Ok(())
}

/// Same-size cross-correlation with zero padding `k / 2` and unit stride.
/// `weight` is laid out (out_channels, in_channels, k, k).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    kernel: usize,
) -> Result<Tensor<T>, NnError> {
    check_conv_shapes(input, weight, bias, out_channels, kernel)?;
    let [n, cin, h, w] = input.shape();
    let (hw, ckk, pad) = (h * w, cin * kernel * kernel, kernel / 2);
    let mut out = Tensor::zeros([n, out_channels, h, w]);
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        im2col(input.item(b), cin, h, w, kernel, pad, &mut col);
        let dst = out.item_mut(b);
        T::gemm(
            out_channels,
            ckk,
            hw,
            T::one(),
            weight,
            ckk as isize,
            1,
            &col,
            hw as isize,
            1,
            T::zero(),
            dst,
            hw as isize,
            1,
        );
        for (co, &bv) in bias.iter().enumerate() {
            dst[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    kernel: usize,
    want_input_grad: bool,
) -> Result<ConvGrads<T>, NnError> {
    let [n, cin, h, w] = input.shape();
    let [gn, cout, gh, gw] = grad_out.shape();
    if gn != n || gh != h || gw != w || weight.len() != cout * cin * kernel * kernel {
        return Err(NnError::Shape(format!(
            "conv backward: input {:?}, grad {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let (hw, ckk, pad) = (h * w, cin * kernel * kernel, kernel / 2);
    let mut grads = ConvGrads {
        input: want_input_grad.then(|| Tensor::zeros(input.shape())),
        weight: vec![T::zero(); weight.len()],
        bias: vec![T::zero(); cout],
    };
    let mut col = vec![T::zero(); ckk * hw];
    for b in 0..n {
        let dy = grad_out.item(b);
        im2col(input.item(b), cin, h, w, kernel, pad, &mut col);
        // dW += dY · colᵀ
        T::gemm(
            cout,
            hw,
            ckk,
            T::one(),
            dy,
            hw as isize,
            1,
            &col,
            1,
            hw as isize,
            T::one(),
            &mut grads.weight,
            ckk as isize,
            1,
        );
        for (co, g) in grads.bias.iter_mut().enumerate() {
            *g += dy[co * hw..(co + 1) * hw].iter().copied().sum();
        }
        if let Some(dx) = grads.input.as_mut() {
            // dcol = Wᵀ · dY, scattered back onto the input grid
            T::gemm(
                ckk,
                cout,
                hw,
                T::one(),
                weight,
                1,
                ckk as isize,
                dy,
                hw as isize,
                1,
                T::zero(),
                &mut col,
                hw as isize,
                1,
            );
            col2im(&col, cin, h, w, kernel, pad, dx.item_mut(b));
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Whether backward computes the input gradient (false for the first layer).
    pub propagate: bool,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, weight: Vec<T>, bias: Vec<T>) -> Self {
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                weight,
            ),
            bias: Param::new(format!("{prefix}.bias"), vec![out_channels], bias),
            in_channels,
            out_channels,
            kernel,
            propagate: true,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        if x.shape()[1] != self.in_channels {
            return Err(NnError::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name,
                self.in_channels,
                x.shape()[1]
            )));
        }
        let y = conv2d_forward(x, &self.weight.value, &self.bias.value, self.out_channels, self.kernel)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Option<Tensor<T>>, NnError> {
        let input = self.input.take().ok_or(NnError::NoForwardCache)?;
        let g = conv2d_backward(&input, &self.weight.value, grad, self.kernel, self.propagate)?;
        for (a, b) in self.weight.grad.iter_mut().zip(&g.weight) {
            *a += *b;
        }
        for (a, b) in self.bias.grad.iter_mut().zip(&g.bias) {
            *a += *b;
        }
        Ok(g.input)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the old running estimate in each train-mode update.
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

/// Per-channel batch statistics (mean, biased variance) over batch × time × freq.
fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.item(b)[ch * hw..(ch + 1) * hw].iter().copied().sum();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            v += x.item(b)[ch * hw..(ch + 1) * hw].iter().map(|&e| (e - m) * (e - m)).sum();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gain: Param::new(format!("{prefix}.gain"), vec![channels], vec![T::one(); channels]),
            bias: Param::new(format!("{prefix}.bias"), vec![channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.value.len()
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(NnError::Shape(format!(
                "{}: expected {} channels, got {c}",
                self.gain.name,
                self.channels()
            )));
        }
        let hw = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let count = n * hw;
                if count < 2 {
                    return Err(NnError::BatchNormSingleton);
                }
                let (mean, var) = channel_stats(x);
                let mom = T::from_f64_lossy(self.momentum);
                let unbias = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                for ch in 0..c {
                    self.running_mean[ch] = mom * self.running_mean[ch] + (T::one() - mom) * mean[ch];
                    self.running_var[ch] = mom * self.running_var[ch] + (T::one() - mom) * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            let src = x.item(b);
            let nrm = normalized.item_mut(b);
            for ch in 0..c {
                for i in ch * hw..(ch + 1) * hw {
                    nrm[i] = (src[i] - mean[ch]) * inv_std[ch];
                }
            }
            let dst = out.item_mut(b);
            for ch in 0..c {
                let (g, bi) = (self.gain.value[ch], self.bias.value[ch]);
                for i in ch * hw..(ch + 1) * hw {
                    dst[i] = g * nrm[i] + bi;
                }
            }
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or(NnError::NoForwardCache)?;
        let [n, c, h, w] = grad.shape();
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let dy = &grad.item(b)[ch * hw..(ch + 1) * hw];
                let xh = &cache.normalized.item(b)[ch * hw..(ch + 1) * hw];
                for (&d, &x) in dy.iter().zip(xh) {
                    sum_dy += d;
                    sum_dy_xhat += d * x;
                }
            }
            self.gain.grad[ch] += sum_dy_xhat;
            self.bias.grad[ch] += sum_dy;
            let g = self.gain.value[ch];
            let inv = cache.inv_std[ch];
            for b in 0..n {
                let lo = ch * hw;
                let dy = &grad.item(b)[lo..lo + hw];
                let xh = &cache.normalized.item(b)[lo..lo + hw];
                let out = &mut dx.item_mut(b)[lo..lo + hw];
                match cache.mode {
                    Mode::Train => {
                        let k = g * inv / count;
                        for ((o, &d), &x) in out.iter_mut().zip(dy).zip(xh) {
                            *o = k * (count * d - sum_dy - x * sum_dy_xhat);
                        }
                    }
                    Mode::Eval => {
                        for (o, &d) in out.iter_mut().zip(dy) {
                            *o = g * inv * d;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// ReLU and max pooling

/// NaN inputs pass through unchanged.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        x.shape(),
        x.as_slice().iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect(),
    )
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        x.shape(),
        x.as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    )
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.input = (mode == Mode::Train).then(|| x.clone());
        relu_forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.input.take().ok_or(NnError::NoForwardCache)?;
        Ok(relu_backward(&x, grad))
    }
}

/// 2×2 non-overlapping max over (time, frequency) with floor semantics.
/// Returns the pooled tensor and, per output element, the flat input index
/// of the winner (first occurrence in row-major window order on ties).
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.as_slice();
    let dst = out.as_mut_slice();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for ty in 0..oh {
            for tx in 0..ow {
                let mut best = base + 2 * ty * w + 2 * tx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * ty + dy) * w + 2 * tx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2x2_backward<T: Scalar>(input_shape: [usize; 4], argmax: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.as_mut_slice();
    for (&idx, &g) in argmax.iter().zip(grad.as_slice()) {
        d[idx] += g;
    }
    dx
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2x2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let (y, argmax) = maxpool2x2_forward(x);
        self.cache = (mode == Mode::Train).then(|| (x.shape(), argmax));
        y
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (shape, argmax) = self.cache.take().ok_or(NnError::NoForwardCache)?;
        Ok(maxpool2x2_backward(shape, &argmax, grad))
    }
}
