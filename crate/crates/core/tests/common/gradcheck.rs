//! Central finite-difference gradient oracle (double precision) for every
//! trainable building block. Independent of the analytic backward code: it
//! only calls forward functions.

use nmfcnn::nn::*;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Below this norm both gradients are finite-difference noise around an
/// exact zero; compare absolutely.
pub const ZERO_NORM: f64 = 1e-9;

/// ‖a − b‖ / max(‖a‖, ‖b‖). When both norms are below `ZERO_NORM` the
/// absolute difference is scaled so that `ZERO_NORM · TOLERANCE` maps to
/// `TOLERANCE`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < ZERO_NORM {
        diff / ZERO_NORM * TOLERANCE
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn numeric_grad(x: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn uniform(rng: &mut Pcg64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Worst relative error over the input, kernel and bias gradients of one
/// random convolution instance.
pub fn conv2d_instance(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let kernel = if seed % 2 == 0 { 5 } else { 3 };
    let (n, cin, cout, h, w) = (2, 2, 3, 4 + (seed % 3) as usize, 5);
    let shape = [n, cin, h, w];
    let x = uniform(&mut rng, n * cin * h * w, -1.0, 1.0);
    let wt = uniform(&mut rng, cout * cin * kernel * kernel, -0.5, 0.5);
    let b = uniform(&mut rng, cout, -0.5, 0.5);
    let r = uniform(&mut rng, n * cout * h * w, -1.0, 1.0);
    let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
        let y = conv2d_forward(&Tensor::from_vec(shape, x.to_vec()), wt, b, cout, kernel).unwrap();
        dot(y.as_slice(), &r)
    };
    let g = conv2d_backward(
        &Tensor::from_vec(shape, x.clone()),
        &wt,
        &Tensor::from_vec([n, cout, h, w], r.clone()),
        kernel,
        true,
    )
    .unwrap();
    let dx = numeric_grad(&x, &all(x.len()), |p| loss(p, &wt, &b));
    let dw = numeric_grad(&wt, &all(wt.len()), |p| loss(&x, p, &b));
    let db = numeric_grad(&b, &all(b.len()), |p| loss(&x, &wt, p));
    rel_error(g.input.unwrap().as_slice(), &dx)
        .max(rel_error(&g.weight, &dw))
        .max(rel_error(&g.bias, &db))
}

pub fn batchnorm_instance(seed: u64, mode: Mode) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let shape = [3, 2, 3, 4];
    let len: usize = shape.iter().product();
    let x = uniform(&mut rng, len, -2.0, 3.0);
    let gain = uniform(&mut rng, 2, 0.5, 1.5);
    let bias = uniform(&mut rng, 2, -0.5, 0.5);
    let r = uniform(&mut rng, len, -1.0, 1.0);
    let running_mean = uniform(&mut rng, 2, -0.5, 0.5);
    let running_var = uniform(&mut rng, 2, 0.5, 2.0);
    let make = |gain: &[f64], bias: &[f64]| {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.gain.value = gain.to_vec();
        bn.bias.value = bias.to_vec();
        bn.running_mean = running_mean.clone();
        bn.running_var = running_var.clone();
        bn
    };
    let loss = |x: &[f64], gain: &[f64], bias: &[f64]| {
        let mut bn = make(gain, bias);
        dot(bn.forward(&Tensor::from_vec(shape, x.to_vec()), mode).unwrap().as_slice(), &r)
    };
    let mut bn = make(&gain, &bias);
    bn.forward(&Tensor::from_vec(shape, x.clone()), mode).unwrap();
    let dx = bn.backward(&Tensor::from_vec(shape, r.clone())).unwrap();
    let nx = numeric_grad(&x, &all(len), |p| loss(p, &gain, &bias));
    let ng = numeric_grad(&gain, &all(2), |p| loss(&x, p, &bias));
    let nb = numeric_grad(&bias, &all(2), |p| loss(&x, &gain, p));
    rel_error(dx.as_slice(), &nx)
        .max(rel_error(&bn.gain.grad, &ng))
        .max(rel_error(&bn.bias.grad, &nb))
}

pub fn relu_instance(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let len: usize = shape.iter().product();
    // keep every input well away from the kink
    let x: Vec<f64> = uniform(&mut rng, len, 0.01, 1.0)
        .into_iter()
        .map(|v| if rng.random::<bool>() { v } else { -v })
        .collect();
    let r = uniform(&mut rng, len, -1.0, 1.0);
    let analytic = relu_backward(&Tensor::from_vec(shape, x.clone()), &Tensor::from_vec(shape, r.clone()));
    let numeric = numeric_grad(&x, &all(len), |p| dot(relu_forward(&Tensor::from_vec(shape, p.to_vec())).as_slice(), &r));
    rel_error(analytic.as_slice(), &numeric)
}

pub fn maxpool_instance(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let shape = [2, 2, 5, 6];
    let len: usize = shape.iter().product();
    // distinct values at least 1e-3 apart, so no finite-difference step changes a winner
    let mut x: Vec<f64> = (0..len).map(|i| i as f64 * 1e-2).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        x.swap(i, j);
    }
    let (y, arg) = maxpool2x2_forward(&Tensor::from_vec(shape, x.clone()));
    let r = uniform(&mut rng, y.len(), -1.0, 1.0);
    let analytic = maxpool2x2_backward(shape, &arg, &Tensor::from_vec(y.shape(), r.clone()));
    let numeric = numeric_grad(&x, &all(len), |p| dot(maxpool2x2_forward(&Tensor::from_vec(shape, p.to_vec())).0.as_slice(), &r));
    rel_error(analytic.as_slice(), &numeric)
}

pub fn bce_instance(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = 24;
    let z = uniform(&mut rng, n, -4.0, 4.0);
    let y: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let (_, grad) = bce_with_logits(&z, &y).unwrap();
    let numeric = numeric_grad(&z, &all(n), |p| bce_with_logits(p, &y).unwrap().0);
    rel_error(&grad, &numeric)
}

/// Independent summation oracle for the BCE value.
pub fn bce_value_error(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = 37;
    let p = uniform(&mut rng, n, 0.0, 1.0);
    let y: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let mut acc = 0.0;
    for i in 0..n {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        acc -= if y[i] == 1.0 { q.ln() } else { (1.0 - q).ln() };
    }
    let oracle = acc / n as f64;
    (bce_loss(&p, &y).unwrap() - oracle).abs() / oracle
}

pub fn dense_head_instance(seed: u64) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let (n, c, t, f, k) = (2, 5, 3, 4, 3);
    let shape = [n, c, t, f];
    let x = uniform(&mut rng, n * c * t * f, -1.0, 1.0);
    let w = uniform(&mut rng, k * c, -1.0, 1.0);
    let b = uniform(&mut rng, k, -0.5, 0.5);
    let r = uniform(&mut rng, n * t * k, -1.0, 1.0);
    let loss = |x: &[f64], w: &[f64], b: &[f64]| {
        let (y, _) = dense_head_forward(&Tensor::from_vec(shape, x.to_vec()), w, b, k);
        dot(y.as_slice(), &r)
    };
    let (_, pooled) = dense_head_forward(&Tensor::from_vec(shape, x.clone()), &w, &b, k);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; k];
    let dx = dense_head_backward(shape, &pooled, &w, &Tensor::from_vec([n, 1, t, k], r.clone()), &mut dw, &mut db).unwrap();
    let nx = numeric_grad(&x, &all(x.len()), |p| loss(p, &w, &b));
    let nw = numeric_grad(&w, &all(w.len()), |p| loss(&x, p, &b));
    let nb = numeric_grad(&b, &all(k), |p| loss(&x, &w, p));
    rel_error(dx.as_slice(), &nx).max(rel_error(&dw, &nw)).max(rel_error(&db, &nb))
}

/// Composite smoke check through a full (tiny-input) model.
/// Compares sampled coordinates of every parameter tensor and of the input.
pub fn model_instance(arch: Architecture, seed: u64, samples_per_tensor: usize) -> f64 {
    let mut rng = Pcg64::seed_from_u64(seed);
    let (n, t, f, k) = (2, 8, 8, 3);
    let shape = [n, 1, t, f];
    let mut model = Model::<f64>::with_input_bins(arch, k, f, seed);
    let x = uniform(&mut rng, n * t * f, -1.0, 1.0);
    let targets: Vec<f64> = (0..n * (t / 8) * k).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();

    let loss_of = |m: &mut Model<f64>| {
        let z = m.forward(&Tensor::from_vec(shape, x.clone()), Mode::Train).unwrap();
        bce_with_logits(z.as_slice(), &targets).unwrap().0
    };

    model.zero_grad();
    let z = model.forward(&Tensor::from_vec(shape, x.clone()), Mode::Train).unwrap();
    let (_, g) = bce_with_logits(z.as_slice(), &targets).unwrap();
    model.backward(&Tensor::from_vec(z.shape(), g)).unwrap();

    let n_params = model.params().len();
    let mut worst: f64 = 0.0;
    for pi in 0..n_params {
        let len = model.params()[pi].value.len();
        let coords: Vec<usize> = if len <= samples_per_tensor {
            all(len)
        } else {
            (0..samples_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let analytic: Vec<f64> = coords.iter().map(|&c| model.params()[pi].grad[c]).collect();
        let base = model.params()[pi].value.clone();
        let mut probe = model.clone();
        let numeric = numeric_grad(&base, &coords, |v| {
            probe.params_mut()[pi].value.copy_from_slice(v);
            loss_of(&mut probe)
        });
        let analytic_norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = if analytic_norm < 1e-12 {
            // structurally zero (bias feeding batch norm): numeric must be noise
            let worst_abs = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if worst_abs < 1e-8 { 0.0 } else { worst_abs }
        } else {
            rel_error(&analytic, &numeric)
        };
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!("{} {e:e} {:?} {:?}", model.params()[pi].name, &analytic[..2.min(analytic.len())], &numeric[..2.min(numeric.len())]);
        }
        worst = worst.max(e);
    }
    worst
}
