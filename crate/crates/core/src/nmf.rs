//! Non-negative matrix factorization `M ≈ W·H` with the Euclidean
//! multiplicative updates
//!
//! ```text
//! H ← H ⊗ (WᵀM) / (WᵀWH + δ)
//! W ← W ⊗ (MHᵀ) / (WHHᵀ + δ)
//! ```
//!
//! Both updates keep ½‖M − WH‖²_F non-increasing; δ only shortens the step,
//! so the guard does not break that property.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use thiserror::Error;

use crate::matrix::{Matrix, Op};

#[derive(Debug, Error, PartialEq)]
pub enum NmfError {
    #[error("input has a negative entry at ({row}, {col})")]
    Negative { row: usize, col: usize },
    #[error("input has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("input is identically zero; no meaningful factorization")]
    AllZero,
    #[error("invalid options: {0}")]
    Options(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfOptions {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the relative error improvement of one iteration drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    /// Denominator guard δ.
    pub floor: f64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            components: 1,
            max_iters: 500,
            rel_tol: 1e-5,
            seed: 0,
            floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfFactors {
    /// L × R dictionary.
    pub w: Matrix<f64>,
    /// R × N activations.
    pub h: Matrix<f64>,
    /// ‖M − WH‖_F after the last iteration.
    pub final_error: f64,
    pub iterations_run: usize,
}

impl NmfFactors {
    pub fn components(&self) -> usize {
        self.w.cols()
    }
}

/// `‖M − WH‖_F`.
pub fn reconstruction_error(m: &Matrix<f64>, w: &Matrix<f64>, h: &Matrix<f64>) -> Result<f64, NmfError> {
    if w.rows() != m.rows() || h.cols() != m.cols() || w.cols() != h.rows() {
        return Err(NmfError::Shape(format!(
            "M {:?}, W {:?}, H {:?}",
            m.shape(),
            w.shape(),
            h.shape()
        )));
    }
    Ok(error_unchecked(m, w, h))
}

fn error_unchecked(m: &Matrix<f64>, w: &Matrix<f64>, h: &Matrix<f64>) -> f64 {
    let wh = Matrix::product(w, Op::N, h, Op::N);
    m.as_slice()
        .iter()
        .zip(wh.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn validate(m: &Matrix<f64>, opts: &NmfOptions) -> Result<(), NmfError> {
    if opts.components == 0 {
        return Err(NmfError::Options("components must be >= 1".into()));
    }
    if opts.max_iters == 0 {
        return Err(NmfError::Options("max_iters must be >= 1".into()));
    }
    if !(opts.rel_tol > 0.0) {
        return Err(NmfError::Options("rel_tol must be > 0".into()));
    }
    if !(opts.floor > 0.0 && opts.floor.is_finite()) {
        return Err(NmfError::Options("floor must be positive".into()));
    }
    let cols = m.cols().max(1);
    for (i, &v) in m.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(NmfError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        if v < 0.0 {
            return Err(NmfError::Negative {
                row: i / cols,
                col: i % cols,
            });
        }
    }
    if m.as_slice().iter().all(|&v| v == 0.0) {
        return Err(NmfError::AllZero);
    }
    Ok(())
}

/// Multiplicative-update step `x ← x ⊗ num / (den + δ)`.
fn scale_in_place(x: &mut Matrix<f64>, num: &Matrix<f64>, den: &Matrix<f64>, floor: f64) {
    for ((x, &n), &d) in x.as_mut_slice().iter_mut().zip(num.as_slice()).zip(den.as_slice()) {
        *x *= n / (d + floor);
    }
}

pub fn factorize(m: &Matrix<f64>, opts: &NmfOptions) -> Result<NmfFactors, NmfError> {
    factorize_observed(m, opts, |_, _, _, _| {})
}

/// Like [`factorize`], calling `observe(iteration, W, H, error)` once for the
/// initial factors (iteration 0) and after every completed iteration.
pub fn factorize_observed(
    m: &Matrix<f64>,
    opts: &NmfOptions,
    mut observe: impl FnMut(usize, &Matrix<f64>, &Matrix<f64>, f64),
) -> Result<NmfFactors, NmfError> {
    validate(m, opts)?;
    let (l, n) = m.shape();
    let r = opts.components;
    let mean = m.as_slice().iter().sum::<f64>() / (l * n) as f64;
    let scale = (mean / r as f64).sqrt();
    let mut rng = Pcg64::seed_from_u64(opts.seed);
    // uniform on (0, 1]
    let mut draw = || (1.0 - rng.random::<f64>()) * scale;
    let mut w = Matrix::from_fn(l, r, |_, _| draw());
    let mut h = Matrix::from_fn(r, n, |_, _| draw());

    let mut err = error_unchecked(m, &w, &h);
    observe(0, &w, &h, err);
    let mut iterations = 0;
    while iterations < opts.max_iters && err > 0.0 {
        let wt_m = Matrix::product(&w, Op::T, m, Op::N);
        let wt_w = Matrix::product(&w, Op::T, &w, Op::N);
        let wt_wh = Matrix::product(&wt_w, Op::N, &h, Op::N);
        scale_in_place(&mut h, &wt_m, &wt_wh, opts.floor);

        let m_ht = Matrix::product(m, Op::N, &h, Op::T);
        let h_ht = Matrix::product(&h, Op::N, &h, Op::T);
        let w_hht = Matrix::product(&w, Op::N, &h_ht, Op::N);
        scale_in_place(&mut w, &m_ht, &w_hht, opts.floor);

        iterations += 1;
        let next = error_unchecked(m, &w, &h);
        observe(iterations, &w, &h, next);
        let improvement = (err - next) / err;
        err = next;
        if improvement < opts.rel_tol {
            break;
        }
    }
    Ok(NmfFactors {
        w,
        h,
        final_error: err,
        iterations_run: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = Pcg64::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    fn naive_error(m: &Matrix<f64>, w: &Matrix<f64>, h: &Matrix<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let mut wh = 0.0;
                for k in 0..w.cols() {
                    wh += w[(i, k)] * h[(k, j)];
                }
                acc += (m[(i, j)] - wh).powi(2);
            }
        }
        acc.sqrt()
    }

    #[test]
    fn planted_rank_one_is_recovered() {
        let w = random(64, 1, 1);
        let h = random(1, 40, 2);
        let m = Matrix::product(&w, Op::N, &h, Op::N);
        let opts = NmfOptions {
            components: 1,
            max_iters: 2000,
            rel_tol: 1e-15,
            ..Default::default()
        };
        let f = factorize(&m, &opts).unwrap();
        assert!(f.final_error / m.frobenius_norm() < 1e-3);
        assert_eq!(f.w.shape(), (64, 1));
        assert_eq!(f.h.shape(), (1, 40));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let opts = NmfOptions::default();
        assert_eq!(factorize(&Matrix::zeros(4, 4), &opts), Err(NmfError::AllZero));
        let mut m = random(3, 3, 0);
        m[(1, 2)] = -1.0;
        assert_eq!(factorize(&m, &opts), Err(NmfError::Negative { row: 1, col: 2 }));
        m[(1, 2)] = f64::INFINITY;
        assert_eq!(factorize(&m, &opts), Err(NmfError::NonFinite { row: 1, col: 2 }));
        let bad = NmfOptions {
            components: 0,
            ..Default::default()
        };
        assert!(matches!(factorize(&random(3, 3, 0), &bad), Err(NmfError::Options(_))));
    }

    #[test]
    fn objective_is_non_increasing_on_small_instance() {
        let m = random(5, 7, 11);
        let opts = NmfOptions {
            components: 2,
            max_iters: 200,
            rel_tol: f64::MIN_POSITIVE,
            ..Default::default()
        };
        let mut errs = Vec::new();
        let mut min_entry = f64::INFINITY;
        factorize_observed(&m, &opts, |_, w, h, e| {
            errs.push(e);
            let lo = w.as_slice().iter().chain(h.as_slice()).cloned().fold(f64::INFINITY, f64::min);
            min_entry = min_entry.min(lo);
        })
        .unwrap();
        assert!(errs.len() > 1);
        for pair in errs.windows(2) {
            let (a, b) = (pair[0] * pair[0], pair[1] * pair[1]);
            assert!(b <= a * (1.0 + 1e-9), "{a} -> {b}");
        }
        assert!(min_entry >= 0.0);
    }

    #[test]
    fn reconstruction_error_cases() {
        let w = random(6, 2, 1);
        let h = random(2, 5, 2);
        let m = Matrix::product(&w, Op::N, &h, Op::N);
        assert!(reconstruction_error(&m, &w, &h).unwrap() < 1e-12);
        let zero_h = Matrix::zeros(2, 5);
        assert_eq!(reconstruction_error(&m, &w, &zero_h).unwrap(), m.frobenius_norm());
        let m2 = random(6, 5, 3);
        let fast = reconstruction_error(&m2, &w, &h).unwrap();
        let slow = naive_error(&m2, &w, &h);
        assert!((fast - slow).abs() <= 1e-9 * slow);
        assert!(reconstruction_error(&m2, &w, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn factorization_is_deterministic_and_scale_consistent() {
        let m = random(16, 30, 5);
        let opts = NmfOptions {
            components: 3,
            seed: 42,
            ..Default::default()
        };
        let a = factorize(&m, &opts).unwrap();
        let b = factorize(&m, &opts).unwrap();
        assert_eq!(a, b);

        let c = 250.0;
        let scaled = m.map(|v| v * c);
        let s = factorize(&scaled, &opts).unwrap();
        let rel_a = a.final_error / m.frobenius_norm();
        let rel_s = s.final_error / scaled.frobenius_norm();
        assert!((rel_a - rel_s).abs() < 1e-6, "{rel_a} vs {rel_s}");
    }

    #[test]
    fn exact_fit_stops_early() {
        // a single nonzero entry is fit exactly once W and H settle
        let mut m = Matrix::zeros(3, 3);
        m[(0, 0)] = 4.0;
        let f = factorize(&m, &NmfOptions::default()).unwrap();
        assert!(f.iterations_run < 500);
        assert!(f.final_error / 4.0 < 1e-3);
    }
}
