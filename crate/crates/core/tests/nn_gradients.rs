mod common;

use common::gradcheck::*;
use nmfcnn::nn::{Architecture, Mode};

#[test]
fn conv2d_gradients() {
    for seed in 0..4 {
        let e = conv2d_instance(seed);
        assert!(e < TOLERANCE, "seed {seed}: {e:e}");
    }
}

#[test]
fn batchnorm_gradients_in_both_modes() {
    for seed in 0..4 {
        let e = batchnorm_instance(seed, Mode::Train);
        assert!(e < TOLERANCE, "train seed {seed}: {e:e}");
        let e = batchnorm_instance(seed, Mode::Eval);
        assert!(e < TOLERANCE, "eval seed {seed}: {e:e}");
    }
}

#[test]
fn relu_and_maxpool_gradients() {
    for seed in 0..4 {
        assert!(relu_instance(seed) < TOLERANCE);
        assert!(maxpool_instance(seed) < TOLERANCE);
    }
}

#[test]
fn bce_value_and_gradient() {
    for seed in 0..4 {
        assert!(bce_instance(seed) < TOLERANCE);
        assert!(bce_value_error(seed) < 1e-9);
    }
}

#[test]
fn dense_head_gradients() {
    for seed in 0..4 {
        let e = dense_head_instance(seed);
        assert!(e < TOLERANCE, "seed {seed}: {e:e}");
    }
}

/// Deep composites accumulate rounding in the finite differences, so the
/// end-to-end check uses a looser bound than the per-layer ones.
#[test]
fn whole_model_gradients() {
    for arch in [Architecture::Proposed5, Architecture::Kong9] {
        let e = model_instance(arch, 1, 4);
        assert!(e < 1e-5, "{arch}: {e:e}");
    }
}
