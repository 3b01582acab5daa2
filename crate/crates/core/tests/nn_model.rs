use nmfcnn::features::{LogMelSpectrogram, FRAME_HOP_SECONDS};
use nmfcnn::matrix::Matrix;
use nmfcnn::nn::*;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

fn random_input(n: usize, t: usize, f: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Pcg64::seed_from_u64(seed);
    Tensor::from_vec([n, 1, t, f], (0..n * t * f).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
}

#[test]
fn proposed5_shape_chain_on_638_frames() {
    let mut model = Model::<f32>::build(Architecture::Proposed5, 3, 1);
    let x = random_input(1, 638, 64, 0);
    let mut h = x.clone();
    let mut shapes = Vec::new();
    for layer in &mut model.layers {
        h = match layer {
            Layer::Conv(c) => c.forward(&h, Mode::Eval).unwrap(),
            Layer::BatchNorm(b) => b.forward(&h, Mode::Eval).unwrap(),
            Layer::Relu(r) => r.forward(&h, Mode::Eval),
            Layer::Pool(p) => {
                shapes.push(h.shape());
                p.forward(&h, Mode::Eval)
            }
        };
        if matches!(layer, Layer::Pool(_)) {
            shapes.push(h.shape());
        }
    }
    shapes.push(h.shape());
    assert_eq!(
        shapes,
        vec![
            [1, 64, 638, 64],
            [1, 64, 319, 32],
            [1, 128, 319, 32],
            [1, 128, 159, 16],
            [1, 256, 159, 16],
            [1, 256, 79, 8],
            [1, 512, 79, 8],
        ]
    );
    let logits = model.forward(&x, Mode::Eval).unwrap();
    assert_eq!(logits.shape(), [1, 1, 79, 3]);
}

#[test]
fn output_frames_is_floor_of_eighth() {
    for t in 8..100 {
        assert_eq!(output_frames(t), t / 8);
    }
    assert_eq!(output_frames(638), 79);
    let mut model = Model::<f32>::build(Architecture::Kong9, 2, 1);
    for t in [8usize, 13, 31] {
        let y = model.forward(&random_input(1, t, 64, t as u64), Mode::Eval).unwrap();
        assert_eq!(y.shape(), [1, 1, t / 8, 2]);
    }
}

#[test]
fn kong9_parameter_count_matches_closed_form() {
    let channels = [1usize, 64, 64, 128, 128, 256, 256, 512, 512];
    let conv: usize = channels.windows(2).map(|w| w[0] * w[1] * 9 + w[1]).sum();
    assert_eq!(conv, 4_684_224);
    let bn: usize = 2 * channels[1..].iter().sum::<usize>();
    let head = 512 * 4 + 4;
    let model = Model::<f32>::build(Architecture::Kong9, 4, 0);
    assert_eq!(model.parameter_count(), conv + bn + head);
    let conv5: usize = [1usize, 64, 128, 256, 512].windows(2).map(|w| w[0] * w[1] * 25 + w[1]).sum();
    let bn5 = 2 * (64 + 128 + 256 + 512);
    assert_eq!(Model::<f32>::build(Architecture::Proposed5, 4, 0).parameter_count(), conv5 + bn5 + head);
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f32>::build(Architecture::Proposed5, 3, 9);
    let b = Model::<f32>::build(Architecture::Proposed5, 3, 9);
    let c = Model::<f32>::build(Architecture::Proposed5, 3, 10);
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    assert_ne!(encode_checkpoint(&a), encode_checkpoint(&c));
}

#[test]
fn zero_head_gives_half_everywhere() {
    let mut model = Model::<f32>::build(Architecture::Proposed5, 3, 2);
    model.dense_weight.value.iter_mut().for_each(|v| *v = 0.0);
    let logmel = LogMelSpectrogram {
        values: Matrix::zeros(64, 64),
        frame_hop_seconds: FRAME_HOP_SECONDS,
    };
    let post = model.predict(&logmel).unwrap();
    assert_eq!(post.values.shape(), (8, 3));
    assert!(post.values.as_slice().iter().all(|&p| p == 0.5));
    assert_eq!(post.frame_hop_seconds, 0.125);
}

#[test]
fn batchnorm_mode_is_plumbed_through() {
    let mut model = Model::<f32>::build(Architecture::Proposed5, 2, 3);
    let x = random_input(2, 16, 64, 4);
    let train = model.forward(&x, Mode::Train).unwrap();
    let mut fresh = Model::<f32>::build(Architecture::Proposed5, 2, 3);
    let eval = fresh.forward(&x, Mode::Eval).unwrap();
    assert_ne!(train.as_slice(), eval.as_slice());
}

#[test]
fn input_shape_errors() {
    let mut model = Model::<f32>::build(Architecture::Proposed5, 2, 3);
    assert!(model.forward(&random_input(1, 16, 40, 0), Mode::Eval).is_err());
    assert!(model.forward(&random_input(1, 7, 64, 0), Mode::Eval).is_err());
    let mut wrong = random_input(1, 16, 64, 0);
    wrong = Tensor::from_vec([1, 1, 16, 64], wrong.into_vec());
    assert!(model.backward(&wrong).is_err());
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::<f32>::build(Architecture::Kong9, 3, 5);
    // move running stats and standardization away from their defaults
    model.forward(&random_input(2, 16, 64, 1), Mode::Train).unwrap();
    model.feature_mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
    model.feature_std.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + i as f32 * 0.01);
    save_checkpoint(&model, &path).unwrap();
    let mut back = load_checkpoint(&path, Some(Architecture::Kong9)).unwrap();
    assert_eq!(encode_checkpoint(&back), encode_checkpoint(&model));
    let x = random_input(1, 24, 64, 7);
    let a = model.forward(&x, Mode::Eval).unwrap();
    let b = back.forward(&x, Mode::Eval).unwrap();
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));

    assert!(matches!(
        load_checkpoint(&path, Some(Architecture::Proposed5)),
        Err(CheckpointError::ArchitectureMismatch { .. })
    ));
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() / 2], None), Err(CheckpointError::Truncated(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad, None), Err(CheckpointError::BadMagic)));
    let mut bad = bytes;
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad, None), Err(CheckpointError::Version(9))));
}

#[test]
fn checkpoint_header_layout() {
    let model = Model::<f32>::build(Architecture::Proposed5, 2, 0);
    let bytes = encode_checkpoint(&model);
    assert_eq!(&bytes[..4], b"NMFC");
    assert_eq!(bytes[4], 1);
    assert_eq!(bytes[5], 0);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
    // 4 convs + 4 bns × 4 tensors + dense (2) + norm (2)
    assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 4 * 2 + 4 * 4 + 2 + 2);
    let name_len = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + name_len], b"block1.conv1.weight");
}

fn running_stats(model: &Model<f64>) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
    model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some((bn.running_mean.clone(), bn.running_var.clone(), bn.momentum)),
            _ => None,
        })
        .collect()
}

#[test]
fn batchnorm_estimate_is_the_average_over_batches() {
    let model = Model::<f64>::with_input_bins(Architecture::Proposed5, 2, 16, 3);
    let to_f64 = |t: Tensor<f32>| Tensor::from_vec(t.shape(), t.as_slice().iter().map(|&v| v as f64).collect());
    let (x1, x2) = (to_f64(random_input(2, 16, 16, 1)), to_f64(random_input(3, 16, 16, 2)));
    let estimate = |batches: &[&Tensor<f64>]| {
        let mut m = model.clone();
        m.estimate_batchnorm_statistics(batches.iter().copied()).unwrap();
        assert!(m.params().iter().zip(model.params()).all(|(a, b)| a.value == b.value));
        running_stats(&m)
    };
    let (a, b, both) = (estimate(&[&x1]), estimate(&[&x2]), estimate(&[&x1, &x2]));
    for ((sa, sb), s) in a.iter().zip(&b).zip(&both) {
        assert_eq!(s.2, BN_MOMENTUM);
        for i in 0..s.0.len() {
            assert!((s.0[i] - 0.5 * (sa.0[i] + sb.0[i])).abs() < 1e-12);
            assert!((s.1[i] - 0.5 * (sa.1[i] + sb.1[i])).abs() < 1e-12);
        }
    }
}
