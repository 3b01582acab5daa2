//! Mini-batch Adam training on frame-level targets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use thiserror::Error;

use crate::features::write_atomic;
use crate::ingest::{ClassVocabulary, StrongEvent};
use crate::matrix::Matrix;
use crate::nn::{bce_with_logits, save_checkpoint, CheckpointError, Mode, Model, NnError, Tensor, TIME_POOLING};

pub const STD_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_FILE: &str = "model.nmfc";
pub const LOG_FILE: &str = "train.log";
pub const LOSS_FILE: &str = "loss.tsv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("clip {clip}: unknown class {class:?}")]
    UnknownClass { clip: String, class: String },
    #[error("clip {clip}: {detail}")]
    Example { clip: String, detail: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Crop length in input frames; a multiple of 8.
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            crop_frames: 480,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.crop_frames == 0 || self.crop_frames % TIME_POOLING != 0 {
            return bad("crop_frames must be a positive multiple of 8");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon be positive");
        }
        Ok(())
    }
}

/// One training clip: log-mel features (frames × bins) and input-resolution
/// binary targets (frames × classes).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub clip_id: String,
    pub features: Matrix<f64>,
    pub labels: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
    pub seed: u64,
    pub clips: usize,
}

impl TrainReport {
    /// Plain `key=value` lines.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "clips={}", self.clips);
        let _ = writeln!(s, "epochs={}", self.epoch_losses.len());
        if let Some(last) = self.epoch_losses.last() {
            let _ = writeln!(s, "final_loss={last:.6}");
        }
        let _ = writeln!(s, "seconds={:.3}", self.seconds);
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint={}", p.display());
        }
        s
    }

    /// `epoch<TAB>loss`, epochs counted from 1.
    pub fn loss_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(s, "{}\t{l:.6}", i + 1);
        }
        s
    }
}

/// Frame t of class k is 1 iff [t·hop, (t+1)·hop) intersects an event of k.
pub fn rasterize_labels(
    events: &[StrongEvent],
    n_frames: usize,
    frame_hop_seconds: f64,
    vocab: &ClassVocabulary,
) -> Result<Matrix<f32>, TrainError> {
    let mut m = Matrix::zeros(n_frames, vocab.len());
    for e in events {
        let k = vocab.index_of(&e.class).ok_or_else(|| TrainError::UnknownClass {
            clip: e.clip_id.clone(),
            class: e.class.clone(),
        })?;
        let first = ((e.onset / frame_hop_seconds).floor().max(0.0) as usize).min(n_frames);
        for t in first..n_frames {
            let start = t as f64 * frame_hop_seconds;
            if start >= e.offset {
                break;
            }
            if start + frame_hop_seconds > e.onset {
                m[(t, k)] = 1.0;
            }
        }
    }
    Ok(m)
}

/// Per-bin mean and standard deviation over every frame of every example,
/// the deviation floored at `STD_FLOOR`.
pub fn feature_statistics(examples: &[TrainExample]) -> (Vec<f64>, Vec<f64>) {
    let bins = examples.first().map_or(0, |e| e.features.cols());
    let mut sum = vec![0.0; bins];
    let mut count = 0usize;
    for e in examples {
        for t in 0..e.features.rows() {
            for (s, &v) in sum.iter_mut().zip(e.features.row(t)) {
                *s += v;
            }
        }
        count += e.features.rows();
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0; bins];
    for e in examples {
        for t in 0..e.features.rows() {
            for ((s, &v), m) in sq.iter_mut().zip(e.features.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

/// Adam optimizer state for every trainable parameter of one model.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model<f32>, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one bias-corrected update from the accumulated gradients.
    pub fn step(&mut self, model: &mut Model<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.epsilon as f32;
        for ((p, m), v) in model.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Forward, BCE and backward on one batch. Gradients are zeroed first and
/// left accumulated in the model; returns the batch loss.
pub fn loss_and_gradients(model: &mut Model<f32>, inputs: &Tensor<f32>, targets: &[f32]) -> Result<f64, TrainError> {
    model.zero_grad();
    let logits = model.forward(inputs, Mode::Train)?;
    let (loss, grad) = bce_with_logits(logits.as_slice(), targets)?;
    model.backward(&Tensor::from_vec(logits.shape(), grad))?;
    Ok(loss as f64)
}

/// BCE of a batch in train mode without touching gradients (running
/// statistics still update).
pub fn batch_loss(model: &mut Model<f32>, inputs: &Tensor<f32>, targets: &[f32]) -> Result<f64, TrainError> {
    let logits = model.forward(inputs, Mode::Train)?;
    Ok(bce_with_logits(logits.as_slice(), targets)?.0 as f64)
}

struct Prepared {
    features: Vec<f32>, // standardized, frames × bins
    labels: Vec<f32>,   // frames × classes
    frames: usize,
}

/// Copies a crop starting at `start` into the batch buffers: standardized
/// features (zero beyond the clip) and ×8 max-pooled targets.
fn fill_crop(p: &Prepared, start: usize, crop: usize, bins: usize, k: usize, x: &mut [f32], y: &mut [f32]) {
    let avail = p.frames.saturating_sub(start).min(crop);
    x[..avail * bins].copy_from_slice(&p.features[start * bins..(start + avail) * bins]);
    x[avail * bins..].iter_mut().for_each(|v| *v = 0.0);
    y.iter_mut().for_each(|v| *v = 0.0);
    for t in 0..avail {
        let row = &p.labels[(start + t) * k..(start + t + 1) * k];
        let out = &mut y[(t / TIME_POOLING) * k..(t / TIME_POOLING + 1) * k];
        for (o, &l) in out.iter_mut().zip(row) {
            *o = o.max(l);
        }
    }
}

/// Shuffles `order` and draws one crop start per clip, in shuffled order.
fn shuffle_and_crop(order: &mut [usize], prepared: &[Prepared], crop: usize, rng: &mut Pcg64) -> Vec<usize> {
    order.shuffle(rng);
    order
        .iter()
        .map(|&i| {
            let slack = prepared[i].frames.saturating_sub(crop);
            if slack == 0 {
                0
            } else {
                rng.random_range(0..=slack)
            }
        })
        .collect()
}

/// Standardized input crops (batch, 1, crop, bins) and their pooled targets.
fn make_batch(
    prepared: &[Prepared],
    clips: &[usize],
    starts: &[usize],
    crop: usize,
    bins: usize,
    k: usize,
) -> (Tensor<f32>, Vec<f32>) {
    let out_frames = crop / TIME_POOLING;
    let n = clips.len();
    let mut x = vec![0.0f32; n * crop * bins];
    let mut y = vec![0.0f32; n * out_frames * k];
    for (j, (&i, &start)) in clips.iter().zip(starts).enumerate() {
        fill_crop(
            &prepared[i],
            start,
            crop,
            bins,
            k,
            &mut x[j * crop * bins..(j + 1) * crop * bins],
            &mut y[j * out_frames * k..(j + 1) * out_frames * k],
        );
    }
    (Tensor::from_vec([n, 1, crop, bins], x), y)
}

/// Trains `model` in place. Feature statistics are computed once over the
/// dataset and stored in the model. After the last epoch the batch-norm
/// running statistics are re-estimated at the final weights from one
/// forward pass over freshly drawn crops. With `out_dir`, the checkpoint is
/// rewritten after every epoch and the log and loss table at the end.
pub fn train(
    model: &mut Model<f32>,
    dataset: &[TrainExample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = Instant::now();
    let bins = model.input_bins();
    let k = model.n_classes;
    for e in dataset {
        let detail = if e.features.cols() != bins {
            Some(format!("{} feature bins, model expects {bins}", e.features.cols()))
        } else if e.labels.cols() != k {
            Some(format!("{} label columns, model has {k} classes", e.labels.cols()))
        } else if e.labels.rows() != e.features.rows() {
            Some(format!("{} label frames vs {} feature frames", e.labels.rows(), e.features.rows()))
        } else if e.features.rows() == 0 {
            Some("no frames".to_string())
        } else {
            None
        };
        if let Some(detail) = detail {
            return Err(TrainError::Example {
                clip: e.clip_id.clone(),
                detail,
            });
        }
    }

    let (mean, std) = feature_statistics(dataset);
    model.feature_mean = mean.iter().map(|&v| v as f32).collect();
    model.feature_std = std.iter().map(|&v| v as f32).collect();
    let prepared: Vec<Prepared> = dataset
        .iter()
        .map(|e| Prepared {
            features: e
                .features
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| ((v - mean[i % bins]) / std[i % bins]) as f32)
                .collect(),
            labels: e.labels.as_slice().to_vec(),
            frames: e.features.rows(),
        })
        .collect();

    let crop = cfg.crop_frames;
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let checkpoint = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    for epoch in 1..=cfg.epochs {
        let starts = shuffle_and_crop(&mut order, &prepared, crop, &mut rng);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let first = b * cfg.batch_size;
            let (x, y) = make_batch(&prepared, chunk, &starts[first..first + chunk.len()], crop, bins, k);
            let loss = loss_and_gradients(model, &x, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            adam.step(model);
            weighted += loss * chunk.len() as f64;
        }
        epoch_losses.push(weighted / prepared.len() as f64);
        if epoch == cfg.epochs {
            // one forward pass at the final weights; the running averages
            // collected while training lag behind the moving weights
            let starts = shuffle_and_crop(&mut order, &prepared, crop, &mut rng);
            let batches: Vec<Tensor<f32>> = order
                .chunks(cfg.batch_size)
                .enumerate()
                .map(|(b, chunk)| {
                    let first = b * cfg.batch_size;
                    make_batch(&prepared, chunk, &starts[first..first + chunk.len()], crop, bins, k).0
                })
                .collect();
            model.estimate_batchnorm_statistics(&batches)?;
        }
        if let Some(path) = &checkpoint {
            save_checkpoint(model, path)?;
        }
    }

    let report = TrainReport {
        epoch_losses,
        checkpoint: checkpoint.clone(),
        seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        clips: dataset.len(),
    };
    if let Some(dir) = out_dir {
        for (name, body) in [(LOG_FILE, report.to_log()), (LOSS_FILE, report.loss_tsv())] {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes()).map_err(|source| TrainError::Io { path, source })?;
        }
    }
    Ok(report)
}
