//! Weak → approximate strong labels via NMF activations, and pseudo-tagging
//! of unlabeled clips with a trained model.

use thiserror::Error;

use crate::features::{LogMelSpectrogram, MelSpectrogram};
use crate::ingest::{ClassVocabulary, StrongEvent, WeakClipLabel};
use crate::nmf::{factorize, NmfError, NmfFactors, NmfOptions};
use crate::nn::{Model, NnError};

#[derive(Debug, Error, PartialEq)]
pub enum LabelingError {
    #[error("clip {0} has no weak tags")]
    NoTags(String),
    #[error("invalid labeling options: {0}")]
    Options(String),
    #[error("clip {clip}: {source}")]
    Nmf {
        clip: String,
        #[source]
        source: NmfError,
    },
}

/// Per-frame total activation, max-normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCurve {
    pub values: Vec<f64>,
    pub frame_hop_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingOptions {
    /// θ: frames with normalized activation ≥ θ are activated.
    pub threshold: f64,
    pub min_event_seconds: f64,
    pub max_gap_seconds: f64,
    /// `nmf.components` is replaced by `components`, or by the clip's tag
    /// count when that is `None`.
    pub nmf: NmfOptions,
    pub components: Option<usize>,
}

impl Default for LabelingOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_event_seconds: 0.1,
            max_gap_seconds: 0.2,
            nmf: NmfOptions::default(),
            components: None,
        }
    }
}

impl LabelingOptions {
    pub fn validate(&self) -> Result<(), LabelingError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(LabelingError::Options(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.min_event_seconds >= 0.0 && self.max_gap_seconds >= 0.0) {
            return Err(LabelingError::Options("durations must be non-negative".into()));
        }
        if self.components == Some(0) {
            return Err(LabelingError::Options("components must be at least 1".into()));
        }
        Ok(())
    }
}

/// aₙ = Σ_r H[r, n], divided by max aₙ. An all-zero H gives an all-zero curve.
pub fn activation_curve(factors: &NmfFactors, frame_hop_seconds: f64) -> ActivationCurve {
    let h = &factors.h;
    let mut values = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        for (v, &x) in values.iter_mut().zip(h.row(r)) {
            *v += x;
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    ActivationCurve {
        values,
        frame_hop_seconds,
    }
}

// Guards the strict comparisons below against rounding in frames × hop.
const TIME_EPS: f64 = 1e-9;

/// Maximal runs of `true`, merged across gaps shorter than `max_gap_seconds`,
/// then dropped when shorter than `min_event_seconds`. Returns (onset, offset)
/// in seconds with offset = (last frame + 1) × hop.
pub fn mask_to_intervals(mask: &[bool], frame_hop_seconds: f64, min_event_seconds: f64, max_gap_seconds: f64) -> Vec<(f64, f64)> {
    let mut runs: Vec<(usize, usize)> = Vec::new(); // [first, last]
    let mut i = 0;
    while i < mask.len() {
        if !mask[i] {
            i += 1;
            continue;
        }
        let first = i;
        while i < mask.len() && mask[i] {
            i += 1;
        }
        let last = i - 1;
        match runs.last_mut() {
            Some(prev) if ((first - prev.1 - 1) as f64) * frame_hop_seconds + TIME_EPS < max_gap_seconds => prev.1 = last,
            _ => runs.push((first, last)),
        }
    }
    runs.into_iter()
        .filter(|&(a, b)| ((b - a + 1) as f64) * frame_hop_seconds + TIME_EPS >= min_event_seconds)
        .map(|(a, b)| (a as f64 * frame_hop_seconds, (b + 1) as f64 * frame_hop_seconds))
        .collect()
}

/// NMF on the clip's (pre-log) mel spectrogram, thresholded activation curve,
/// then one event per weak tag on every surviving interval. When nothing
/// survives, every tag gets a single full-clip event.
pub fn approximate_strong_labels(
    mel: &MelSpectrogram,
    weak: &WeakClipLabel,
    opts: &LabelingOptions,
) -> Result<Vec<StrongEvent>, LabelingError> {
    opts.validate()?;
    if weak.tags.is_empty() {
        return Err(LabelingError::NoTags(weak.clip_id.clone()));
    }
    let nmf = NmfOptions {
        components: opts.components.unwrap_or(weak.tags.len()),
        ..opts.nmf.clone()
    };
    let m = mel.values.transpose(); // bins × frames
    let factors = factorize(&m, &nmf).map_err(|source| LabelingError::Nmf {
        clip: weak.clip_id.clone(),
        source,
    })?;
    let curve = activation_curve(&factors, mel.frame_hop_seconds);
    let mask: Vec<bool> = curve.values.iter().map(|&a| a >= opts.threshold).collect();
    let mut intervals = mask_to_intervals(&mask, curve.frame_hop_seconds, opts.min_event_seconds, opts.max_gap_seconds);
    if intervals.is_empty() {
        intervals.push((0.0, mel.n_frames() as f64 * mel.frame_hop_seconds));
    }
    let mut events = Vec::with_capacity(intervals.len() * weak.tags.len());
    for &(onset, offset) in &intervals {
        for tag in &weak.tags {
            events.push(StrongEvent::new(&weak.clip_id, onset, offset, tag));
        }
    }
    Ok(events)
}

/// Clip-level tags from a trained model: classes whose maximum frame
/// posterior reaches `threshold`. May be empty.
pub fn tag_unlabeled(
    model: &mut Model<f32>,
    vocab: &ClassVocabulary,
    clip_id: &str,
    logmel: &LogMelSpectrogram,
    threshold: f64,
) -> Result<WeakClipLabel, NnError> {
    if model.n_classes != vocab.len() {
        return Err(NnError::Shape(format!(
            "model has {} classes, vocabulary has {}",
            model.n_classes,
            vocab.len()
        )));
    }
    let posteriors = model.predict(logmel)?;
    let tags = posteriors
        .clip_probabilities()
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p >= threshold)
        .map(|(k, _)| vocab.name(k).to_string())
        .collect();
    Ok(WeakClipLabel {
        clip_id: clip_id.to_string(),
        tags,
    })
}

/// Total length of a union of intervals.
pub fn union_length(intervals: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = intervals.iter().copied().filter(|(a, b)| b > a).collect();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for (a, b) in sorted {
        current = match current {
            Some((ca, cb)) if a <= cb => Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((ca, cb)) = current {
        total += cb - ca;
    }
    total
}

/// Intersection-over-union of two interval unions; 0 when both are empty.
pub fn union_iou(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let la = union_length(a);
    let lb = union_length(b);
    let mut inter = Vec::new();
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            if hi > lo {
                inter.push((lo, hi));
            }
        }
    }
    let li = union_length(&inter);
    let lu = la + lb - li;
    if lu > 0.0 {
        li / lu
    } else {
        0.0
    }
}
