use std::collections::BTreeSet;

use nmfcnn::features::{default_filterbank, extract, MelSpectrogram, LOG_EPS};
use nmfcnn::ingest::{default_synth_classes, render_clip, ClassVocabulary, StrongEvent, WeakClipLabel};
use nmfcnn::matrix::Matrix;
use nmfcnn::nmf::{NmfError, NmfFactors};
use nmfcnn::nn::{Architecture, Model};
use nmfcnn::weak2strong::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_pcg::Pcg64;

fn tone_clip(seed: u64, onset: f64, offset: f64) -> (MelSpectrogram, WeakClipLabel) {
    let classes = default_synth_classes();
    let events = [StrongEvent::new("c", onset, offset, "Tone")];
    let mut rng = Pcg64::seed_from_u64(seed);
    let clip = render_clip("c", 10.0, &classes, &events, 20.0, &mut rng);
    let (mel, _) = extract(&clip, &default_filterbank(), LOG_EPS).unwrap();
    (mel, weak(&["Tone"]))
}

fn weak(tags: &[&str]) -> WeakClipLabel {
    WeakClipLabel {
        clip_id: "c".into(),
        tags: tags.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
    }
}

fn intervals(events: &[StrongEvent]) -> Vec<(f64, f64)> {
    events.iter().map(|e| (e.onset, e.offset)).collect()
}

#[test]
fn curve_matches_column_sum_oracle() {
    let mut h = Matrix::zeros(3, 10);
    let mut x = 0.37f64;
    for r in 0..3 {
        for n in 0..10 {
            x = (x * 7.13 + 0.29).fract();
            h[(r, n)] = x;
        }
    }
    let factors = NmfFactors {
        w: Matrix::zeros(2, 3),
        h: h.clone(),
        final_error: 0.0,
        iterations_run: 0,
    };
    let curve = activation_curve(&factors, 0.5);
    let sums: Vec<f64> = (0..10).map(|n| (0..3).map(|r| h[(r, n)]).sum()).collect();
    let max = sums.iter().cloned().fold(f64::MIN, f64::max);
    for (got, s) in curve.values.iter().zip(&sums) {
        assert!((got - s / max).abs() < 1e-9);
    }
}

#[test]
fn tone_event_is_localized() {
    let (mel, w) = tone_clip(3, 1.0, 2.0);
    let events = approximate_strong_labels(&mel, &w, &LabelingOptions::default()).unwrap();
    assert!(!events.is_empty());
    for e in &events {
        assert_eq!(e.class, "Tone");
        assert!(e.offset > 1.0 && e.onset < 2.0, "interval {e:?} misses the event");
    }
    let iou = union_iou(&intervals(&events), &[(1.0, 2.0)]);
    assert!(iou >= 0.5, "iou {iou}");
}

#[test]
fn every_tag_on_every_interval() {
    let (mel, _) = tone_clip(4, 3.0, 5.0);
    let events = approximate_strong_labels(&mel, &weak(&["A", "B"]), &LabelingOptions::default()).unwrap();
    assert_eq!(events.len() % 2, 0);
    for pair in events.chunks(2) {
        assert_eq!((pair[0].onset, pair[0].offset), (pair[1].onset, pair[1].offset));
        assert_eq!((pair[0].class.as_str(), pair[1].class.as_str()), ("A", "B"));
    }
}

#[test]
fn nothing_surviving_falls_back_to_full_clip() {
    let (mel, w) = tone_clip(5, 1.0, 2.0);
    let opts = LabelingOptions {
        min_event_seconds: 100.0,
        ..Default::default()
    };
    let events = approximate_strong_labels(&mel, &w, &opts).unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].onset, 0.0);
    assert_eq!(events[0].offset, mel.n_frames() as f64 * mel.frame_hop_seconds);
}

#[test]
fn events_stay_in_clip_and_in_tags() {
    let (mel, _) = tone_clip(6, 8.5, 10.0);
    let w = weak(&["Tone", "Buzz"]);
    let events = approximate_strong_labels(&mel, &w, &LabelingOptions::default()).unwrap();
    for e in &events {
        assert!(w.tags.contains(&e.class));
        assert!(e.onset >= 0.0 && e.offset <= 10.0 && e.onset < e.offset);
    }
}

#[test]
fn tiny_threshold_covers_whole_clip() {
    let (mel, w) = tone_clip(7, 2.0, 3.0);
    let opts = LabelingOptions {
        threshold: 1e-12,
        ..Default::default()
    };
    let events = approximate_strong_labels(&mel, &w, &opts).unwrap();
    assert_eq!(intervals(&events), vec![(0.0, mel.n_frames() as f64 * mel.frame_hop_seconds)]);
}

#[test]
fn raising_threshold_never_adds_duration_on_audio() {
    let (mel, w) = tone_clip(8, 4.0, 6.5);
    let mut prev = f64::INFINITY;
    for theta in [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
        let opts = LabelingOptions {
            threshold: theta,
            ..Default::default()
        };
        let len = union_length(&intervals(&approximate_strong_labels(&mel, &w, &opts).unwrap()));
        assert!(len <= prev + 1e-12, "theta {theta}: {len} > {prev}");
        prev = len;
    }
}

#[test]
fn labeling_is_deterministic() {
    let (mel, w) = tone_clip(9, 1.5, 4.0);
    let a = approximate_strong_labels(&mel, &w, &LabelingOptions::default()).unwrap();
    let b = approximate_strong_labels(&mel, &w, &LabelingOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn degenerate_and_invalid_inputs() {
    let silent = MelSpectrogram {
        values: Matrix::zeros(50, 64),
        frame_hop_seconds: 0.015625,
    };
    match approximate_strong_labels(&silent, &weak(&["Tone"]), &LabelingOptions::default()) {
        Err(LabelingError::Nmf { source: NmfError::AllZero, .. }) => {}
        other => panic!("expected degenerate-input error, got {other:?}"),
    }
    assert!(matches!(
        approximate_strong_labels(&silent, &weak(&[]), &LabelingOptions::default()),
        Err(LabelingError::NoTags(_))
    ));
    let bad = LabelingOptions {
        threshold: 1.0,
        ..Default::default()
    };
    assert!(matches!(approximate_strong_labels(&silent, &weak(&["Tone"]), &bad), Err(LabelingError::Options(_))));
}

#[test]
fn zero_head_tags_everything_and_high_threshold_nothing() {
    let vocab = ClassVocabulary::new(["Tone", "Chirp", "Buzz"]);
    let mut model = Model::<f32>::build(Architecture::Proposed5, 3, 1);
    model.dense_weight.value.iter_mut().for_each(|v| *v = 0.0);
    model.dense_bias.value.iter_mut().for_each(|v| *v = 0.0);
    let classes = default_synth_classes();
    let mut rng = Pcg64::seed_from_u64(1);
    let clip = render_clip("u", 1.0, &classes, &[], 20.0, &mut rng);
    let (_, logmel) = extract(&clip, &default_filterbank(), LOG_EPS).unwrap();
    let all = tag_unlabeled(&mut model, &vocab, "u", &logmel, 0.5).unwrap();
    assert_eq!(all.tags.len(), 3);
    let none = tag_unlabeled(&mut model, &vocab, "u", &logmel, 0.5 + 1e-6).unwrap();
    assert!(none.tags.is_empty());
    let wrong = ClassVocabulary::new(["Tone"]);
    assert!(tag_unlabeled(&mut model, &wrong, "u", &logmel, 0.5).is_err());
}

proptest! {
    #[test]
    fn threshold_monotone_on_masks(
        curve in prop::collection::vec(0.0f64..1.0, 1..300),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
        min_frames in 0usize..10,
        gap_frames in 0usize..10,
    ) {
        let hop = 0.015625;
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let run = |t: f64| {
            let mask: Vec<bool> = curve.iter().map(|&a| a >= t).collect();
            union_length(&mask_to_intervals(&mask, hop, min_frames as f64 * hop, gap_frames as f64 * hop))
        };
        prop_assert!(run(hi) <= run(lo) + 1e-12);
    }

    #[test]
    fn intervals_are_ordered_disjoint_and_in_range(
        mask in prop::collection::vec(any::<bool>(), 0..200),
        gap_frames in 0usize..6,
    ) {
        let hop = 0.01;
        let iv = mask_to_intervals(&mask, hop, 0.0, gap_frames as f64 * hop);
        for w in iv.windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        for &(a, b) in &iv {
            prop_assert!(a >= 0.0 && b <= mask.len() as f64 * hop + 1e-12 && a < b);
        }
        // without merging or dropping, covered frames equal the true frames
        if gap_frames == 0 {
            let covered: f64 = iv.iter().map(|(a, b)| b - a).sum();
            let trues = mask.iter().filter(|&&m| m).count() as f64 * hop;
            prop_assert!((covered - trues).abs() < 1e-9);
        }
    }
}
