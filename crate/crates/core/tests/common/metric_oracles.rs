//! Brute-force scoring oracles, independent of the library's matching and
//! segment bookkeeping.

use std::collections::BTreeMap;

use nmfcnn::evaluation::EventMetricOptions;
use nmfcnn::ingest::StrongEvent;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

pub const CLASSES: [&str; 2] = ["A", "B"];

/// Maximum bipartite matching size by exhaustive search.
pub fn max_matching(refs: &[&StrongEvent], preds: &[&StrongEvent], opts: &EventMetricOptions) -> usize {
    fn go(i: usize, refs: &[&StrongEvent], preds: &[&StrongEvent], used: &mut Vec<bool>, opts: &EventMetricOptions) -> usize {
        if i == refs.len() {
            return 0;
        }
        let mut best = go(i + 1, refs, preds, used, opts);
        for j in 0..preds.len() {
            if !used[j] && opts.compatible(refs[i], preds[j]) {
                used[j] = true;
                best = best.max(1 + go(i + 1, refs, preds, used, opts));
                used[j] = false;
            }
        }
        best
    }
    go(0, refs, preds, &mut vec![false; preds.len()], opts)
}

/// Optimal total TP over all (clip, class) groups.
pub fn optimal_tp(refs: &[StrongEvent], preds: &[StrongEvent], opts: &EventMetricOptions) -> usize {
    let mut total = 0;
    let clips: std::collections::BTreeSet<&str> = refs.iter().chain(preds).map(|e| e.clip_id.as_str()).collect();
    for clip in clips {
        for class in CLASSES {
            let r: Vec<&StrongEvent> = refs.iter().filter(|e| e.clip_id == clip && e.class == class).collect();
            let p: Vec<&StrongEvent> = preds.iter().filter(|e| e.clip_id == clip && e.class == class).collect();
            total += max_matching(&r, &p, opts);
        }
    }
    total
}

/// (tp, fp, fn) by walking every segment of every clip for every class.
pub fn naive_segment_counts(
    refs: &[StrongEvent],
    preds: &[StrongEvent],
    durations: &BTreeMap<String, f64>,
    seg: f64,
) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (clip, &dur) in durations {
        let mut s = 0usize;
        loop {
            let start = s as f64 * seg;
            if start >= dur - 1e-9 {
                break;
            }
            let end = (start + seg).min(dur);
            for class in CLASSES {
                let hit = |evs: &[StrongEvent]| {
                    evs.iter()
                        .any(|e| &e.clip_id == clip && e.class == class && e.onset < end && e.offset > start)
                };
                match (hit(refs), hit(preds)) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            s += 1;
        }
    }
    (tp, fp, fn_)
}

/// Random small instance: at most six events over two classes, boundaries on
/// a 50 ms grid so collar edge cases and competing matches are common.
pub fn random_event_instance(seed: u64) -> (Vec<StrongEvent>, Vec<StrongEvent>) {
    let mut rng = Pcg64::seed_from_u64(seed);
    let total = rng.random_range(0..=6usize);
    let n_refs = rng.random_range(0..=total);
    let make = |rng: &mut Pcg64| {
        let on = rng.random_range(0..40u32) as f64 * 0.05;
        let dur = rng.random_range(1..30u32) as f64 * 0.05;
        let class = CLASSES[rng.random_range(0..2usize)];
        StrongEvent::new("clip", on, on + dur, class)
    };
    let refs: Vec<StrongEvent> = (0..n_refs).map(|_| make(&mut rng)).collect();
    let preds: Vec<StrongEvent> = (0..total - n_refs).map(|_| make(&mut rng)).collect();
    (refs, preds)
}

/// Random multi-clip instance for segment scoring.
pub fn random_segment_instance(seed: u64) -> (Vec<StrongEvent>, Vec<StrongEvent>, BTreeMap<String, f64>) {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n_clips = rng.random_range(1..=3usize);
    let mut durations = BTreeMap::new();
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    for c in 0..n_clips {
        let id = format!("clip{c}");
        let dur = 1.0 + rng.random::<f64>() * 9.0;
        durations.insert(id.clone(), dur);
        for side in 0..2 {
            for _ in 0..rng.random_range(0..=4usize) {
                let on = rng.random::<f64>() * dur;
                let off = (on + rng.random::<f64>() * 3.0).min(dur);
                if off <= on {
                    continue;
                }
                let e = StrongEvent::new(&id, on, off, CLASSES[rng.random_range(0..2usize)]);
                if side == 0 {
                    refs.push(e);
                } else {
                    preds.push(e);
                }
            }
        }
    }
    (refs, preds, durations)
}
