//! Posterior post-processing and event-/segment-based scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::ingest::{ClassVocabulary, StrongEvent};
use crate::nn::FramePosteriors;
use crate::weak2strong::mask_to_intervals;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid detection options: {0}")]
    Options(String),
    #[error("no duration known for clip {0}")]
    UnknownClip(String),
    #[error("posteriors have {found} classes, vocabulary has {expected}")]
    ClassCount { expected: usize, found: usize },
    #[error("report line {line}: {message}")]
    Report { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOptions {
    pub threshold: f64,
    /// Median filter width in output frames; odd.
    pub median_width: usize,
    pub min_event_seconds: f64,
    pub max_gap_seconds: f64,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_width: 5,
            min_event_seconds: 0.1,
            max_gap_seconds: 0.2,
        }
    }
}

impl DetectionOptions {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(EvalError::Options(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.median_width % 2 == 0 {
            return Err(EvalError::Options(format!("median width {} is not odd", self.median_width)));
        }
        if !(self.min_event_seconds >= 0.0 && self.max_gap_seconds >= 0.0) {
            return Err(EvalError::Options("durations must be non-negative".into()));
        }
        Ok(())
    }
}

/// Running median with half-sample symmetric reflection at both ends
/// (`c b a | a b c | c b a`).
pub fn median_filter(track: &[f64], width: usize) -> Vec<f64> {
    let n = track.len();
    if n == 0 || width <= 1 {
        return track.to_vec();
    }
    let half = width / 2;
    let reflect = |i: isize| -> f64 {
        let period = 2 * n as isize;
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - 1 - j;
        }
        track[j as usize]
    };
    let mut window = vec![0.0; width];
    (0..n)
        .map(|i| {
            for (w, d) in window.iter_mut().zip(-(half as isize)..=half as isize) {
                *w = reflect(i as isize + d);
            }
            window.sort_by(f64::total_cmp);
            window[half]
        })
        .collect()
}

/// Per class: median filter, binarize at the threshold, then merge gaps and
/// drop short runs. Times use the posteriors' frame hop.
pub fn posteriors_to_events(
    posteriors: &FramePosteriors,
    clip_id: &str,
    vocab: &ClassVocabulary,
    opts: &DetectionOptions,
) -> Result<Vec<StrongEvent>, EvalError> {
    opts.validate()?;
    let p = &posteriors.values;
    if p.cols() != vocab.len() {
        return Err(EvalError::ClassCount {
            expected: vocab.len(),
            found: p.cols(),
        });
    }
    let mut events = Vec::new();
    for k in 0..p.cols() {
        let track: Vec<f64> = (0..p.rows()).map(|t| p[(t, k)]).collect();
        let mask: Vec<bool> = median_filter(&track, opts.median_width)
            .iter()
            .map(|&v| v >= opts.threshold)
            .collect();
        for (onset, offset) in mask_to_intervals(&mask, posteriors.frame_hop_seconds, opts.min_event_seconds, opts.max_gap_seconds) {
            events.push(StrongEvent::new(clip_id, onset, offset, vocab.name(k)));
        }
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

impl Prf {
    /// 0/0 is taken as 0 for precision, recall and F1.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        Self {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            tp,
            fp,
            fn_,
        }
    }

    /// Macro average: unweighted means of the per-class scores, summed counts.
    pub fn macro_average<'a>(per_class: impl IntoIterator<Item = &'a Prf>) -> Self {
        let all: Vec<&Prf> = per_class.into_iter().collect();
        let n = all.len() as f64;
        let mean = |f: fn(&Prf) -> f64| ratio(all.iter().map(|p| f(p)).sum(), n);
        Self {
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            f1: mean(|p| p.f1),
            tp: all.iter().map(|p| p.tp).sum(),
            fp: all.iter().map(|p| p.fp).sum(),
            fn_: all.iter().map(|p| p.fn_).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventMetricOptions {
    pub onset_collar: f64,
    /// Offset tolerance is max(offset_collar, offset_fraction × ref duration).
    pub offset_collar: f64,
    pub offset_fraction: f64,
    pub averaging: Averaging,
}

impl Default for EventMetricOptions {
    fn default() -> Self {
        Self {
            onset_collar: 0.2,
            offset_collar: 0.2,
            offset_fraction: 0.2,
            averaging: Averaging::Micro,
        }
    }
}

// Absorbs rounding in boundary differences (e.g. 1.2 − 1.0 vs 0.2).
const COLLAR_EPS: f64 = 1e-9;

impl EventMetricOptions {
    pub fn compatible(&self, reference: &StrongEvent, pred: &StrongEvent) -> bool {
        let offset_tol = self.offset_collar.max(self.offset_fraction * reference.duration());
        (pred.onset - reference.onset).abs() <= self.onset_collar + COLLAR_EPS
            && (pred.offset - reference.offset).abs() <= offset_tol + COLLAR_EPS
    }
}

type GroupKey<'a> = (&'a str, &'a str);

fn group<'a>(events: &'a [StrongEvent]) -> BTreeMap<GroupKey<'a>, Vec<&'a StrongEvent>> {
    let mut m: BTreeMap<GroupKey<'a>, Vec<&'a StrongEvent>> = BTreeMap::new();
    for e in events {
        m.entry((e.clip_id.as_str(), e.class.as_str())).or_default().push(e);
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.offset.total_cmp(&b.offset)));
    }
    m
}

/// Greedy one-to-one matching within one (clip, class) group: references in
/// onset order, each taking the earliest-onset unmatched compatible
/// prediction. Returns the number of matches.
pub fn greedy_matches(refs: &[&StrongEvent], preds: &[&StrongEvent], opts: &EventMetricOptions) -> usize {
    let mut used = vec![false; preds.len()];
    let mut matched = 0;
    for r in refs {
        if let Some(j) = (0..preds.len()).find(|&j| !used[j] && opts.compatible(r, preds[j])) {
            used[j] = true;
            matched += 1;
        }
    }
    matched
}

/// Per-class event-based counts.
pub fn event_based_per_class(refs: &[StrongEvent], preds: &[StrongEvent], opts: &EventMetricOptions) -> BTreeMap<String, Prf> {
    let rg = group(refs);
    let pg = group(preds);
    let keys: BTreeSet<GroupKey> = rg.keys().chain(pg.keys()).copied().collect();
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for key in keys {
        let r = rg.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let p = pg.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let tp = greedy_matches(r, p, opts);
        let c = counts.entry(key.1.to_string()).or_default();
        c.0 += tp;
        c.1 += p.len() - tp;
        c.2 += r.len() - tp;
    }
    counts
        .into_iter()
        .map(|(k, (tp, fp, fn_))| (k, Prf::from_counts(tp, fp, fn_)))
        .collect()
}

pub fn event_based_f1(refs: &[StrongEvent], preds: &[StrongEvent], opts: &EventMetricOptions) -> Prf {
    let per_class = event_based_per_class(refs, preds, opts);
    aggregate(&per_class, opts.averaging)
}

fn aggregate(per_class: &BTreeMap<String, Prf>, averaging: Averaging) -> Prf {
    match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = per_class
                .values()
                .fold((0, 0, 0), |(a, b, c), p| (a + p.tp, b + p.fp, c + p.fn_));
            Prf::from_counts(tp, fp, fn_)
        }
        Averaging::Macro => Prf::macro_average(per_class.values()),
    }
}

/// Number of segments tiling a clip, the last partial one included.
pub fn segment_count(duration: f64, segment_seconds: f64) -> usize {
    let n = (duration / segment_seconds - 1e-9).ceil();
    if n > 0.0 {
        n as usize
    } else {
        0
    }
}

/// Active segment indices per (clip, class).
fn segment_activity(
    events: &[StrongEvent],
    durations: &BTreeMap<String, f64>,
    segment_seconds: f64,
) -> Result<BTreeMap<(String, String), BTreeSet<usize>>, EvalError> {
    let mut out: BTreeMap<(String, String), BTreeSet<usize>> = BTreeMap::new();
    for e in events {
        let dur = *durations.get(&e.clip_id).ok_or_else(|| EvalError::UnknownClip(e.clip_id.clone()))?;
        let n = segment_count(dur, segment_seconds);
        let set = out.entry((e.clip_id.clone(), e.class.clone())).or_default();
        for s in 0..n {
            let start = s as f64 * segment_seconds;
            let end = ((s + 1) as f64 * segment_seconds).min(dur);
            if e.onset < end && e.offset > start {
                set.insert(s);
            }
        }
    }
    Ok(out)
}

pub fn segment_based_per_class(
    refs: &[StrongEvent],
    preds: &[StrongEvent],
    durations: &BTreeMap<String, f64>,
    segment_seconds: f64,
) -> Result<BTreeMap<String, Prf>, EvalError> {
    let ra = segment_activity(refs, durations, segment_seconds)?;
    let pa = segment_activity(preds, durations, segment_seconds)?;
    let empty = BTreeSet::new();
    let keys: BTreeSet<&(String, String)> = ra.keys().chain(pa.keys()).collect();
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for key in keys {
        let r = ra.get(key).unwrap_or(&empty);
        let p = pa.get(key).unwrap_or(&empty);
        let tp = r.intersection(p).count();
        let c = counts.entry(key.1.clone()).or_default();
        c.0 += tp;
        c.1 += p.len() - tp;
        c.2 += r.len() - tp;
    }
    Ok(counts
        .into_iter()
        .map(|(k, (tp, fp, fn_))| (k, Prf::from_counts(tp, fp, fn_)))
        .collect())
}

pub fn segment_based_f1(
    refs: &[StrongEvent],
    preds: &[StrongEvent],
    durations: &BTreeMap<String, f64>,
    segment_seconds: f64,
    averaging: Averaging,
) -> Result<Prf, EvalError> {
    let per_class = segment_based_per_class(refs, preds, durations, segment_seconds)?;
    Ok(aggregate(&per_class, averaging))
}

/// Latest offset per clip, for scoring when audio durations are unavailable.
pub fn durations_from_events<'a>(events: impl IntoIterator<Item = &'a StrongEvent>) -> BTreeMap<String, f64> {
    let mut d: BTreeMap<String, f64> = BTreeMap::new();
    for e in events {
        let v = d.entry(e.clip_id.clone()).or_insert(0.0);
        *v = v.max(e.offset);
    }
    d
}

/// One report column: a combination label with its two F1 scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportColumn {
    pub label: String,
    pub event_f1: f64,
    pub segment_f1: f64,
}

pub const EVENT_ROW: &str = "event_based_f1";
pub const SEGMENT_ROW: &str = "segment_based_f1";

/// Metrics as rows, combinations as columns, values to 4 decimals.
/// No columns gives a header-only table.
pub fn format_report(columns: &[ReportColumn]) -> String {
    let mut s = String::from("metric");
    for c in columns {
        let _ = write!(s, "\t{}", c.label);
    }
    s.push('\n');
    if columns.is_empty() {
        return s;
    }
    for (row, get) in [(EVENT_ROW, (|c: &ReportColumn| c.event_f1) as fn(&ReportColumn) -> f64), (SEGMENT_ROW, |c| c.segment_f1)] {
        s.push_str(row);
        for c in columns {
            let _ = write!(s, "\t{:.4}", get(c));
        }
        s.push('\n');
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<ReportColumn>, EvalError> {
    let err = |line: usize, message: String| EvalError::Report { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty report".into()))?;
    let mut fields = header.split('\t');
    if fields.next() != Some("metric") {
        return Err(err(1, "header must start with `metric`".into()));
    }
    let mut columns: Vec<ReportColumn> = fields
        .map(|l| ReportColumn {
            label: l.to_string(),
            event_f1: f64::NAN,
            segment_f1: f64::NAN,
        })
        .collect();
    for (i, line) in lines {
        let mut f = line.split('\t');
        let name = f.next().unwrap_or_default();
        let values = f
            .map(|v| v.parse::<f64>().map_err(|_| err(i + 1, format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != columns.len() {
            return Err(err(i + 1, format!("{} values for {} columns", values.len(), columns.len())));
        }
        for (c, v) in columns.iter_mut().zip(values) {
            match name {
                EVENT_ROW => c.event_f1 = v,
                SEGMENT_ROW => c.segment_f1 = v,
                other => return Err(err(i + 1, format!("unknown metric {other:?}"))),
            }
        }
    }
    if columns.iter().any(|c| c.event_f1.is_nan() || c.segment_f1.is_nan()) {
        return Err(err(0, "missing metric row".into()));
    }
    Ok(columns)
}
