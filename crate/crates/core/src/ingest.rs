//! Audio ingestion: WAV decoding/encoding, band-limited resampling, label
//! manifests and the synthetic corpus generator.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;
use thiserror::Error;

/// Sample rate every downstream stage expects.
pub const PIPELINE_RATE: u32 = 32_000;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated data chunk: header declares {declared} bytes, {available} present")]
    TruncatedData { declared: usize, available: usize },
}

#[derive(Debug, Error)]
pub enum AudioFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: WavError,
    },
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: unknown class `{tag}`")]
    UnknownClass { line: usize, tag: String },
    #[error("line {line}: empty tag list")]
    EmptyTags { line: usize },
    #[error("line {line}: duplicate tag `{tag}`")]
    DuplicateTag { line: usize, tag: String },
    #[error("line {line}: duplicate filename `{filename}`")]
    DuplicateFilename { line: usize, filename: String },
    #[error("line {line}: expected {expected} tab-separated fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: non-numeric time `{value}`")]
    BadTime { line: usize, value: String },
    #[error("line {line}: onset {onset} is not before offset {offset}")]
    EmptyInterval { line: usize, onset: f64, offset: f64 },
    #[error("line {line}: unknown label source `{value}`")]
    BadSource { line: usize, value: String },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("cannot write corpus to {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, sample_rate: u32, samples: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            sample_rate,
            samples,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Ordered set of event class names. Index order is the class axis of every
/// label matrix and posterior track.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary(Vec<String>);

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self(names.into_iter().map(Into::into).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.0[index]
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

/// Clip-level annotation: which classes occur, without timing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakClipLabel {
    pub clip_id: String,
    pub tags: BTreeSet<String>,
}

/// One annotated event with onset/offset in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongEvent {
    pub clip_id: String,
    pub onset: f64,
    pub offset: f64,
    pub class: String,
}

impl StrongEvent {
    pub fn new(clip_id: impl Into<String>, onset: f64, offset: f64, class: impl Into<String>) -> Self {
        Self {
            clip_id: clip_id.into(),
            onset,
            offset,
            class: class.into(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Where a strong label came from; written as the optional fifth manifest
/// column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Nmf,
    Model,
    GroundTruth,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Nmf => "nmf",
            LabelSource::Model => "model",
            LabelSource::GroundTruth => "ground_truth",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "nmf" => Some(LabelSource::Nmf),
            "model" => Some(LabelSource::Model),
            "ground_truth" => Some(LabelSource::GroundTruth),
            _ => None,
        }
    }
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// WAV

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decodes a RIFF/WAVE byte buffer (PCM16 or float32, mono or stereo) into a
/// mono clip. Stereo is reduced by the per-sample channel mean.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > bytes.len() {
                    return Err(WavError::MalformedHeader("short fmt chunk".into()));
                }
                let mut tag = le_u16(bytes, body);
                let channels = le_u16(bytes, body + 2);
                let rate = le_u32(bytes, body + 4);
                let bits = le_u16(bytes, body + 14);
                if tag == WAVE_FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(WavError::MalformedHeader("short extensible fmt chunk".into()));
                    }
                    // first two bytes of the sub-format GUID carry the real tag
                    tag = le_u16(bytes, body + 24);
                }
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format
                    .ok_or_else(|| WavError::MalformedHeader("data chunk before fmt chunk".into()))?;
                if rate == 0 {
                    return Err(WavError::MalformedHeader("zero sample rate".into()));
                }
                if !(channels == 1 || channels == 2) {
                    return Err(WavError::UnsupportedEncoding(format!("{channels} channels")));
                }
                let bytes_per_sample = match (tag, bits) {
                    (WAVE_FORMAT_PCM, 16) => 2,
                    (WAVE_FORMAT_IEEE_FLOAT, 32) => 4,
                    _ => {
                        return Err(WavError::UnsupportedEncoding(format!(
                            "format tag {tag} with {bits} bits per sample"
                        )))
                    }
                };
                let available = bytes.len() - body;
                if size > available {
                    return Err(WavError::TruncatedData {
                        declared: size,
                        available,
                    });
                }
                let data = &bytes[body..body + size];
                let frame = bytes_per_sample * channels as usize;
                let n = data.len() / frame;
                let sample = |i: usize| -> f32 {
                    let at = i * bytes_per_sample;
                    if bytes_per_sample == 2 {
                        i16::from_le_bytes([data[at], data[at + 1]]) as f32 / 32768.0
                    } else {
                        f32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]])
                    }
                };
                let samples = if channels == 1 {
                    (0..n).map(sample).collect()
                } else {
                    (0..n).map(|i| 0.5 * (sample(2 * i) + sample(2 * i + 1))).collect()
                };
                return Ok(AudioClip::new("", rate, samples));
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(WavError::MalformedHeader("no data chunk".into()))
}

fn wav_header(out: &mut Vec<u8>, tag: u16, rate: u32, bits: u16, data_len: usize) {
    let block = bits / 8;
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
}

/// Encodes a mono clip as 16-bit PCM. Samples are clamped to [-1, 1].
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + 2 * clip.samples.len());
    wav_header(&mut out, WAVE_FORMAT_PCM, clip.sample_rate, 16, 2 * clip.samples.len());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Encodes a mono clip as IEEE float32.
pub fn encode_wav_f32(clip: &AudioClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + 4 * clip.samples.len());
    wav_header(&mut out, WAVE_FORMAT_IEEE_FLOAT, clip.sample_rate, 32, 4 * clip.samples.len());
    for &s in &clip.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Reads and decodes a WAV file; the clip id is the file name.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioFileError> {
    let bytes = fs::read(path).map_err(|source| AudioFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut clip = decode_wav(&bytes).map_err(|source| AudioFileError::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    clip.id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(clip)
}

// ---------------------------------------------------------------------------
// Resampling

const SINC_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;
const CUTOFF_FRACTION: f64 = 0.95;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc resampler: 64 taps per output sample, cutoff at 0.95
/// of the lower Nyquist frequency, kernel normalized to unit DC gain.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    if target_rate == clip.sample_rate {
        return clip.clone();
    }
    let in_rate = clip.sample_rate as f64;
    let out_rate = target_rate as f64;
    let out_len = (clip.samples.len() as f64 * out_rate / in_rate).round() as usize;
    // cutoff in cycles per input sample
    let fc = CUTOFF_FRACTION * in_rate.min(out_rate) / 2.0 / in_rate;
    let half = (SINC_TAPS / 2) as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let input = &clip.samples;

    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 * in_rate / out_rate;
            let base = t.floor() as i64;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for k in (base - half as i64 + 1)..=(base + half as i64) {
                let d = t - k as f64;
                let r = d / half;
                if r.abs() >= 1.0 {
                    continue;
                }
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                let h = 2.0 * fc * sinc(2.0 * fc * d) * w;
                norm += h;
                if k >= 0 && (k as usize) < input.len() {
                    acc += h * input[k as usize] as f64;
                }
            }
            (acc / norm) as f32
        })
        .collect();
    AudioClip::new(clip.id.clone(), target_rate, samples)
}

// ---------------------------------------------------------------------------
// Manifests

fn data_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n, l.split('\t').collect::<Vec<_>>()))
        .filter(|(_, f)| f[0] != "filename")
}

pub fn parse_weak_manifest(text: &str, vocab: &ClassVocabulary) -> Result<Vec<WeakClipLabel>, ManifestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, fields) in data_rows(text) {
        if fields.len() != 2 {
            return Err(ManifestError::FieldCount {
                line,
                expected: 2,
                found: fields.len(),
            });
        }
        let filename = fields[0].to_string();
        let mut tags = BTreeSet::new();
        for tag in fields[1].split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if !vocab.contains(tag) {
                return Err(ManifestError::UnknownClass {
                    line,
                    tag: tag.into(),
                });
            }
            if !tags.insert(tag.to_string()) {
                return Err(ManifestError::DuplicateTag {
                    line,
                    tag: tag.into(),
                });
            }
        }
        if tags.is_empty() {
            return Err(ManifestError::EmptyTags { line });
        }
        if !seen.insert(filename.clone()) {
            return Err(ManifestError::DuplicateFilename { line, filename });
        }
        out.push(WeakClipLabel {
            clip_id: filename,
            tags,
        });
    }
    Ok(out)
}

/// Parses strong rows, with or without the trailing provenance column.
pub fn parse_strong_manifest_with_source(
    text: &str,
    vocab: &ClassVocabulary,
) -> Result<Vec<(StrongEvent, Option<LabelSource>)>, ManifestError> {
    let mut out = Vec::new();
    for (line, fields) in data_rows(text) {
        if fields.len() != 4 && fields.len() != 5 {
            return Err(ManifestError::FieldCount {
                line,
                expected: 4,
                found: fields.len(),
            });
        }
        let time = |s: &str| -> Result<f64, ManifestError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ManifestError::BadTime {
                    line,
                    value: s.into(),
                })
        };
        let onset = time(fields[1])?;
        let offset = time(fields[2])?;
        if onset < 0.0 || onset >= offset {
            return Err(ManifestError::EmptyInterval { line, onset, offset });
        }
        let class = fields[3].trim();
        if !vocab.contains(class) {
            return Err(ManifestError::UnknownClass {
                line,
                tag: class.into(),
            });
        }
        let source = match fields.get(4) {
            Some(s) => Some(LabelSource::parse(s.trim()).ok_or_else(|| ManifestError::BadSource {
                line,
                value: (*s).into(),
            })?),
            None => None,
        };
        out.push((StrongEvent::new(fields[0], onset, offset, class), source));
    }
    Ok(out)
}

pub fn parse_strong_manifest(text: &str, vocab: &ClassVocabulary) -> Result<Vec<StrongEvent>, ManifestError> {
    Ok(parse_strong_manifest_with_source(text, vocab)?
        .into_iter()
        .map(|(e, _)| e)
        .collect())
}

fn read_text(path: &Path) -> Result<String, ManifestError> {
    fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_weak_manifest(path: &Path, vocab: &ClassVocabulary) -> Result<Vec<WeakClipLabel>, ManifestError> {
    parse_weak_manifest(&read_text(path)?, vocab)
}

pub fn load_strong_manifest(path: &Path, vocab: &ClassVocabulary) -> Result<Vec<StrongEvent>, ManifestError> {
    parse_strong_manifest(&read_text(path)?, vocab)
}

pub fn format_weak_manifest(labels: &[WeakClipLabel]) -> String {
    let mut s = String::from("filename\tevent_labels\n");
    for l in labels {
        let tags: Vec<&str> = l.tags.iter().map(String::as_str).collect();
        s.push_str(&format!("{}\t{}\n", l.clip_id, tags.join(",")));
    }
    s
}

/// Strong manifest text; a `source` column is added when `source` is given.
pub fn format_strong_manifest(events: &[StrongEvent], source: Option<LabelSource>) -> String {
    let mut s = String::from("filename\tonset\toffset\tevent_label");
    if source.is_some() {
        s.push_str("\tsource");
    }
    s.push('\n');
    for e in events {
        s.push_str(&format!("{}\t{:.6}\t{:.6}\t{}", e.clip_id, e.onset, e.offset, e.class));
        if let Some(src) = source {
            s.push('\t');
            s.push_str(src.as_str());
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Signal family of a synthetic event class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Waveform {
    /// Fixed-frequency sinusoid.
    Tone,
    /// Linear sweep from the fundamental upward by `span_hz` over the event.
    Chirp { span_hz: f64 },
    /// Sinusoid with raised-cosine amplitude modulation at `mod_hz`.
    AmTone { mod_hz: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub waveform: Waveform,
    pub fundamental_hz: f64,
}

impl SynthClass {
    pub fn new(name: impl Into<String>, waveform: Waveform, fundamental_hz: f64) -> Self {
        Self {
            name: name.into(),
            waveform,
            fundamental_hz,
        }
    }

    fn band(&self) -> (f64, f64) {
        match self.waveform {
            Waveform::Tone => (self.fundamental_hz, self.fundamental_hz),
            Waveform::Chirp { span_hz } => (self.fundamental_hz, self.fundamental_hz + span_hz),
            Waveform::AmTone { mod_hz } => (self.fundamental_hz - mod_hz, self.fundamental_hz + mod_hz),
        }
    }

    /// Unit-amplitude waveform value `t` seconds into an event of length `len`.
    fn value(&self, t: f64, len: f64) -> f64 {
        let f0 = self.fundamental_hz;
        match self.waveform {
            Waveform::Tone => (2.0 * PI * f0 * t).sin(),
            Waveform::Chirp { span_hz } => {
                let k = span_hz / len;
                (2.0 * PI * (f0 * t + 0.5 * k * t * t)).sin()
            }
            Waveform::AmTone { mod_hz } => {
                0.5 * (1.0 - (2.0 * PI * mod_hz * t).cos()) * (2.0 * PI * f0 * t).sin()
            }
        }
    }
}

/// The three spectrally disjoint classes used by the desk-scale experiments.
pub fn default_synth_classes() -> Vec<SynthClass> {
    vec![
        SynthClass::new("Tone", Waveform::Tone, 440.0),
        SynthClass::new("Chirp", Waveform::Chirp { span_hz: 800.0 }, 1800.0),
        SynthClass::new("Buzz", Waveform::AmTone { mod_hz: 12.0 }, 5000.0),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpusConfig {
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub classes: Vec<SynthClass>,
    /// Inclusive range of events per clip.
    pub events_per_clip: (usize, usize),
    /// Inclusive range of event durations in seconds.
    pub event_seconds: (f64, f64),
    pub snr_db: f64,
    pub seed: u64,
    /// Prefix of generated file names.
    pub prefix: String,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            n_clips: 10,
            clip_seconds: 10.0,
            classes: default_synth_classes(),
            events_per_clip: (1, 3),
            event_seconds: (0.5, 3.0),
            snr_db: 20.0,
            seed: 0,
            prefix: "synth".into(),
        }
    }
}

impl SynthCorpusConfig {
    pub fn vocabulary(&self) -> ClassVocabulary {
        ClassVocabulary::new(self.classes.iter().map(|c| c.name.clone()))
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.into()));
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite");
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return bad("clip_seconds must be positive");
        }
        if self.events_per_clip.0 > self.events_per_clip.1 {
            return bad("events_per_clip range is empty");
        }
        let (lo, hi) = self.event_seconds;
        if !(lo > 0.0 && lo <= hi && hi <= self.clip_seconds) {
            return bad("event_seconds must satisfy 0 < min <= max <= clip_seconds");
        }
        if self.classes.is_empty() && self.events_per_clip.1 > 0 {
            return bad("no classes to draw events from");
        }
        let nyquist = PIPELINE_RATE as f64 / 2.0;
        for (i, a) in self.classes.iter().enumerate() {
            let (alo, ahi) = a.band();
            if alo <= 0.0 || ahi >= nyquist {
                return bad(&format!("class {} lies outside (0, {nyquist}) Hz", a.name));
            }
            for b in &self.classes[i + 1..] {
                if a.fundamental_hz == b.fundamental_hz {
                    return bad("class fundamentals must be pairwise distinct");
                }
                if a.name == b.name {
                    return bad("class names must be unique");
                }
            }
        }
        Ok(())
    }
}

/// One synthesized clip with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip: AudioClip,
    pub events: Vec<StrongEvent>,
}

/// RMS of the white-noise background; event RMS follows from the SNR.
pub const NOISE_RMS: f64 = 0.02;
const FADE_SECONDS: f64 = 0.010;

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Renders one clip: white-noise background plus the given events, each gated
/// by a 10 ms raised-cosine fade and scaled to `snr_db` above the noise.
/// Event times are taken as given (callers quantize them).
pub fn render_clip(
    id: &str,
    clip_seconds: f64,
    classes: &[SynthClass],
    events: &[StrongEvent],
    snr_db: f64,
    rng: &mut Pcg64,
) -> AudioClip {
    let rate = PIPELINE_RATE as f64;
    let n_samples = (clip_seconds * rate).round() as usize;
    let event_rms = NOISE_RMS * 10f64.powf(snr_db / 20.0);
    let mut buf: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            NOISE_RMS * z
        })
        .collect();
    let fade = (FADE_SECONDS * rate).round() as usize;
    for e in events {
        let class = classes
            .iter()
            .find(|c| c.name == e.class)
            .expect("event class must be one of the synth classes");
        let start = ((e.onset * rate).round() as usize).min(n_samples);
        let end = ((e.offset * rate).round() as usize).min(n_samples);
        if end <= start {
            continue;
        }
        let len = (end - start) as f64 / rate;
        let mut wave: Vec<f64> = (start..end)
            .map(|i| class.value((i - start) as f64 / rate, len))
            .collect();
        let last = wave.len() - 1;
        for (i, w) in wave.iter_mut().enumerate() {
            let from_edge = i.min(last - i);
            if from_edge < fade {
                *w *= 0.5 * (1.0 - (PI * from_edge as f64 / fade as f64).cos());
            }
        }
        let rms = (wave.iter().map(|w| w * w).sum::<f64>() / wave.len() as f64).sqrt();
        if rms > 0.0 {
            let gain = event_rms / rms;
            for (b, w) in buf[start..end].iter_mut().zip(&wave) {
                *b += gain * w;
            }
        }
    }
    let samples = buf.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
    AudioClip::new(id, PIPELINE_RATE, samples)
}

/// Synthesizes clips in memory. Deterministic in `config` (including seed).
pub fn synthesize_clips(config: &SynthCorpusConfig) -> Result<Vec<SynthClip>, CorpusError> {
    config.validate()?;
    let mut rng = Pcg64::seed_from_u64(config.seed);
    let mut clips = Vec::with_capacity(config.n_clips);

    for c in 0..config.n_clips {
        let id = format!("{}_{c:04}.wav", config.prefix);
        let (emin, emax) = config.events_per_clip;
        let n_events = rng.random_range(emin..=emax);
        let mut events: Vec<StrongEvent> = Vec::new();
        for _ in 0..n_events {
            // same-class events never overlap; give up on a slot after a few draws
            for _attempt in 0..50 {
                let class = &config.classes[rng.random_range(0..config.classes.len())];
                let (dlo, dhi) = config.event_seconds;
                let dur = dlo + (dhi - dlo) * rng.random::<f64>();
                let onset = round_ms((config.clip_seconds - dur) * rng.random::<f64>());
                let offset = round_ms(onset + dur).min(config.clip_seconds);
                if offset <= onset {
                    continue;
                }
                let clash = events
                    .iter()
                    .any(|e| e.class == class.name && e.onset < offset && onset < e.offset);
                if !clash {
                    events.push(StrongEvent::new(id.clone(), onset, offset, class.name.clone()));
                    break;
                }
            }
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.class.cmp(&b.class)));
        let clip = render_clip(&id, config.clip_seconds, &config.classes, &events, config.snr_db, &mut rng);
        clips.push(SynthClip { clip, events });
    }
    Ok(clips)
}

/// Weak labels implied by strong events: the set of classes per clip. Clips
/// without events are omitted.
pub fn weak_from_strong(clips: &[SynthClip]) -> Vec<WeakClipLabel> {
    clips
        .iter()
        .filter(|c| !c.events.is_empty())
        .map(|c| WeakClipLabel {
            clip_id: c.clip.id.clone(),
            tags: c.events.iter().map(|e| e.class.clone()).collect(),
        })
        .collect()
}

/// File layout of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub root: PathBuf,
}

impl CorpusPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn audio_dir(&self) -> PathBuf {
        self.root.join("audio")
    }
    pub fn strong_manifest(&self) -> PathBuf {
        self.root.join("strong.tsv")
    }
    pub fn weak_manifest(&self) -> PathBuf {
        self.root.join("weak.tsv")
    }

    /// Sorted list of WAV files under `audio/`.
    pub fn audio_files(&self) -> io::Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(self.audio_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        Ok(files)
    }
}

/// Writes audio files plus strong and weak manifests under `out_dir`.
pub fn generate_synth_corpus(config: &SynthCorpusConfig, out_dir: &Path) -> Result<CorpusPaths, CorpusError> {
    let clips = synthesize_clips(config)?;
    let paths = CorpusPaths::new(out_dir);
    let unwritable = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Unwritable { path, source }
    };
    let audio = paths.audio_dir();
    fs::create_dir_all(&audio).map_err(unwritable(&audio))?;
    for c in &clips {
        let p = audio.join(&c.clip.id);
        fs::write(&p, encode_wav_pcm16(&c.clip)).map_err(unwritable(&p))?;
    }
    let strong: Vec<StrongEvent> = clips.iter().flat_map(|c| c.events.iter().cloned()).collect();
    let p = paths.strong_manifest();
    fs::write(&p, format_strong_manifest(&strong, None)).map_err(unwritable(&p))?;
    let p = paths.weak_manifest();
    fs::write(&p, format_weak_manifest(&weak_from_strong(&clips))).map_err(unwritable(&p))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::new(["Dog", "Blender", "Speech"])
    }

    #[test]
    fn one_second_pcm16_mono() {
        let clip = AudioClip::new("a", 44100, vec![0.25; 44100]);
        let back = decode_wav(&encode_wav_pcm16(&clip)).unwrap();
        assert_eq!(back.samples.len(), 44100);
        assert_eq!(back.sample_rate, 44100);
    }

    #[test]
    fn stereo_antiphase_is_silent() {
        let n = 100;
        let mut data = Vec::new();
        for i in 0..n {
            let x = ((i as f32) * 0.1).sin() * 0.5;
            data.extend_from_slice(&x.to_le_bytes());
            data.extend_from_slice(&(-x).to_le_bytes());
        }
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&3u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&(16000u32 * 8).to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(&32u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&(data.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&data);
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.samples.len(), n);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn wav_errors_are_distinct() {
        let clip = AudioClip::new("a", 8000, vec![0.1; 100]);
        let mut bytes = encode_wav_pcm16(&clip);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(decode_wav(&bytes), Err(WavError::TruncatedData { declared: 200, available: 190 })));

        assert!(matches!(decode_wav(b"RIFX...."), Err(WavError::MalformedHeader(_))));

        let mut bytes = encode_wav_pcm16(&clip);
        bytes[34] = 24; // bits per sample
        assert!(matches!(decode_wav(&bytes), Err(WavError::UnsupportedEncoding(_))));
    }

    #[test]
    fn float_round_trip_is_exact() {
        let clip = AudioClip::new("a", 32000, vec![0.5, -0.25, 0.125, -1.0]);
        assert_eq!(decode_wav(&encode_wav_f32(&clip)).unwrap().samples, clip.samples);
    }

    #[test]
    fn resample_identity_and_length() {
        let clip = AudioClip::new("a", 44100, (0..44100).map(|i| (i as f32 * 0.01).sin()).collect());
        assert_eq!(resample(&clip, 44100), clip);
        let out = resample(&clip, 32000);
        assert_eq!(out.samples.len(), 32000);
        assert_eq!(out.sample_rate, 32000);
    }

    #[test]
    fn weak_manifest_parsing() {
        let rows = parse_weak_manifest("filename\tevent_labels\na.wav\tDog,Blender\n", &vocab()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].clip_id, "a.wav");
        assert_eq!(rows[0].tags, BTreeSet::from(["Dog".to_string(), "Blender".to_string()]));

        match parse_weak_manifest("a.wav\tCat\n", &vocab()) {
            Err(ManifestError::UnknownClass { tag, .. }) => assert_eq!(tag, "Cat"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_weak_manifest("a.wav\tDog\na.wav\tSpeech\n", &vocab()),
            Err(ManifestError::DuplicateFilename { line: 2, .. })
        ));
        assert!(matches!(parse_weak_manifest("a.wav\t\n", &vocab()), Err(ManifestError::EmptyTags { .. })));
    }

    #[test]
    fn strong_manifest_parsing() {
        let ev = parse_strong_manifest("a.wav\t1.0\t2.5\tDog\n", &vocab()).unwrap();
        assert_eq!(ev, vec![StrongEvent::new("a.wav", 1.0, 2.5, "Dog")]);
        assert!(matches!(
            parse_strong_manifest("a.wav\t2.0\t2.0\tDog\n", &vocab()),
            Err(ManifestError::EmptyInterval { .. })
        ));
        assert!(matches!(
            parse_strong_manifest("a.wav\tx\t2.0\tDog\n", &vocab()),
            Err(ManifestError::BadTime { .. })
        ));
        assert!(matches!(
            parse_strong_manifest("a.wav\t1\t2.0\tCat\n", &vocab()),
            Err(ManifestError::UnknownClass { .. })
        ));
        assert!(parse_strong_manifest("", &vocab()).unwrap().is_empty());
    }

    #[test]
    fn strong_manifest_source_column_round_trips() {
        let events = vec![StrongEvent::new("a.wav", 0.5, 1.25, "Dog")];
        let text = format_strong_manifest(&events, Some(LabelSource::Nmf));
        let parsed = parse_strong_manifest_with_source(&text, &vocab()).unwrap();
        assert_eq!(parsed, vec![(events[0].clone(), Some(LabelSource::Nmf))]);
    }

    #[test]
    fn planted_event_renders_inside_its_bounds() {
        let classes = default_synth_classes();
        let ev = [StrongEvent::new("p.wav", 1.0, 2.0, "Tone")];
        let clip = render_clip("p.wav", 3.0, &classes, &ev, 20.0, &mut Pcg64::seed_from_u64(1));
        assert_eq!(clip.samples.len(), 96_000);
        let rms = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            (clip.samples[r].iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / n).sqrt()
        };
        let inside = rms(33_000..63_000);
        let outside = rms(70_000..96_000);
        // 20 dB SNR: event+noise is ~10x the noise RMS
        assert!((inside / outside - 101f64.sqrt()).abs() < 0.5, "{inside} {outside}");
    }

    #[test]
    fn single_random_event_is_recorded_exactly() {
        let cfg = SynthCorpusConfig {
            n_clips: 1,
            clip_seconds: 3.0,
            events_per_clip: (1, 1),
            event_seconds: (1.0, 1.0),
            ..Default::default()
        };
        let clips = synthesize_clips(&cfg).unwrap();
        let ev = &clips[0].events;
        assert_eq!(ev.len(), 1);
        assert!((ev[0].duration() - 1.0).abs() < 1.5e-3);
        assert!(ev[0].onset >= 0.0 && ev[0].offset <= 3.0);
    }

    #[test]
    fn invalid_corpus_configs_are_rejected() {
        let mut cfg = SynthCorpusConfig::default();
        cfg.classes[1].fundamental_hz = cfg.classes[0].fundamental_hz;
        assert!(matches!(synthesize_clips(&cfg), Err(CorpusError::InvalidConfig(_))));
        let cfg = SynthCorpusConfig {
            snr_db: f64::NAN,
            ..Default::default()
        };
        assert!(synthesize_clips(&cfg).is_err());
    }
}
