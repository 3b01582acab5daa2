//! Log-mel front end: 1024-point periodic-Hann STFT with a 500-sample hop at
//! 32 kHz, a 64-band HTK mel filterbank over 50 Hz – 14 kHz, and a log floor.
//! Also the `LMEL` binary matrix cache.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::ingest::{AudioClip, PIPELINE_RATE};
use crate::matrix::{Matrix, Op};

pub const N_FFT: usize = 1024;
pub const HOP: usize = 500;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 64;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 14_000.0;
pub const LOG_EPS: f64 = 1e-10;

/// Seconds between consecutive STFT frames at the pipeline rate.
pub const FRAME_HOP_SECONDS: f64 = HOP as f64 / PIPELINE_RATE as f64;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected sample rate {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("clip has {len} samples, shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("invalid filterbank parameters: {0}")]
    Filterbank(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: not an LMEL file")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    Version(u8),
    #[error("size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Power spectrogram, frames × 513 bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Matrix<f64>,
    pub frame_hop_seconds: f64,
    pub bin_hz: f64,
}

/// Mel spectrogram, frames × 64; the non-negative matrix factorized by NMF
/// (transposed to mel × frames there).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix<f64>,
    pub frame_hop_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Matrix<f64>,
    pub frame_hop_seconds: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }
}

pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < N_FFT {
        0
    } else {
        1 + (n_samples - N_FFT) / HOP
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Un-padded STFT power spectrum; frame `t` covers samples `[500t, 500t + 1024)`.
pub fn stft(clip: &AudioClip) -> Result<Spectrogram, FeatureError> {
    if clip.sample_rate != PIPELINE_RATE {
        return Err(FeatureError::SampleRate {
            expected: PIPELINE_RATE,
            got: clip.sample_rate,
        });
    }
    let n_frames = frame_count(clip.samples.len());
    if n_frames == 0 {
        return Err(FeatureError::TooShort {
            len: clip.samples.len(),
            window: N_FFT,
        });
    }
    let window = hann_window(N_FFT);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::default(); N_FFT];
    let mut values = Matrix::zeros(n_frames, N_BINS);
    for t in 0..n_frames {
        let frame = &clip.samples[t * HOP..t * HOP + N_FFT];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, c) in values.row_mut(t).iter_mut().zip(&buf[..N_BINS]) {
            *v = c.norm_sqr();
        }
    }
    Ok(Spectrogram {
        values,
        frame_hop_seconds: HOP as f64 / clip.sample_rate as f64,
        bin_hz: clip.sample_rate as f64 / N_FFT as f64,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// n_mels × n_bins triangular weights with unit peaks.
    pub weights: Matrix<f64>,
    /// n_mels + 2 band edges in Hz.
    pub band_edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }
}

/// Filterbank with the pipeline's default parameters.
pub fn default_filterbank() -> MelFilterbank {
    build_mel_filterbank(N_MELS, F_MIN, F_MAX, N_FFT, PIPELINE_RATE).expect("default parameters are valid")
}

/// HTK-mel triangular filterbank. Filter `k` rises from edge `k` to a peak of
/// 1 at edge `k+1` and falls back to 0 at edge `k+2`.
pub fn build_mel_filterbank(
    n_mels: usize,
    f_min: f64,
    f_max: f64,
    n_fft: usize,
    rate: u32,
) -> Result<MelFilterbank, FeatureError> {
    let nyquist = rate as f64 / 2.0;
    if n_mels == 0 || n_fft < 2 || rate == 0 {
        return Err(FeatureError::Filterbank("n_mels, n_fft and rate must be positive".into()));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(FeatureError::Filterbank(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got {f_min}..{f_max}"
        )));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let n_edges = n_mels + 2;
    let band_edges: Vec<f64> = (0..n_edges)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_edges - 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = rate as f64 / n_fft as f64;
    let weights = Matrix::from_fn(n_mels, n_bins, |k, b| {
        let f = b as f64 * bin_hz;
        let (lo, mid, hi) = (band_edges[k], band_edges[k + 1], band_edges[k + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    });
    Ok(MelFilterbank { weights, band_edges })
}

/// `spec · fbᵀ`.
pub fn apply_mel(spec: &Spectrogram, fb: &MelFilterbank) -> Result<MelSpectrogram, FeatureError> {
    if spec.values.cols() != fb.weights.cols() {
        return Err(FeatureError::Shape(format!(
            "spectrogram has {} bins, filterbank expects {}",
            spec.values.cols(),
            fb.weights.cols()
        )));
    }
    let values = Matrix::product(&spec.values, Op::N, &fb.weights, Op::T);
    Ok(MelSpectrogram {
        values,
        frame_hop_seconds: spec.frame_hop_seconds,
    })
}

/// Entrywise `ln(v + eps)`.
pub fn log_compress(mel: &MelSpectrogram, eps: f64) -> LogMelSpectrogram {
    LogMelSpectrogram {
        values: mel.values.map(|v| (v + eps).ln()),
        frame_hop_seconds: mel.frame_hop_seconds,
    }
}

/// Clip → (mel, log-mel) with the default filterbank and log floor.
pub fn extract(clip: &AudioClip, fb: &MelFilterbank, eps: f64) -> Result<(MelSpectrogram, LogMelSpectrogram), FeatureError> {
    let mel = apply_mel(&stft(clip)?, fb)?;
    let log = log_compress(&mel, eps);
    Ok((mel, log))
}

// ---------------------------------------------------------------------------
// LMEL cache

const MAGIC: &[u8; 4] = b"LMEL";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

pub fn encode_matrix(m: &Matrix<f32>) -> Result<Vec<u8>, CacheError> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for (i, v) in m.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(CacheError::NonFinite {
                row: i / m.cols(),
                col: i % m.cols(),
            });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix<f32>, CacheError> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(CacheError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(CacheError::Version(bytes[4]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(CacheError::SizeMismatch {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(CacheError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn cache_write(m: &Matrix<f32>, path: &Path) -> Result<(), CacheError> {
    let bytes = encode_matrix(m)?;
    write_atomic(path, &bytes).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cache_read(path: &Path) -> Result<Matrix<f32>, CacheError> {
    let bytes = fs::read(path).map_err(|source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_matrix(&bytes)
}

pub fn to_f32(m: &Matrix<f64>) -> Matrix<f32> {
    m.map(|v| v as f32)
}

pub fn to_f64(m: &Matrix<f32>) -> Matrix<f64> {
    m.map(|v| v as f64)
}
