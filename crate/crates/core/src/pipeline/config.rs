//! Flat `section.key = value` configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::evaluation::{Averaging, DetectionOptions, EventMetricOptions};
use crate::features::LOG_EPS;
use crate::ingest::{default_synth_classes, ClassVocabulary};
use crate::nn::Architecture;
use crate::trainer::TrainConfig;
use crate::weak2strong::LabelingOptions;

use super::PipelineError;

/// Training-data combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Combination {
    /// Weak labels through NMF.
    C1,
    /// Synthetic strong labels.
    C2,
    /// C1 ∪ C2.
    C3,
    /// Unlabeled clips tagged by the C1-style model, through NMF.
    C4,
    /// C1 ∪ tagged unlabeled (C1-style tagger).
    C5,
    /// Unlabeled clips tagged by the C3-style model, through NMF.
    C6,
    /// C3 ∪ tagged unlabeled (C3-style tagger).
    C7,
}

impl Combination {
    pub const ALL: [Combination; 7] = [Self::C1, Self::C2, Self::C3, Self::C4, Self::C5, Self::C6, Self::C7];

    pub fn uses_weak(self) -> bool {
        matches!(self, Self::C1 | Self::C3 | Self::C5 | Self::C7)
    }
    pub fn uses_strong(self) -> bool {
        matches!(self, Self::C2 | Self::C3 | Self::C7)
    }
    pub fn uses_unlabeled(self) -> bool {
        matches!(self, Self::C4 | Self::C5 | Self::C6 | Self::C7)
    }
    /// Combination whose model tags the unlabeled set under `--bootstrap`.
    pub fn tagger(self) -> Option<Combination> {
        match self {
            Self::C4 | Self::C5 => Some(Self::C1),
            Self::C6 | Self::C7 => Some(Self::C3),
            _ => None,
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Combination {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown combination {s:?} (expected C1..C7)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Corpus directories: `audio/` plus `weak.tsv` / `strong.tsv`.
    pub weak_corpus: Option<PathBuf>,
    pub strong_corpus: Option<PathBuf>,
    pub unlabeled_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub vocab: ClassVocabulary,
    pub log_floor: f64,
    pub labeling: LabelingOptions,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub tag_threshold: f64,
    pub detection: DetectionOptions,
    pub metrics: EventMetricOptions,
    pub segment_seconds: f64,
    pub combo: Combination,
    pub out: PathBuf,
    /// Seeds NMF initialization, model initialization and training.
    pub seed: u64,
    pub tagging_checkpoint: Option<PathBuf>,
    pub bootstrap: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weak_corpus: None,
            strong_corpus: None,
            unlabeled_corpus: None,
            eval_corpus: None,
            vocab: ClassVocabulary::new(default_synth_classes().into_iter().map(|c| c.name)),
            log_floor: LOG_EPS,
            labeling: LabelingOptions::default(),
            arch: Architecture::Proposed5,
            train: TrainConfig::default(),
            tag_threshold: 0.5,
            detection: DetectionOptions::default(),
            metrics: EventMetricOptions::default(),
            segment_seconds: 1.0,
            combo: Combination::C1,
            out: PathBuf::from("out"),
            seed: 0,
            tagging_checkpoint: None,
            bootstrap: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(PipelineError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl PipelineConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let v = value.trim();
        match key.trim() {
            "corpus.weak" => self.weak_corpus = opt_path(v),
            "corpus.strong" => self.strong_corpus = opt_path(v),
            "corpus.unlabeled" => self.unlabeled_corpus = opt_path(v),
            "corpus.eval" => self.eval_corpus = opt_path(v),
            "corpus.classes" => {
                let names: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                if names.is_empty() {
                    return Err(PipelineError::Config("corpus.classes: empty vocabulary".into()));
                }
                self.vocab = ClassVocabulary::new(names);
            }
            "features.log_floor" => self.log_floor = parse(key, v)?,
            "nmf.components" => {
                self.labeling.components = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "nmf.max_iters" => self.labeling.nmf.max_iters = parse(key, v)?,
            "nmf.rel_tol" => self.labeling.nmf.rel_tol = parse(key, v)?,
            "labeling.threshold" => self.labeling.threshold = parse(key, v)?,
            "labeling.min_event_seconds" => self.labeling.min_event_seconds = parse(key, v)?,
            "labeling.max_gap_seconds" => self.labeling.max_gap_seconds = parse(key, v)?,
            "train.arch" => self.arch = v.parse().map_err(PipelineError::Config)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.epsilon" => self.train.epsilon = parse(key, v)?,
            "train.crop_frames" => self.train.crop_frames = parse(key, v)?,
            "tag.threshold" => self.tag_threshold = parse(key, v)?,
            "detect.threshold" => self.detection.threshold = parse(key, v)?,
            "detect.median_width" => self.detection.median_width = parse(key, v)?,
            "detect.min_event_seconds" => self.detection.min_event_seconds = parse(key, v)?,
            "detect.max_gap_seconds" => self.detection.max_gap_seconds = parse(key, v)?,
            "eval.onset_collar" => self.metrics.onset_collar = parse(key, v)?,
            "eval.offset_collar" => self.metrics.offset_collar = parse(key, v)?,
            "eval.offset_fraction" => self.metrics.offset_fraction = parse(key, v)?,
            "eval.segment_seconds" => self.segment_seconds = parse(key, v)?,
            "eval.averaging" => {
                self.metrics.averaging = match v {
                    "micro" => Averaging::Micro,
                    "macro" => Averaging::Macro,
                    _ => return Err(PipelineError::Config(format!("{key}: expected micro or macro, got {v:?}"))),
                }
            }
            "run.combo" => self.combo = v.parse().map_err(PipelineError::Config)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.seed" => self.seed = parse(key, v)?,
            "run.tagging_checkpoint" => self.tagging_checkpoint = opt_path(v),
            "run.bootstrap" => self.bootstrap = parse_bool(key, v)?,
            other => return Err(PipelineError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value, in a form `from_text` accepts.
    pub fn to_text(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("corpus.weak", p(&self.weak_corpus));
        kv("corpus.strong", p(&self.strong_corpus));
        kv("corpus.unlabeled", p(&self.unlabeled_corpus));
        kv("corpus.eval", p(&self.eval_corpus));
        kv("corpus.classes", self.vocab.names().join(","));
        kv("features.log_floor", format!("{:e}", self.log_floor));
        kv(
            "nmf.components",
            self.labeling.components.map_or("auto".to_string(), |c| c.to_string()),
        );
        kv("nmf.max_iters", self.labeling.nmf.max_iters.to_string());
        kv("nmf.rel_tol", format!("{:e}", self.labeling.nmf.rel_tol));
        kv("labeling.threshold", self.labeling.threshold.to_string());
        kv("labeling.min_event_seconds", self.labeling.min_event_seconds.to_string());
        kv("labeling.max_gap_seconds", self.labeling.max_gap_seconds.to_string());
        kv("train.arch", self.arch.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.learning_rate", format!("{:e}", self.train.learning_rate));
        kv("train.beta1", self.train.beta1.to_string());
        kv("train.beta2", self.train.beta2.to_string());
        kv("train.epsilon", format!("{:e}", self.train.epsilon));
        kv("train.crop_frames", self.train.crop_frames.to_string());
        kv("tag.threshold", self.tag_threshold.to_string());
        kv("detect.threshold", self.detection.threshold.to_string());
        kv("detect.median_width", self.detection.median_width.to_string());
        kv("detect.min_event_seconds", self.detection.min_event_seconds.to_string());
        kv("detect.max_gap_seconds", self.detection.max_gap_seconds.to_string());
        kv("eval.onset_collar", self.metrics.onset_collar.to_string());
        kv("eval.offset_collar", self.metrics.offset_collar.to_string());
        kv("eval.offset_fraction", self.metrics.offset_fraction.to_string());
        kv("eval.segment_seconds", self.segment_seconds.to_string());
        kv(
            "eval.averaging",
            match self.metrics.averaging {
                Averaging::Micro => "micro".into(),
                Averaging::Macro => "macro".into(),
            },
        );
        kv("run.combo", self.combo.to_string());
        kv("run.out", self.out.display().to_string());
        kv("run.seed", self.seed.to_string());
        kv("run.tagging_checkpoint", p(&self.tagging_checkpoint));
        kv("run.bootstrap", self.bootstrap.to_string());
        s
    }

    /// Labeling options with the run seed applied.
    pub fn labeling_options(&self) -> LabelingOptions {
        let mut l = self.labeling.clone();
        l.nmf.seed = self.seed;
        l
    }

    /// Training options with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        self.labeling_options().validate().map_err(|e| cfg(e.to_string()))?;
        self.train_config().validate().map_err(|e| cfg(e.to_string()))?;
        self.detection.validate().map_err(|e| cfg(e.to_string()))?;
        if !(self.tag_threshold > 0.0 && self.tag_threshold <= 1.0) {
            return Err(cfg(format!("tag.threshold {} outside (0, 1]", self.tag_threshold)));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(cfg("eval.segment_seconds must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(cfg("features.log_floor must be positive".into()));
        }
        if self.labeling.nmf.max_iters == 0 || !(self.labeling.nmf.rel_tol > 0.0) {
            return Err(cfg("nmf.max_iters must be ≥ 1 and nmf.rel_tol positive".into()));
        }
        Ok(())
    }
}
