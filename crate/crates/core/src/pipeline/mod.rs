//! Stage graph for the C1–C7 training-data combinations: features, NMF
//! labels, pseudo-tags, training, detection and scoring.

mod cache;
mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use cache::{file_digest, run_stage, sha256_hex, StageKey, StageRecord, COMPLETE_MARKER};
pub use config::{Combination, PipelineConfig};

use crate::evaluation::{
    event_based_f1, format_report, posteriors_to_events, segment_based_f1, EvalError, Prf, ReportColumn,
};
use crate::features::{
    cache_read, cache_write, default_filterbank, extract, to_f32, to_f64, CacheError, FeatureError, LogMelSpectrogram,
    MelSpectrogram, FRAME_HOP_SECONDS, HOP, N_FFT, N_MELS,
};
use crate::ingest::{
    format_strong_manifest, format_weak_manifest, load_strong_manifest, load_weak_manifest, read_wav, resample,
    AudioClip, AudioFileError, ClassVocabulary, CorpusPaths, LabelSource, ManifestError, StrongEvent, WeakClipLabel, PIPELINE_RATE,
};
use crate::nn::{load_checkpoint, CheckpointError, Model, NnError};
use crate::trainer::{rasterize_labels, train, TrainError, TrainExample, CHECKPOINT_FILE};
use crate::weak2strong::{approximate_strong_labels, tag_unlabeled, LabelingError, LabelingOptions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{combo} needs a {role} corpus (set corpus.{role})")]
    MissingCorpus { combo: Combination, role: &'static str },
    #[error("{0} needs a tagging checkpoint: set run.tagging_checkpoint or enable bootstrap")]
    MissingCheckpoint(Combination),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioFileError),
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: ManifestError,
    },
    #[error("{clip}: {source}")]
    Features {
        clip: String,
        #[source]
        source: FeatureError,
    },
    #[error("{path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: CacheError,
    },
    #[error("clip {clip} is not in {corpus}")]
    MissingClip { clip: String, corpus: PathBuf },
    #[error(transparent)]
    Labeling(#[from] LabelingError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a WAV file and resamples it to the pipeline rate.
pub fn load_audio(path: &Path) -> Result<AudioClip, PipelineError> {
    let clip = read_wav(path)?;
    Ok(if clip.sample_rate == PIPELINE_RATE {
        clip
    } else {
        resample(&clip, PIPELINE_RATE)
    })
}

pub fn list_audio(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

const DURATIONS_FILE: &str = "durations.tsv";

/// Cached features of one corpus: `<id>.mel` (pre-log, for NMF) and
/// `<id>.logmel` (network input), both `LMEL` float32 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    pub dir: PathBuf,
    /// Clip ids (audio file names) in sorted order, with durations in seconds.
    pub clips: Vec<(String, f64)>,
}

impl FeatureIndex {
    /// Extracts and writes features for every WAV file in `audio_dir`.
    pub fn build(audio_dir: &Path, out: &Path, log_floor: f64) -> Result<Self, PipelineError> {
        let fb = default_filterbank();
        let files = list_audio(audio_dir)?;
        fs::create_dir_all(out).map_err(io_err(out))?;
        let clips = files
            .par_iter()
            .map(|path| {
                let clip = load_audio(path)?;
                let (mel, logmel) = extract(&clip, &fb, log_floor).map_err(|source| PipelineError::Features {
                    clip: clip.id.clone(),
                    source,
                })?;
                for (suffix, m) in [("mel", &mel.values), ("logmel", &logmel.values)] {
                    let p = out.join(format!("{}.{suffix}", clip.id));
                    cache_write(&to_f32(m), &p).map_err(|source| PipelineError::Cache { path: p, source })?;
                }
                Ok((clip.id.clone(), clip.duration_seconds()))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut text = String::new();
        for (id, d) in &clips {
            let _ = writeln!(text, "{id}\t{d}");
        }
        write_text(&out.join(DURATIONS_FILE), &text)?;
        Ok(Self {
            dir: out.to_path_buf(),
            clips,
        })
    }

    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(DURATIONS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let clips = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (id, d) = l.split_once('\t').ok_or_else(|| PipelineError::Config(format!("{}: bad line {l:?}", path.display())))?;
                let d = d
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("{}: bad duration {d:?}", path.display())))?;
                Ok((id.to_string(), d))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            clips,
        })
    }

    fn read(&self, id: &str, suffix: &str) -> Result<crate::matrix::Matrix<f64>, PipelineError> {
        let p = self.dir.join(format!("{id}.{suffix}"));
        if !self.contains(id) {
            return Err(PipelineError::MissingClip {
                clip: id.to_string(),
                corpus: self.dir.clone(),
            });
        }
        Ok(to_f64(&cache_read(&p).map_err(|source| PipelineError::Cache { path: p, source })?))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.clips.iter().any(|(c, _)| c == id)
    }

    pub fn mel(&self, id: &str) -> Result<MelSpectrogram, PipelineError> {
        Ok(MelSpectrogram {
            values: self.read(id, "mel")?,
            frame_hop_seconds: FRAME_HOP_SECONDS,
        })
    }

    pub fn logmel(&self, id: &str) -> Result<LogMelSpectrogram, PipelineError> {
        Ok(LogMelSpectrogram {
            values: self.read(id, "logmel")?,
            frame_hop_seconds: FRAME_HOP_SECONDS,
        })
    }

    pub fn durations(&self) -> BTreeMap<String, f64> {
        self.clips.iter().cloned().collect()
    }
}

/// Approximate strong labels for every weakly labeled clip, in clip order.
pub fn nmf_label_clips(
    index: &FeatureIndex,
    weak: &[WeakClipLabel],
    opts: &LabelingOptions,
) -> Result<Vec<StrongEvent>, PipelineError> {
    let per_clip = weak
        .par_iter()
        .map(|w| Ok(approximate_strong_labels(&index.mel(&w.clip_id)?, w, opts)?))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Tags every clip of the index; clips with no tag above the threshold are
/// left out.
pub fn tag_clips(
    model: &mut Model<f32>,
    index: &FeatureIndex,
    vocab: &ClassVocabulary,
    threshold: f64,
) -> Result<Vec<WeakClipLabel>, PipelineError> {
    let mut out = Vec::new();
    for (id, _) in &index.clips {
        let label = tag_unlabeled(model, vocab, id, &index.logmel(id)?, threshold)?;
        if !label.tags.is_empty() {
            out.push(label);
        }
    }
    Ok(out)
}

/// Detected events for every clip of the index.
pub fn detect_clips(
    model: &mut Model<f32>,
    index: &FeatureIndex,
    vocab: &ClassVocabulary,
    opts: &crate::evaluation::DetectionOptions,
) -> Result<Vec<StrongEvent>, PipelineError> {
    let mut out = Vec::new();
    for (id, _) in &index.clips {
        let posteriors = model.predict(&index.logmel(id)?)?;
        out.extend(posteriors_to_events(&posteriors, id, vocab, opts)?);
    }
    Ok(out)
}

/// Training examples for `ids`, with targets rasterized from `events`.
pub fn build_examples(
    index: &FeatureIndex,
    ids: &[String],
    events: &[StrongEvent],
    vocab: &ClassVocabulary,
) -> Result<Vec<TrainExample>, PipelineError> {
    let mut by_clip: BTreeMap<&str, Vec<StrongEvent>> = BTreeMap::new();
    for e in events {
        by_clip.entry(e.clip_id.as_str()).or_default().push(e.clone());
    }
    ids.iter()
        .map(|id| {
            let logmel = index.logmel(id)?;
            let evs = by_clip.get(id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let labels = rasterize_labels(evs, logmel.n_frames(), logmel.frame_hop_seconds, vocab)?;
            Ok(TrainExample {
                clip_id: id.clone(),
                features: logmel.values,
                labels,
            })
        })
        .collect()
}

/// Event- and segment-based scores against reference events.
pub fn score(
    refs: &[StrongEvent],
    preds: &[StrongEvent],
    durations: &BTreeMap<String, f64>,
    cfg: &PipelineConfig,
) -> Result<(Prf, Prf), PipelineError> {
    let event = event_based_f1(refs, preds, &cfg.metrics);
    let segment = segment_based_f1(refs, preds, durations, cfg.segment_seconds, cfg.metrics.averaging)?;
    Ok((event, segment))
}

pub const REPORT_FILE: &str = "report.tsv";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_SNAPSHOT: &str = "config.resolved";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const TAGS_FILE: &str = "tags.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub combo: Combination,
    pub config_snapshot: PathBuf,
    pub stages: Vec<StageRecord>,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub event: Prf,
    pub segment: Prf,
}

impl RunManifest {
    /// `stage<TAB>path<TAB>seconds`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("stage\tpath\tseconds\n");
        let _ = writeln!(s, "config\t{}\t0.000", self.config_snapshot.display());
        for r in &self.stages {
            let _ = writeln!(s, "{}\t{}\t{:.3}", r.stage, r.path.display(), r.seconds);
        }
        s
    }
}

/// A corpus with its cached features.
struct Corpus {
    root: PathBuf,
    features: FeatureIndex,
    key: String,
}

/// Supervision for one training run: feature index plus labeled clips.
struct Supervision {
    index: FeatureIndex,
    ids: Vec<String>,
    events: Vec<StrongEvent>,
    /// Digest identifying features and labels.
    key: String,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    stages_root: PathBuf,
    records: Vec<StageRecord>,
    corpora: BTreeMap<&'static str, Corpus>,
}

impl<'a> Runner<'a> {
    fn record(&mut self, r: StageRecord) -> PathBuf {
        let p = r.path.clone();
        if !self.records.iter().any(|x| x.path == r.path) {
            self.records.push(r);
        }
        p
    }

    fn corpus(&mut self, role: &'static str, root: &Option<PathBuf>) -> Result<&Corpus, PipelineError> {
        if !self.corpora.contains_key(role) {
            let root = root.clone().ok_or(PipelineError::MissingCorpus {
                combo: self.cfg.combo,
                role,
            })?;
            let audio = CorpusPaths::new(&root).audio_dir();
            let mut key = StageKey::new("features")
                .field("n_fft", N_FFT)
                .field("hop", HOP)
                .field("mels", N_MELS)
                .field("rate", PIPELINE_RATE)
                .field("log_floor", format!("{:e}", self.cfg.log_floor));
            for f in list_audio(&audio)? {
                key = key.field(&f.file_name().unwrap_or_default().to_string_lossy(), file_digest(&f)?);
            }
            let floor = self.cfg.log_floor;
            let rec = run_stage(&self.stages_root, &key, |dir| FeatureIndex::build(&audio, dir, floor).map(|_| ()))?;
            let features = FeatureIndex::open(&self.record(rec))?;
            self.corpora.insert(
                role,
                Corpus {
                    root,
                    features,
                    key: key.digest(),
                },
            );
        }
        Ok(&self.corpora[role])
    }

    fn labeling_key(&self, stage: &str, features_key: &str, labels_digest: &str) -> StageKey {
        let l = self.cfg.labeling_options();
        StageKey::new(stage)
            .field("features", features_key)
            .field("weak", labels_digest)
            .field("classes", self.cfg.vocab.names().join(","))
            .field("threshold", l.threshold)
            .field("min_event", l.min_event_seconds)
            .field("max_gap", l.max_gap_seconds)
            .field("components", format!("{:?}", l.components))
            .field("max_iters", l.nmf.max_iters)
            .field("rel_tol", format!("{:e}", l.nmf.rel_tol))
            .field("floor", format!("{:e}", l.nmf.floor))
            .field("seed", l.nmf.seed)
    }

    /// NMF labels for the clips named in `weak_path`, cached as a strong
    /// manifest with `nmf` provenance.
    fn nmf_supervision(&mut self, role: &'static str, root: Option<PathBuf>, weak_path: &Path) -> Result<Supervision, PipelineError> {
        let corpus = self.corpus(role, &root)?;
        let (index, fkey) = (corpus.features.clone(), corpus.key.clone());
        let vocab = self.cfg.vocab.clone();
        let weak = load_weak_manifest(weak_path, &vocab).map_err(|source| PipelineError::Manifest {
            path: weak_path.to_path_buf(),
            source,
        })?;
        for w in &weak {
            if !index.contains(&w.clip_id) {
                return Err(PipelineError::MissingClip {
                    clip: w.clip_id.clone(),
                    corpus: index.dir.clone(),
                });
            }
        }
        let key = self.labeling_key("nmf-labels", &fkey, &file_digest(weak_path)?);
        let opts = self.cfg.labeling_options();
        let rec = run_stage(&self.stages_root, &key, |dir| {
            let events = nmf_label_clips(&index, &weak, &opts)?;
            write_text(&dir.join(LABELS_FILE), &format_strong_manifest(&events, Some(LabelSource::Nmf)))
        })?;
        let labels = self.record(rec).join(LABELS_FILE);
        let events = load_strong_manifest(&labels, &vocab).map_err(|source| PipelineError::Manifest { path: labels, source })?;
        Ok(Supervision {
            index,
            ids: weak.iter().map(|w| w.clip_id.clone()).collect(),
            events,
            key: key.digest(),
        })
    }

    fn weak_supervision(&mut self) -> Result<Supervision, PipelineError> {
        let root = self.cfg.weak_corpus.clone();
        let weak_path = root
            .as_ref()
            .map(|r| CorpusPaths::new(r).weak_manifest())
            .ok_or(PipelineError::MissingCorpus {
                combo: self.cfg.combo,
                role: "weak",
            })?;
        self.nmf_supervision("weak", root, &weak_path)
    }

    fn strong_supervision(&mut self) -> Result<Supervision, PipelineError> {
        let root = self.cfg.strong_corpus.clone();
        let corpus = self.corpus("strong", &root)?;
        let (index, fkey) = (corpus.features.clone(), corpus.key.clone());
        let path = CorpusPaths::new(&corpus.root).strong_manifest();
        let events = load_strong_manifest(&path, &self.cfg.vocab).map_err(|source| PipelineError::Manifest {
            path: path.clone(),
            source,
        })?;
        if let Some(e) = events.iter().find(|e| !index.contains(&e.clip_id)) {
            return Err(PipelineError::MissingClip {
                clip: e.clip_id.clone(),
                corpus: index.dir.clone(),
            });
        }
        let key = StageKey::new("strong-labels")
            .field("features", &fkey)
            .field("labels", file_digest(&path)?)
            .digest();
        Ok(Supervision {
            ids: index.clips.iter().map(|(id, _)| id.clone()).collect(),
            index,
            events,
            key,
        })
    }

    /// Unlabeled clips tagged by `checkpoint`, then labeled through NMF.
    fn tagged_supervision(&mut self, checkpoint: &Path) -> Result<Supervision, PipelineError> {
        let root = self.cfg.unlabeled_corpus.clone();
        let corpus = self.corpus("unlabeled", &root)?;
        let (index, fkey) = (corpus.features.clone(), corpus.key.clone());
        let key = StageKey::new("tags")
            .field("features", &fkey)
            .field("checkpoint", file_digest(checkpoint)?)
            .field("classes", self.cfg.vocab.names().join(","))
            .field("threshold", self.cfg.tag_threshold);
        let (vocab, threshold) = (self.cfg.vocab.clone(), self.cfg.tag_threshold);
        let arch = self.cfg.arch;
        let rec = run_stage(&self.stages_root, &key, |dir| {
            let mut model = load_checkpoint(checkpoint, Some(arch))?;
            let tags = tag_clips(&mut model, &index, &vocab, threshold)?;
            write_text(&dir.join(TAGS_FILE), &format_weak_manifest(&tags))
        })?;
        let tags = self.record(rec).join(TAGS_FILE);
        self.nmf_supervision("unlabeled", root, &tags)
    }

    fn train(&mut self, sources: &[Supervision]) -> Result<PathBuf, PipelineError> {
        let t = self.cfg.train_config();
        let mut key = StageKey::new("train")
            .field("arch", self.cfg.arch)
            .field("classes", self.cfg.vocab.names().join(","))
            .field("epochs", t.epochs)
            .field("batch", t.batch_size)
            .field("lr", format!("{:e}", t.learning_rate))
            .field("beta1", t.beta1)
            .field("beta2", t.beta2)
            .field("eps", format!("{:e}", t.epsilon))
            .field("crop", t.crop_frames)
            .field("seed", t.seed);
        for s in sources {
            key = key.field("source", &s.key);
        }
        let (arch, vocab, seed) = (self.cfg.arch, &self.cfg.vocab, self.cfg.seed);
        let rec = run_stage(&self.stages_root, &key, |dir| {
            let mut examples = Vec::new();
            for s in sources {
                check_supervision(&s.events, &s.index, vocab)?;
                examples.extend(build_examples(&s.index, &s.ids, &s.events, vocab)?);
            }
            let mut model = Model::<f32>::build(arch, vocab.len(), seed);
            train(&mut model, &examples, &t, Some(dir))?;
            Ok(())
        })?;
        Ok(self.record(rec).join(CHECKPOINT_FILE))
    }

    /// Supervision sources for `combo`, bootstrapping a tagger if allowed.
    fn sources(&mut self, combo: Combination) -> Result<Vec<Supervision>, PipelineError> {
        let mut sources = Vec::new();
        if combo.uses_weak() {
            sources.push(self.weak_supervision()?);
        }
        if combo.uses_strong() {
            sources.push(self.strong_supervision()?);
        }
        if combo.uses_unlabeled() {
            let checkpoint = match (&self.cfg.tagging_checkpoint, self.cfg.bootstrap, combo.tagger()) {
                (Some(p), _, _) => p.clone(),
                (None, true, Some(tagger)) => {
                    let pre = self.sources(tagger)?;
                    self.train(&pre)?
                }
                _ => return Err(PipelineError::MissingCheckpoint(combo)),
            };
            sources.push(self.tagged_supervision(&checkpoint)?);
        }
        Ok(sources)
    }
}

/// Every event's class is in the vocabulary and its times lie in its clip.
fn check_supervision(events: &[StrongEvent], index: &FeatureIndex, vocab: &ClassVocabulary) -> Result<(), PipelineError> {
    let durations = index.durations();
    for e in events {
        if vocab.index_of(&e.class).is_none() {
            return Err(TrainError::UnknownClass {
                clip: e.clip_id.clone(),
                class: e.class.clone(),
            }
            .into());
        }
        let d = durations.get(&e.clip_id).copied().ok_or_else(|| PipelineError::MissingClip {
            clip: e.clip_id.clone(),
            corpus: index.dir.clone(),
        })?;
        // manifests carry 6 decimals
        if e.onset < 0.0 || e.offset > d + 1e-6 {
            return Err(PipelineError::Config(format!(
                "{}: event {:.3}-{:.3} s outside the {d:.3} s clip",
                e.clip_id, e.onset, e.offset
            )));
        }
    }
    Ok(())
}

/// Fails fast when a corpus or tagging checkpoint the combination needs is
/// not configured.
pub fn check_prerequisites(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let combo = cfg.combo;
    let mut needed: Vec<Combination> = vec![combo];
    if combo.uses_unlabeled() && cfg.tagging_checkpoint.is_none() {
        match (cfg.bootstrap, combo.tagger()) {
            (true, Some(t)) => needed.push(t),
            _ => return Err(PipelineError::MissingCheckpoint(combo)),
        }
    }
    let missing = |role: &'static str| PipelineError::MissingCorpus { combo, role };
    for c in needed {
        if c.uses_weak() && cfg.weak_corpus.is_none() {
            return Err(missing("weak"));
        }
        if c.uses_strong() && cfg.strong_corpus.is_none() {
            return Err(missing("strong"));
        }
        if c.uses_unlabeled() && cfg.unlabeled_corpus.is_none() {
            return Err(missing("unlabeled"));
        }
    }
    if cfg.eval_corpus.is_none() {
        return Err(missing("eval"));
    }
    Ok(())
}

/// Runs the configured combination end to end: supervision, training,
/// detection on the evaluation corpus and scoring. Writes `report.tsv`,
/// `manifest.tsv` and the resolved config under `cfg.out`.
pub fn run_combination(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    check_prerequisites(cfg)?;
    let stages_root = cfg.out.join("stages");
    fs::create_dir_all(&stages_root).map_err(io_err(&stages_root))?;
    let snapshot = cfg.out.join(CONFIG_SNAPSHOT);
    write_text(&snapshot, &cfg.to_text())?;

    let mut runner = Runner {
        cfg,
        stages_root,
        records: Vec::new(),
        corpora: BTreeMap::new(),
    };
    let sources = runner.sources(cfg.combo)?;
    let checkpoint = runner.train(&sources)?;

    let eval_root = cfg.eval_corpus.clone();
    let eval = runner.corpus("eval", &eval_root)?;
    let (eval_index, eval_key, eval_root) = (eval.features.clone(), eval.key.clone(), eval.root.clone());
    let d = &cfg.detection;
    let key = StageKey::new("detect")
        .field("features", &eval_key)
        .field("checkpoint", file_digest(&checkpoint)?)
        .field("classes", cfg.vocab.names().join(","))
        .field("threshold", d.threshold)
        .field("median", d.median_width)
        .field("min_event", d.min_event_seconds)
        .field("max_gap", d.max_gap_seconds);
    let rec = run_stage(&runner.stages_root, &key, |dir| {
        let mut model = load_checkpoint(&checkpoint, Some(cfg.arch))?;
        let preds = detect_clips(&mut model, &eval_index, &cfg.vocab, d)?;
        write_text(&dir.join(PREDICTIONS_FILE), &format_strong_manifest(&preds, Some(LabelSource::Model)))
    })?;
    let predictions = runner.record(rec).join(PREDICTIONS_FILE);

    let started = std::time::Instant::now();
    let refs_path = CorpusPaths::new(&eval_root).strong_manifest();
    let manifest_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Manifest { path, source }
    };
    let refs = load_strong_manifest(&refs_path, &cfg.vocab).map_err(manifest_err(&refs_path))?;
    let preds = load_strong_manifest(&predictions, &cfg.vocab).map_err(manifest_err(&predictions))?;
    let (event, segment) = score(&refs, &preds, &eval_index.durations(), cfg)?;
    let report = cfg.out.join(REPORT_FILE);
    write_text(
        &report,
        &format_report(&[ReportColumn {
            label: cfg.combo.to_string(),
            event_f1: event.f1,
            segment_f1: segment.f1,
        }]),
    )?;
    let mut stages = runner.records;
    stages.push(StageRecord {
        stage: "eval".into(),
        path: report.clone(),
        seconds: started.elapsed().as_secs_f64(),
        cached: false,
    });
    let manifest = RunManifest {
        combo: cfg.combo,
        config_snapshot: snapshot,
        stages,
        checkpoint,
        predictions,
        report,
        event,
        segment,
    };
    write_text(&cfg.out.join(MANIFEST_FILE), &manifest.to_tsv())?;
    Ok(manifest)
}
