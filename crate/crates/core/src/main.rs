use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nmfcnn::evaluation::{durations_from_events, format_report, ReportColumn};
use nmfcnn::ingest::{
    format_strong_manifest, format_weak_manifest, generate_synth_corpus, load_strong_manifest, load_weak_manifest,
    LabelSource, SynthCorpusConfig,
};
use nmfcnn::nn::{load_checkpoint, Model};
use nmfcnn::pipeline::{
    build_examples, detect_clips, list_audio, load_audio, nmf_label_clips, run_combination, score, tag_clips,
    Combination, FeatureIndex, PipelineConfig,
};
use nmfcnn::trainer::train;

#[derive(Parser)]
#[command(name = "nmfcnn", version, about = "Weakly supervised sound event detection with NMF pseudo-labels")]
struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides run.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, repeatable: --set train.epochs=5
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (audio/, strong.tsv, weak.tsv) under --out.
    Synth {
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 20.0)]
        snr: f64,
        #[arg(long, default_value = "synth")]
        prefix: String,
        /// Shortest event in seconds (capped at the clip length).
        #[arg(long, default_value_t = 0.5)]
        event_min: f64,
        /// Longest event in seconds (capped at the clip length).
        #[arg(long, default_value_t = 3.0)]
        event_max: f64,
    },
    /// Extract mel and log-mel features of every WAV file into --out.
    Features {
        #[arg(long)]
        audio: PathBuf,
    },
    /// Approximate strong labels from weak labels; writes labels.tsv.
    NmfLabel {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        weak: PathBuf,
    },
    /// Train a model on strong labels; writes model.nmfc, train.log, loss.tsv.
    Train {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also train on clips without any labeled event (as negatives).
        #[arg(long)]
        all_clips: bool,
    },
    /// Tag clips with a trained model; writes tags.tsv.
    Tag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
    },
    /// Detect events with a trained model; writes predictions.tsv.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
    },
    /// Score predictions against references and print the report.
    Eval {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Audio directory giving clip durations (default: latest event offset per clip).
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Run one training-data combination end to end.
    Run {
        #[arg(long)]
        combo: Option<Combination>,
        /// Train the tagging model first when C4-C7 have no checkpoint.
        #[arg(long)]
        bootstrap: bool,
        #[arg(long)]
        tagging_checkpoint: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set {o:?}: expected KEY=VALUE"))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
    }
    fs::write(path, text).with_context(|| path.display().to_string())
}

fn features_in(out: &Path, audio: &Path, cfg: &PipelineConfig) -> Result<FeatureIndex> {
    Ok(FeatureIndex::build(audio, &out.join("features"), cfg.log_floor)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    cfg.validate()?;
    let out = cfg.out.clone();
    match cli.command {
        Command::Synth {
            clips,
            seconds,
            snr,
            prefix,
            event_min,
            event_max,
        } => {
            let synth = SynthCorpusConfig {
                n_clips: clips,
                clip_seconds: seconds,
                event_seconds: (event_min.min(seconds), event_max.min(seconds)),
                snr_db: snr,
                seed: cfg.seed,
                prefix,
                ..Default::default()
            };
            generate_synth_corpus(&synth, &out)?;
            println!("wrote {clips} clips to {}", out.display());
        }
        Command::Features { audio } => {
            let index = FeatureIndex::build(&audio, &out, cfg.log_floor)?;
            println!("extracted {} clips into {}", index.clips.len(), out.display());
        }
        Command::NmfLabel { audio, weak } => {
            let labels = load_weak_manifest(&weak, &cfg.vocab).with_context(|| weak.display().to_string())?;
            let index = features_in(&out, &audio, &cfg)?;
            let events = nmf_label_clips(&index, &labels, &cfg.labeling_options())?;
            let path = out.join("labels.tsv");
            write(&path, &format_strong_manifest(&events, Some(LabelSource::Nmf)))?;
            println!("{} events for {} clips -> {}", events.len(), labels.len(), path.display());
        }
        Command::Train {
            audio,
            labels,
            all_clips,
        } => {
            let events = load_strong_manifest(&labels, &cfg.vocab).with_context(|| labels.display().to_string())?;
            let index = features_in(&out, &audio, &cfg)?;
            let ids: Vec<String> = if all_clips {
                index.clips.iter().map(|(id, _)| id.clone()).collect()
            } else {
                let mut ids: Vec<String> = events.iter().map(|e| e.clip_id.clone()).collect();
                ids.sort();
                ids.dedup();
                ids
            };
            let examples = build_examples(&index, &ids, &events, &cfg.vocab)?;
            let mut model = Model::<f32>::build(cfg.arch, cfg.vocab.len(), cfg.seed);
            let report = train(&mut model, &examples, &cfg.train_config(), Some(&out))?;
            print!("{}", report.to_log());
        }
        Command::Tag { checkpoint, audio } => {
            let mut model = load_checkpoint(&checkpoint, Some(cfg.arch))?;
            let index = features_in(&out, &audio, &cfg)?;
            let tags = tag_clips(&mut model, &index, &cfg.vocab, cfg.tag_threshold)?;
            let path = out.join("tags.tsv");
            write(&path, &format_weak_manifest(&tags))?;
            println!("{} of {} clips tagged -> {}", tags.len(), index.clips.len(), path.display());
        }
        Command::Detect { checkpoint, audio } => {
            let mut model = load_checkpoint(&checkpoint, Some(cfg.arch))?;
            let index = features_in(&out, &audio, &cfg)?;
            let events = detect_clips(&mut model, &index, &cfg.vocab, &cfg.detection)?;
            let path = out.join("predictions.tsv");
            write(&path, &format_strong_manifest(&events, Some(LabelSource::Model)))?;
            println!("{} events -> {}", events.len(), path.display());
        }
        Command::Eval {
            refs,
            preds,
            audio,
            label,
        } => {
            let r = load_strong_manifest(&refs, &cfg.vocab).with_context(|| refs.display().to_string())?;
            let p = load_strong_manifest(&preds, &cfg.vocab).with_context(|| preds.display().to_string())?;
            let durations = match audio {
                Some(dir) => list_audio(&dir)?
                    .iter()
                    .map(|f| load_audio(f).map(|c| (c.id.clone(), c.duration_seconds())))
                    .collect::<Result<_, _>>()?,
                None => durations_from_events(r.iter().chain(&p)),
            };
            let (event, segment) = score(&r, &p, &durations, &cfg)?;
            let report = format_report(&[ReportColumn {
                label,
                event_f1: event.f1,
                segment_f1: segment.f1,
            }]);
            print!("{report}");
            if cli.out.is_some() {
                write(&out.join("report.tsv"), &report)?;
            }
        }
        Command::Run {
            combo,
            bootstrap,
            tagging_checkpoint,
        } => {
            if let Some(c) = combo {
                cfg.combo = c;
            }
            cfg.bootstrap |= bootstrap;
            if tagging_checkpoint.is_some() {
                cfg.tagging_checkpoint = tagging_checkpoint;
            }
            if cfg.out.as_os_str().is_empty() {
                bail!("no output directory");
            }
            let m = run_combination(&cfg)?;
            print!("{}", fs::read_to_string(&m.report).with_context(|| m.report.display().to_string())?);
            eprintln!("manifest: {}", cfg.out.join(nmfcnn::pipeline::MANIFEST_FILE).display());
        }
    }
    Ok(())
}

/// The error chain on one line, skipping causes the outer messages already
/// spell out.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
