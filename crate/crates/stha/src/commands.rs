//! The `gen-data`, `train`, `eval` and `score` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use stha_core::data::generate_synthetic;
use stha_core::evaluate::{auc_of, score_video, VideoScores};
use stha_core::hierarchy::Model;
use stha_core::loss::LossBreakdown;
use stha_core::scoring::frame_auc;
use stha_core::train::{
    train_progressive, train_with, Phase, PhaseReport, StackSelection, TrainData, TrainReport,
};

use crate::checkpoint::Checkpoint;
use crate::config::{config_hash, load_generator, load_run, RunConfig};
use crate::dataset::{
    create_dir, read_dataset, read_video, write_json, write_synthetic, DatasetMeta, Video,
};
use crate::error::{CliError, Result};
use crate::plot::{render_scores, write_png};
use crate::report::{write_scores, DegreeSummary, MetricsWriter, Summary, VideoSummary};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PERIODIC_CHECKPOINT_FILE: &str = "checkpoint.last.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(
    name = "stha",
    version,
    about = "Hierarchical memory-augmented video anomaly detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    GenData(GenDataArgs),
    /// Train a model, optionally through progressive tolerance phases.
    Train(TrainArgs),
    /// Score every test video and report frame-level AUC.
    Eval(EvalArgs),
    /// Score a single video directory.
    Score(ScoreArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Generator config (JSON); the bundled default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run config file or bundled config name (ped2, toy, desk-toy, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture preset; overrides the config's.
    #[arg(long)]
    pub preset: Option<String>,
    /// Progressive phases to run, in order, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub degrees: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tolerance degree; every degree of the checkpoint when omitted.
    #[arg(long)]
    pub tolerance: Option<u32>,
    /// Run config supplying the peak mode and batch size.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Video directory holding `meta.json` and numbered frames.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tolerance: Option<u32>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<serde_json::Value> {
    let value = match cli.command {
        Command::GenData(a) => serde_json::to_value(gen_data(&a)?),
        Command::Train(a) => serde_json::to_value(train(&a, &mut |_, _| Ok(()))?),
        Command::Eval(a) => serde_json::to_value(eval(&a)?),
        Command::Score(a) => serde_json::to_value(score(&a)?),
    };
    Ok(value.expect("command output serializes"))
}

pub fn gen_data(args: &GenDataArgs) -> Result<DatasetMeta> {
    let cfg = load_generator(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let ds = generate_synthetic(&cfg, seed)?;
    write_synthetic(&args.out, &ds)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config_hash: String,
    pub phases: Vec<PhaseReport>,
}

fn train_data(model: &Model, videos: &[&Video], degree: u32) -> Result<TrainData> {
    if videos.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset has no training videos for degree {degree}"
        )));
    }
    let refs: Vec<&[_]> = videos.iter().map(|v| v.frames.as_slice()).collect();
    Ok(TrainData::new(model.config(), &refs)?)
}

/// Runs `train`. `interrupt(phase, epoch)` is consulted after each epoch's
/// bookkeeping; an error from it stops training.
pub fn train(
    args: &TrainArgs,
    interrupt: &mut dyn FnMut(usize, usize) -> Result<()>,
) -> Result<TrainOutcome> {
    let cfg = load_run(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let ds = read_dataset(&args.data)?;
    let arch = cfg.architecture(args.preset.as_deref(), ds.meta.height, ds.meta.width)?;
    let schedule = cfg.schedule(&arch, args.degrees.as_deref())?;
    let hash = config_hash(&arch);
    let mut model = Model::new(arch, seed)?;
    create_dir(&args.out)?;
    let metrics_path = args.out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let periodic = args.out.join(PERIODIC_CHECKPOINT_FILE);

    let phases = match &schedule {
        Some(s) => s.clone(),
        None => {
            let mut degrees = model.config().available_degrees();
            degrees.sort_unstable();
            let d = degrees[0];
            vec![Phase::new(d, model.config().activation(d)?.to_vec())]
        }
    };
    let mut datasets = BTreeMap::new();
    for p in &phases {
        if let std::collections::btree_map::Entry::Vacant(e) = datasets.entry(p.degree) {
            e.insert(train_data(&model, &ds.train_split(p.degree), p.degree)?);
        }
    }

    let mut done: Vec<PhaseReport> = Vec::new();
    let mut current: Vec<LossBreakdown> = Vec::new();
    let mut phase_index = 0usize;
    let mut failure: Option<CliError> = None;
    let mut on_epoch =
        |p: &Phase, epoch: usize, l: &LossBreakdown, m: &Model| -> stha_core::Result<()> {
            let mut step = || -> Result<()> {
                if epoch == 0 && !current.is_empty() {
                    done.push(PhaseReport {
                        phase: phases[phase_index].clone(),
                        report: TrainReport {
                            epochs: std::mem::take(&mut current),
                        },
                    });
                    phase_index += 1;
                }
                current.push(*l);
                log::info!("degree {} epoch {epoch}: {:.4}", p.degree, l.total);
                metrics.row(phase_index, p.degree, epoch, l)?;
                if cfg.checkpoint_every > 0 && (epoch + 1).is_multiple_of(cfg.checkpoint_every) {
                    let mut history = done.clone();
                    history.push(PhaseReport {
                        phase: phases[phase_index].clone(),
                        report: TrainReport {
                            epochs: current.clone(),
                        },
                    });
                    Checkpoint {
                        model: m.clone(),
                        seed,
                        history,
                    }
                    .save(&periodic)?;
                }
                interrupt(phase_index, epoch)
            };
            step().map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                stha_core::Error::InvalidConfig(msg)
            })
        };

    let result = match &schedule {
        Some(s) => train_progressive(&mut model, &datasets, s, &cfg.loss, seed, &mut on_epoch),
        None => {
            let p = &phases[0];
            model.set_tolerance(p.degree)?;
            train_with(
                &mut model,
                &datasets[&p.degree],
                &cfg.loss,
                seed,
                &StackSelection::Active,
                &mut |e, l, m| on_epoch(p, e, l, m),
            )
            .map(|report| {
                vec![PhaseReport {
                    phase: p.clone(),
                    report,
                }]
            })
        }
    };
    let history = match result {
        Ok(h) => h,
        Err(e) => return Err(failure.take().unwrap_or(CliError::Core(e))),
    };
    let path = args.out.join(CHECKPOINT_FILE);
    Checkpoint {
        model,
        seed,
        history: history.clone(),
    }
    .save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        metrics: metrics_path,
        config_hash: hash,
        phases: history,
    })
}

fn eval_settings(path: Option<&Path>) -> Result<RunConfig> {
    load_run(path)
}

fn degrees_to_run(model: &Model, tolerance: Option<u32>) -> Result<Vec<u32>> {
    let mut available = model.config().available_degrees();
    available.sort_unstable();
    match tolerance {
        Some(d) if available.contains(&d) => Ok(vec![d]),
        Some(d) => Err(stha_core::Error::UnknownDegree {
            degree: d,
            available,
        }
        .into()),
        None => Ok(available),
    }
}

fn active_stacks(model: &Model) -> Vec<Vec<usize>> {
    (0..model.config().streams.len())
        .map(|s| {
            (0..model.config().streams[s].stacks.len())
                .filter(|&t| model.is_active(s, t))
                .collect()
        })
        .collect()
}

fn write_video_outputs(dir: &Path, v: &VideoScores) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join("scores").join(format!("{}.csv", v.video_id));
    let png = dir.join("plots").join(format!("{}.png", v.video_id));
    write_scores(&csv, v)?;
    let streams: Vec<&[f64]> = v.streams.iter().map(|s| s.anomaly.as_slice()).collect();
    write_png(
        &png,
        &render_scores(&v.frames, &v.fused, &streams, &v.labels),
    )?;
    Ok((csv, png))
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

pub fn eval(args: &EvalArgs) -> Result<Summary> {
    let settings = eval_settings(args.config.as_deref())?;
    let mut ck = Checkpoint::load(&args.checkpoint)?;
    let hash = config_hash(ck.model.config());
    let degrees = degrees_to_run(&ck.model, args.tolerance)?;
    let ds = read_dataset(&args.data)?;
    if ds.test.is_empty() {
        return Err(CliError::Usage("dataset has no test videos".into()));
    }
    let mut evaluations = Vec::new();
    for d in degrees {
        ck.model.set_tolerance(d)?;
        let model = &ck.model;
        let scored: Vec<VideoScores> = ds
            .test
            .par_iter()
            .map(|v| {
                let labels = v.labels(d)?.ok_or_else(|| {
                    CliError::Usage(format!("test video {} has no labels", v.meta.id))
                })?;
                Ok(score_video(
                    model,
                    &v.meta.id,
                    &v.frames,
                    Some(&labels),
                    settings.peak_mode,
                    settings.eval_batch,
                )?)
            })
            .collect::<Result<_>>()?;
        let dir = args.out.join(format!("degree-{d}"));
        create_dir(&dir.join("scores"))?;
        create_dir(&dir.join("plots"))?;
        let mut videos = Vec::new();
        for v in &scored {
            let (csv, png) = write_video_outputs(&dir, v)?;
            videos.push(VideoSummary {
                id: v.video_id.clone(),
                frames: v.frames.len(),
                anomalous_frames: v.labels.iter().filter(|&&l| l).count(),
                scores: relative(&args.out, &csv),
                plot: relative(&args.out, &png),
            });
        }
        let (auc, stream_auc) = match auc_of(scored) {
            Ok(e) => (Some(e.auc), Some(e.stream_auc)),
            Err(stha_core::Error::SingleClassLabels { .. }) => (None, None),
            Err(e) => return Err(e.into()),
        };
        evaluations.push(DegreeSummary {
            degree: d,
            active_stacks: active_stacks(model),
            auc,
            stream_auc,
            videos,
        });
    }
    let mut available = ck.model.config().available_degrees();
    available.sort_unstable();
    let summary = Summary {
        checkpoint: args.checkpoint.display().to_string(),
        config_hash: hash,
        peak_mode: settings.peak_mode,
        available_degrees: available,
        evaluations,
    };
    write_json(&args.out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreOutcome {
    pub video: String,
    pub degree: u32,
    pub active_stacks: Vec<Vec<usize>>,
    pub frames: usize,
    pub mean_anomaly: f64,
    pub auc: Option<f64>,
    pub scores: PathBuf,
    pub plot: PathBuf,
}

pub fn score(args: &ScoreArgs) -> Result<ScoreOutcome> {
    let settings = eval_settings(args.config.as_deref())?;
    let mut ck = Checkpoint::load(&args.checkpoint)?;
    let degree = match args.tolerance {
        Some(d) => degrees_to_run(&ck.model, Some(d))?[0],
        None => degrees_to_run(&ck.model, None)?[0],
    };
    ck.model.set_tolerance(degree)?;
    let video = read_video(&args.data)?;
    let labels = video.labels(degree)?;
    let scored = score_video(
        &ck.model,
        &video.meta.id,
        &video.frames,
        labels.as_deref(),
        settings.peak_mode,
        settings.eval_batch,
    )?;
    create_dir(&args.out.join("scores"))?;
    create_dir(&args.out.join("plots"))?;
    let (csv, png) = write_video_outputs(&args.out, &scored)?;
    let auc = if labels.is_some() {
        frame_auc(&scored.fused, &scored.labels).ok()
    } else {
        None
    };
    Ok(ScoreOutcome {
        video: scored.video_id.clone(),
        degree,
        active_stacks: active_stacks(&ck.model),
        frames: scored.frames.len(),
        mean_anomaly: scored.fused.iter().sum::<f64>() / scored.fused.len() as f64,
        auc,
        scores: csv,
        plot: png,
    })
}
