//! Minibatch optimisation and the progressive stack-by-stack protocol.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::ForwardOptions;
use crate::data::{stream_frames, Frame, StreamKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::hierarchy::{ArchitectureConfig, Model, StreamOutput};
use crate::loss::{LossBreakdown, LossConfig};
use crate::memory;
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Sliding-window samples of one stream.
#[derive(Clone, Debug)]
pub struct StreamData {
    pub kind: StreamKind,
    pub window: usize,
    frames: Vec<Vec<Frame>>,
    /// `(video, first window frame)`.
    samples: Vec<(usize, usize)>,
}

impl StreamData {
    pub fn new(kind: StreamKind, window: usize, videos: &[&[Frame]]) -> Result<Self> {
        let mut frames = Vec::with_capacity(videos.len());
        let mut samples = Vec::new();
        for (vi, video) in videos.iter().enumerate() {
            let f = stream_frames(video, kind)?;
            if f.len() < window + 1 {
                return Err(Error::VideoTooShort {
                    frames: video.len(),
                    window,
                    needed: window + 1 + usize::from(kind == StreamKind::Motion),
                });
            }
            samples.extend((0..f.len() - window).map(|s| (vi, s)));
            frames.push(f);
        }
        if samples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        Ok(Self {
            kind,
            window,
            frames,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Windows `[B, K, H, W]` and targets `[B, 1, H, W]` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let first = &self.frames[0][0];
        let (h, w) = (first.height(), first.width());
        let hw = h * w;
        let k = self.window;
        let mut x = Vec::with_capacity(indices.len() * k * hw);
        let mut y = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            let (v, s) = self.samples[i];
            for f in &self.frames[v][s..s + k] {
                x.extend_from_slice(f.pixels());
            }
            y.extend_from_slice(self.frames[v][s + k].pixels());
        }
        let b = indices.len();
        (
            Tensor::from_vec(&[b, k, h, w], x).expect("window batch shape"),
            Tensor::from_vec(&[b, 1, h, w], y).expect("target batch shape"),
        )
    }
}

/// Per-stream training samples for a model configuration.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub streams: Vec<StreamData>,
}

impl TrainData {
    pub fn new(config: &ArchitectureConfig, videos: &[&[Frame]]) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Empty("training set"));
        }
        for v in videos {
            if let Some(f) = v
                .iter()
                .find(|f| f.height() != config.frame_height || f.width() != config.frame_width)
            {
                return Err(Error::ShapeMismatch {
                    context: "training frame",
                    expected: vec![config.frame_height, config.frame_width],
                    actual: vec![f.height(), f.width()],
                });
            }
        }
        let streams = config
            .streams
            .iter()
            .map(|s| StreamData::new(s.kind, s.window, videos))
            .collect::<Result<_>>()?;
        Ok(Self { streams })
    }
}

/// Scalar loss handle plus values of one stream on one batch.
pub struct StreamLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub output: StreamOutput,
}

/// Builds the composite loss of `stream` on one batch inside `g`.
pub fn stream_loss<'a>(
    model: &'a Model,
    g: &mut Graph<'a>,
    stream: usize,
    windows: Tensor,
    targets: Tensor,
    cfg: &LossConfig,
    trainable: &dyn Fn(usize) -> bool,
) -> Result<StreamLoss> {
    let batch = windows.dim(0);
    let x = g.input(windows);
    let y = g.input(targets);
    let opts = ForwardOptions {
        siamese: true,
        zero_skips: false,
    };
    let output = model.stream_forward(g, stream, x, trainable, opts)?;
    let diff = g.sub(output.prediction, y)?;
    let pred = g.row_norm_sum(diff);

    let banks: Vec<Var> = output.blocks.iter().map(|(_, b)| b.patterns).collect();
    let div = g.diversity(&banks, cfg.diversity_margin, cfg.diversity_mode)?;

    let sims: Vec<(Var, f64)> = output
        .blocks
        .iter()
        .filter_map(|(_, b)| b.similarity)
        .map(|s| (s, 1.0))
        .collect();
    let per_sample = g.weighted_sum(&sims)?;
    let sim_sum = g.sum(per_sample);
    let siam = g.scale(sim_sum, -1.0 / (batch * sims.len()) as f64);

    let total = g.weighted_sum(&[
        (pred, 1.0),
        (div, cfg.lambda_diversity),
        (siam, cfg.lambda_siamese),
    ])?;
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        prediction: g.value(pred).item(),
        diversity: g.value(div).item(),
        siamese: g.value(siam).item(),
    };
    Ok(StreamLoss {
        total,
        breakdown,
        output,
    })
}

/// Which stacks an optimisation run may change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StackSelection {
    /// Every unmasked stack.
    Active,
    Only(Vec<usize>),
}

impl StackSelection {
    fn contains(&self, stack: usize) -> bool {
        match self {
            Self::Active => true,
            Self::Only(s) => s.contains(&stack),
        }
    }
}

/// Per-epoch averages of the batch loss terms (summed over streams).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<LossBreakdown>,
}

/// One optimisation step's bookkeeping, returned to callers that need the raw gradients.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub gradients: Vec<(ParamId, Tensor)>,
    /// `(bank id, batch queries)` for trainable memory-enabled blocks.
    pub memory_writes: Vec<(ParamId, Tensor)>,
}

/// Loss, gradients and pending memory writes for one batch of one stream.
pub fn compute_step(
    model: &Model,
    stream: usize,
    windows: Tensor,
    targets: Tensor,
    cfg: &LossConfig,
    selection: &StackSelection,
) -> Result<StepResult> {
    let trainable = |s: usize| selection.contains(s);
    let mut g = Graph::new();
    let loss = stream_loss(model, &mut g, stream, windows, targets, cfg, &trainable)?;
    let mut memory_writes = Vec::new();
    for ((stack, bi), out) in &loss.output.blocks {
        let block = model.block(stream, *stack, *bi);
        if trainable(*stack) && block.config().memory_enabled {
            memory_writes.push((block.patterns_id(), g.value(out.queries).clone()));
        }
    }
    let gradients = if loss.breakdown.is_finite() {
        g.backward(loss.total)?.into_param_grads()
    } else {
        Vec::new()
    };
    Ok(StepResult {
        breakdown: loss.breakdown,
        gradients,
        memory_writes,
    })
}

fn diagnostics(model: &Model, stream: usize, b: &LossBreakdown) -> String {
    let store = model.store();
    let mut worst = (0.0f64, String::new());
    for id in store.ids() {
        let t = store.get(id);
        if !t.is_finite() {
            worst = (f64::NAN, store.name(id).into());
            break;
        }
        let m = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > worst.0 {
            worst = (m, store.name(id).into());
        }
    }
    format!(
        "stream {stream}: total={} prediction={} diversity={} siamese={}; largest parameter magnitude {} in {}",
        b.total, b.prediction, b.diversity, b.siamese, worst.0, worst.1
    )
}

/// Minibatch training of the selected stacks. `on_epoch(epoch, mean loss, model)`
/// runs after every epoch (checkpointing, logging).
pub fn train_with(
    model: &mut Model,
    data: &TrainData,
    cfg: &LossConfig,
    seed: u64,
    selection: &StackSelection,
    on_epoch: &mut dyn FnMut(usize, &LossBreakdown, &Model) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.streams.len() != model.config().streams.len() {
        return Err(Error::InvalidConfig(format!(
            "training data has {} streams, model has {}",
            data.streams.len(),
            model.config().streams.len()
        )));
    }
    let trainable_stacks: Vec<usize> = model
        .config()
        .active_stacks()
        .into_iter()
        .filter(|&s| selection.contains(s))
        .collect();
    if trainable_stacks.is_empty() {
        return Err(Error::InvalidConfig(
            "no unmasked stack selected for training".into(),
        ));
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = LossBreakdown::default();
        for (si, sd) in data.streams.iter().enumerate() {
            let mut order: Vec<usize> = (0..sd.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32) ^ ((si as u64) << 16));
            order.shuffle(&mut rng);
            let batches = order.chunks(cfg.batch_size).count();
            let mut stream_loss = LossBreakdown::default();
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let (x, y) = sd.batch(chunk);
                let step = compute_step(model, si, x, y, cfg, selection)?;
                if !step.breakdown.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        diagnostics: diagnostics(model, si, &step.breakdown),
                    });
                }
                adam.step(model.store_mut(), &step.gradients);
                for (id, queries) in step.memory_writes {
                    let block_kernel = kernel_of(model, si, id);
                    let patterns = model.store().get(id).clone();
                    let updated = memory::update(&patterns, &queries, block_kernel)?;
                    *model.store_mut().get_mut(id) = updated;
                }
                stream_loss.accumulate(&step.breakdown, 1.0 / batches as f64);
            }
            epoch_loss.accumulate(&stream_loss, 1.0);
        }
        log::info!(
            "epoch {epoch}: total={:.6} prediction={:.6} diversity={:.6} siamese={:.6}",
            epoch_loss.total,
            epoch_loss.prediction,
            epoch_loss.diversity,
            epoch_loss.siamese
        );
        report.epochs.push(epoch_loss);
        on_epoch(epoch, &epoch_loss, model)?;
    }
    Ok(report)
}

fn kernel_of(model: &Model, stream: usize, bank: ParamId) -> memory::AttentionKernel {
    model.streams()[stream]
        .stacks
        .iter()
        .flatten()
        .find(|b| b.patterns_id() == bank)
        .map(|b| b.config().kernel)
        .unwrap_or_default()
}

/// Trains every unmasked stack.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &LossConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_with(
        model,
        data,
        cfg,
        seed,
        &StackSelection::Active,
        &mut |_, _, _| Ok(()),
    )
}

/// One phase of progressive training: switch to `degree`'s activation set and
/// optimise only `train_stacks` on that degree's normal samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub degree: u32,
    pub train_stacks: Vec<usize>,
    /// Overrides the loss config's epoch count.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl Phase {
    pub fn new(degree: u32, train_stacks: Vec<usize>) -> Self {
        Self {
            degree,
            train_stacks,
            epochs: None,
            learning_rate: None,
        }
    }
}

/// Phases in degree order where each degree trains the stacks its activation
/// set adds over degree 1 (degree 1 trains its own set).
pub fn default_schedule(config: &ArchitectureConfig) -> Result<Vec<Phase>> {
    let mut degrees = config.available_degrees();
    degrees.sort_unstable();
    let base: Vec<usize> = match degrees.first() {
        Some(&d) => config.activation(d)?.to_vec(),
        None => {
            return Err(Error::InvalidConfig(
                "configuration defines no degrees".into(),
            ))
        }
    };
    degrees
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let act = config.activation(d)?;
            let train_stacks = if i == 0 {
                act.to_vec()
            } else {
                act.iter().copied().filter(|s| !base.contains(s)).collect()
            };
            Ok(Phase::new(d, train_stacks))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub report: TrainReport,
}

/// Runs `schedule` in order. Stacks outside a phase's `train_stacks` are
/// frozen: they run forward but get no gradient and no memory write.
/// The model is left at the tolerance of the last phase.
pub fn train_progressive(
    model: &mut Model,
    datasets: &BTreeMap<u32, TrainData>,
    schedule: &[Phase],
    cfg: &LossConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&Phase, usize, &LossBreakdown, &Model) -> Result<()>,
) -> Result<Vec<PhaseReport>> {
    for p in schedule {
        if !datasets.contains_key(&p.degree) {
            return Err(Error::UnknownDegree {
                degree: p.degree,
                available: datasets.keys().copied().collect(),
            });
        }
        let act = model.config().activation(p.degree)?;
        if let Some(s) = p.train_stacks.iter().find(|s| !act.contains(s)) {
            return Err(Error::InvalidConfig(format!(
                "phase for degree {} trains stack {s}, which that degree masks",
                p.degree
            )));
        }
    }
    let mut out = Vec::with_capacity(schedule.len());
    for (i, p) in schedule.iter().enumerate() {
        model.set_tolerance(p.degree)?;
        let phase_cfg = LossConfig {
            epochs: p.epochs.unwrap_or(cfg.epochs),
            learning_rate: p.learning_rate.unwrap_or(cfg.learning_rate),
            ..cfg.clone()
        };
        log::info!(
            "phase {i}: degree {} training stacks {:?}",
            p.degree,
            p.train_stacks
        );
        let report = train_with(
            model,
            &datasets[&p.degree],
            &phase_cfg,
            seed.wrapping_add(i as u64),
            &StackSelection::Only(p.train_stacks.clone()),
            &mut |e, l, m| on_epoch(p, e, l, m),
        )?;
        out.push(PhaseReport {
            phase: p.clone(),
            report,
        });
    }
    Ok(out)
}
