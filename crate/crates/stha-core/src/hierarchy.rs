//! Streams of stacks of blocks joined by double-nested residual connections.
//!
//! Inside a stream every active block reads the residual its predecessor left
//! (`x_{l+1} = x_l − x̂_l`) and contributes its prediction to the running
//! stream prediction. Masked stacks are bypassed: the residual flows around
//! them unchanged and they contribute nothing.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{Block, BlockConfig, BlockGeometry, BlockOutput, ForwardOptions, SizeClass};
use crate::data::StreamKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub blocks: Vec<BlockConfig>,
    #[serde(default)]
    pub masked: bool,
    /// Tolerance degree whose normality the stack stores.
    pub degree: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kind: StreamKind,
    /// Frames per input window (`K` or `K̃`).
    pub window: usize,
    pub stacks: Vec<StackConfig>,
    pub fusion_weight: f64,
}

/// Stacks (0-based indices) that a tolerance degree switches on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeActivation {
    pub degree: u32,
    pub stacks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub version: u32,
    pub frame_height: usize,
    pub frame_width: usize,
    pub streams: Vec<StreamConfig>,
    pub degrees: Vec<DegreeActivation>,
}

/// Table of named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// One stack of two Block-s (100 patterns).
    Ped2,
    /// One stack of one Block-s and two Block-m (150 patterns).
    Avenue,
    /// One stack of one Block-m and two Block-l (250 patterns).
    ShanghaiTech,
    /// The Ped2 stack followed by one Block-s stack per extra tolerance degree.
    Toy,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Ped2,
        Preset::Avenue,
        Preset::ShanghaiTech,
        Preset::Toy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ped2 => "ped2",
            Self::Avenue => "avenue",
            Self::ShanghaiTech => "shanghaitech",
            Self::Toy => "toy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn stacks(self) -> Vec<StackConfig> {
        use SizeClass::*;
        let stack = |classes: &[SizeClass], degree: u32| StackConfig {
            blocks: classes.iter().map(|&c| BlockConfig::new(c)).collect(),
            masked: false,
            degree,
        };
        match self {
            Self::Ped2 => vec![stack(&[Small, Small], 1)],
            Self::Avenue => vec![stack(&[Small, Medium, Medium], 1)],
            Self::ShanghaiTech => vec![stack(&[Medium, Large, Large], 1)],
            Self::Toy => vec![
                stack(&[Small, Small], 1),
                stack(&[Small], 2),
                stack(&[Small], 3),
            ],
        }
    }

    fn degrees(self) -> Vec<DegreeActivation> {
        match self {
            Self::Toy => vec![
                DegreeActivation {
                    degree: 1,
                    stacks: vec![0],
                },
                DegreeActivation {
                    degree: 2,
                    stacks: vec![0, 1],
                },
                DegreeActivation {
                    degree: 3,
                    stacks: vec![0, 2],
                },
            ],
            _ => vec![DegreeActivation {
                degree: 1,
                stacks: vec![0],
            }],
        }
    }
}

impl ArchitectureConfig {
    /// A two-stream preset with `K = K̃ = window` on `height × width` frames.
    pub fn preset(preset: Preset, height: usize, width: usize, window: usize) -> Self {
        let stream = |kind| StreamConfig {
            kind,
            window,
            stacks: preset.stacks(),
            fusion_weight: 0.5,
        };
        let mut cfg = Self {
            version: CONFIG_VERSION,
            frame_height: height,
            frame_width: width,
            streams: vec![stream(StreamKind::Appearance), stream(StreamKind::Motion)],
            degrees: preset.degrees(),
        };
        if preset == Preset::Toy {
            cfg = cfg.set_tolerance(1).expect("toy preset defines degree 1");
        }
        cfg
    }

    /// Applies `f` to every block configuration.
    pub fn map_blocks(mut self, f: impl Fn(&mut BlockConfig)) -> Self {
        for s in &mut self.streams {
            for st in &mut s.stacks {
                st.blocks.iter_mut().for_each(&f);
            }
        }
        self
    }

    pub fn stack_count(&self) -> usize {
        self.streams.first().map_or(0, |s| s.stacks.len())
    }

    pub fn total_patterns(&self, stream: usize) -> usize {
        self.streams[stream]
            .stacks
            .iter()
            .flat_map(|s| &s.blocks)
            .map(|b| b.pattern_count)
            .sum()
    }

    pub fn available_degrees(&self) -> Vec<u32> {
        self.degrees.iter().map(|d| d.degree).collect()
    }

    /// Stacks switched on by `degree`.
    pub fn activation(&self, degree: u32) -> Result<&[usize]> {
        self.degrees
            .iter()
            .find(|d| d.degree == degree)
            .map(|d| d.stacks.as_slice())
            .ok_or_else(|| Error::UnknownDegree {
                degree,
                available: self.available_degrees(),
            })
    }

    /// Stacks currently unmasked (taken from the first stream).
    pub fn active_stacks(&self) -> Vec<usize> {
        self.streams
            .first()
            .map(|s| {
                (0..s.stacks.len())
                    .filter(|&i| !s.stacks[i].masked)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// A copy with exactly the stacks of `degree`'s activation set unmasked.
    pub fn set_tolerance(&self, degree: u32) -> Result<Self> {
        let active: BTreeSet<usize> = self.activation(degree)?.iter().copied().collect();
        let mut out = self.clone();
        for s in &mut out.streams {
            for (i, st) in s.stacks.iter_mut().enumerate() {
                st.masked = !active.contains(&i);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.streams.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one stream is required".into(),
            ));
        }
        let stacks = self.stack_count();
        let weight_sum: f64 = self.streams.iter().map(|s| s.fusion_weight).sum();
        if self.streams.iter().any(|s| s.fusion_weight < 0.0) || (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "fusion weights must be nonnegative and sum to 1".into(),
            ));
        }
        for (i, s) in self.streams.iter().enumerate() {
            if s.window == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stream {i} has a zero window"
                )));
            }
            if s.stacks.len() != stacks {
                return Err(Error::InvalidConfig(
                    "all streams need the same number of stacks".into(),
                ));
            }
            if s.stacks.iter().any(|st| st.blocks.is_empty()) {
                return Err(Error::InvalidConfig(format!(
                    "stream {i} has an empty stack"
                )));
            }
            if s.stacks.iter().all(|st| st.masked) {
                return Err(Error::AllStacksMasked { stream: i });
            }
            for st in &s.stacks {
                for b in &st.blocks {
                    b.validate(self.frame_height, self.frame_width)?;
                }
            }
        }
        for d in &self.degrees {
            if let Some(&bad) = d.stacks.iter().find(|&&s| s >= stacks) {
                return Err(Error::InvalidConfig(format!(
                    "degree {} activates stack {bad} but only {stacks} exist",
                    d.degree
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub kind: StreamKind,
    pub stacks: Vec<Vec<Block>>,
}

/// Parameters and structure of a whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    config: ArchitectureConfig,
    store: ParamStore,
    streams: Vec<StreamParams>,
}

/// Graph handles of one stream forward pass.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    /// Sum of all active block predictions, accumulated in block order.
    pub prediction: Var,
    /// `(stack index, stack prediction)` for every active stack.
    pub stack_predictions: Vec<(usize, Var)>,
    /// `((stack, block), output)` in execution order.
    pub blocks: Vec<((usize, usize), BlockOutput)>,
    /// Inputs each active block received, in execution order.
    pub block_inputs: Vec<Var>,
    pub final_residual: Var,
}

impl Model {
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut streams = Vec::new();
        for (si, s) in config.streams.iter().enumerate() {
            let geometry = BlockGeometry {
                window: s.window,
                height: config.frame_height,
                width: config.frame_width,
            };
            let mut stacks = Vec::new();
            for (ti, st) in s.stacks.iter().enumerate() {
                let mut blocks = Vec::new();
                for (bi, b) in st.blocks.iter().enumerate() {
                    let prefix = format!("s{si}.t{ti}.b{bi}");
                    blocks.push(Block::new(
                        b.clone(),
                        geometry,
                        &mut store,
                        &prefix,
                        &mut rng,
                    )?);
                }
                stacks.push(blocks);
            }
            streams.push(StreamParams {
                kind: s.kind,
                stacks,
            });
        }
        Ok(Self {
            config,
            store,
            streams,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    /// Replaces the mask state; the block structure must be unchanged.
    pub fn set_config(&mut self, config: ArchitectureConfig) -> Result<()> {
        config.validate()?;
        let same_shape = config.streams.len() == self.config.streams.len()
            && config
                .streams
                .iter()
                .zip(&self.config.streams)
                .all(|(a, b)| {
                    a.kind == b.kind
                        && a.window == b.window
                        && a.stacks.len() == b.stacks.len()
                        && a.stacks
                            .iter()
                            .zip(&b.stacks)
                            .all(|(x, y)| x.blocks == y.blocks)
                });
        if !same_shape {
            return Err(Error::InvalidConfig(
                "new configuration changes the block structure".into(),
            ));
        }
        self.config = config;
        Ok(())
    }

    pub fn set_tolerance(&mut self, degree: u32) -> Result<()> {
        let cfg = self.config.set_tolerance(degree)?;
        self.set_config(cfg)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn streams(&self) -> &[StreamParams] {
        &self.streams
    }

    pub fn block(&self, stream: usize, stack: usize, block: usize) -> &Block {
        &self.streams[stream].stacks[stack][block]
    }

    /// Every parameter id belonging to `stack` of any stream.
    pub fn stack_param_ids(&self, stack: usize) -> Vec<ParamId> {
        self.streams
            .iter()
            .flat_map(|s| s.stacks[stack].iter().flat_map(Block::param_ids))
            .collect()
    }

    pub fn is_active(&self, stream: usize, stack: usize) -> bool {
        !self.config.streams[stream].stacks[stack].masked
    }

    /// Runs stream `stream` on `x`. `trainable(stack)` decides which stacks
    /// receive gradients.
    pub fn stream_forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        stream: usize,
        x: Var,
        trainable: &dyn Fn(usize) -> bool,
        opts: ForwardOptions,
    ) -> Result<StreamOutput> {
        let cfg = &self.config.streams[stream];
        if cfg.stacks.iter().all(|s| s.masked) {
            return Err(Error::AllStacksMasked { stream });
        }
        let mut residual = x;
        let mut prediction: Option<Var> = None;
        let mut stack_predictions = Vec::new();
        let mut blocks = Vec::new();
        let mut block_inputs = Vec::new();
        for (ti, stack) in self.streams[stream].stacks.iter().enumerate() {
            if cfg.stacks[ti].masked {
                continue;
            }
            let train = trainable(ti);
            let mut stack_pred: Option<Var> = None;
            for (bi, block) in stack.iter().enumerate() {
                let out = block.forward(g, &self.store, residual, train, opts)?;
                block_inputs.push(residual);
                residual = g.sub(residual, out.reconstruction)?;
                stack_pred = Some(match stack_pred {
                    None => out.prediction,
                    Some(acc) => g.add(acc, out.prediction)?,
                });
                prediction = Some(match prediction {
                    None => out.prediction,
                    Some(acc) => g.add(acc, out.prediction)?,
                });
                blocks.push(((ti, bi), out));
            }
            if let Some(p) = stack_pred {
                stack_predictions.push((ti, p));
            }
        }
        Ok(StreamOutput {
            prediction: prediction.ok_or(Error::AllStacksMasked { stream })?,
            stack_predictions,
            blocks,
            block_inputs,
            final_residual: residual,
        })
    }

    /// Stream predictions for a batch of windows `[B, K, H, W]`, without gradients.
    pub fn predict(&self, stream: usize, windows: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(windows);
        let out = self.stream_forward(&mut g, stream, x, &|_| false, ForwardOptions::default())?;
        Ok(g.value(out.prediction).clone())
    }
}

/// Convex combination of per-stream normalised anomaly scores.
pub fn fuse_streams(
    appearance: &[f64],
    motion: &[f64],
    appearance_weight: f64,
) -> Result<Vec<f64>> {
    if appearance.len() != motion.len() {
        return Err(Error::MisalignedSeries {
            left: appearance.len(),
            right: motion.len(),
        });
    }
    if !(0.0..=1.0).contains(&appearance_weight) {
        return Err(Error::InvalidConfig(format!(
            "fusion weight {appearance_weight} outside [0, 1]"
        )));
    }
    let wm = 1.0 - appearance_weight;
    Ok(appearance
        .iter()
        .zip(motion)
        .map(|(a, m)| appearance_weight * a + wm * m)
        .collect())
}
