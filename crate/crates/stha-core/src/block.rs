//! One hierarchy block: a convolutional encoder producing queries, the
//! pattern-memory read, a predicting decoder fed with the fused queries plus
//! encoder skips, a reconstructing decoder fed with the reconstructed queries
//! alone, and a shared-weight siamese embedding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{cosine, Graph, ParamId, ParamStore, Var};
use crate::memory::{AttentionKernel, PatternBank};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    #[serde(rename = "block-s")]
    Small,
    #[serde(rename = "block-m")]
    Medium,
    #[serde(rename = "block-l")]
    Large,
}

impl SizeClass {
    pub fn hidden_layers(self) -> usize {
        match self {
            Self::Small => 6,
            Self::Medium => 12,
            Self::Large => 18,
        }
    }

    pub fn pattern_count(self) -> usize {
        match self {
            Self::Small => 50,
            Self::Medium => 50,
            Self::Large => 100,
        }
    }
}

fn default_levels() -> usize {
    3
}
fn default_width() -> usize {
    32
}
fn default_embedding() -> usize {
    128
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub size_class: SizeClass,
    /// Encoder plus one decoder, split evenly.
    pub hidden_layers: usize,
    pub pattern_count: usize,
    /// Channels of the first encoder scale; doubled at every further scale.
    #[serde(default = "default_width")]
    pub base_width: usize,
    /// Number of stride-2 scales.
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_embedding")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub kernel: AttentionKernel,
    /// Without memory the reconstructed queries are the queries themselves.
    #[serde(default = "default_true")]
    pub memory_enabled: bool,
}

impl BlockConfig {
    pub fn new(size_class: SizeClass) -> Self {
        Self {
            size_class,
            hidden_layers: size_class.hidden_layers(),
            pattern_count: size_class.pattern_count(),
            base_width: default_width(),
            levels: default_levels(),
            embedding_dim: default_embedding(),
            kernel: AttentionKernel::default(),
            memory_enabled: true,
        }
    }

    pub fn with_base_width(mut self, width: usize) -> Self {
        self.base_width = width;
        self
    }

    /// Layers per scale in the encoder and in each decoder.
    pub fn layers_per_level(&self) -> Result<usize> {
        let half = self.hidden_layers / 2;
        if !self.hidden_layers.is_multiple_of(2)
            || self.levels == 0
            || !half.is_multiple_of(self.levels)
            || half == 0
        {
            return Err(Error::InvalidConfig(format!(
                "{} hidden layers cannot be split evenly over an encoder and decoder with {} scales",
                self.hidden_layers, self.levels
            )));
        }
        Ok(half / self.levels)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channel dimension `C` of queries and patterns.
    pub fn query_dim(&self) -> usize {
        self.width(self.levels - 1)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.layers_per_level()?;
        if self.pattern_count == 0 {
            return Err(Error::EmptyBank);
        }
        if self.base_width == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("block widths must be positive".into()));
        }
        let f = 1 << self.levels;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::InvalidConfig(format!(
                "frame {height}×{width} is not divisible by 2^{} for {} scales",
                self.levels, self.levels
            )));
        }
        Ok(())
    }
}

/// Input geometry of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub window: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum LayerKind {
    /// 3×3 convolution with the given stride.
    Conv { stride: usize },
    /// 2×2 stride-2 transposed convolution.
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    kind: LayerKind,
    w: ParamId,
    b: ParamId,
    act: Activation,
    /// Encoder skip to concatenate after this layer (predicting decoder only).
    skip: Option<usize>,
    /// Encoder scale whose output this layer completes.
    emits_skip: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Parameter handles of one block inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    config: BlockConfig,
    geometry: BlockGeometry,
    encoder: Vec<Layer>,
    predictor: Vec<Layer>,
    reconstructor: Vec<Layer>,
    siamese: [Dense; 2],
    patterns: ParamId,
}

/// Per-forward switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Compute siamese similarities (only needed for the training loss).
    pub siamese: bool,
    /// Replace every skip tensor by zeros.
    pub zero_skips: bool,
}

/// Graph handles produced by one block forward pass.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    /// `[B, 1, H, W]`
    pub prediction: Var,
    /// `[B, K, H, W]`
    pub reconstruction: Var,
    /// `[B·M, C]`
    pub queries: Var,
    /// `[B·M, C]`
    pub recon_queries: Var,
    /// Pattern bank leaf `[N, C]`.
    pub patterns: Var,
    /// Per-sample siamese cosine similarity `[B]`.
    pub similarity: Option<Var>,
    /// Encoder skip tensors, shallowest first.
    pub skips: Vec<Var>,
}

fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = Float::sqrt(gain / fan_in as f64);
    Tensor::uniform(shape, -bound, bound, rng)
}

fn new_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    kind: LayerKind,
    ci: usize,
    co: usize,
    act: Activation,
    rng: &mut R,
) -> Layer {
    let gain = if act == Activation::Relu { 6.0 } else { 3.0 };
    let w = match kind {
        LayerKind::Conv { .. } => init_uniform(&[co, ci, 3, 3], ci * 9, gain, rng),
        LayerKind::Up => init_uniform(&[ci, co, 2, 2], ci, gain, rng),
    };
    let w = store.push(format!("{name}.w"), w);
    let b = store.push(format!("{name}.b"), Tensor::zeros(&[co]));
    Layer {
        kind,
        w,
        b,
        act,
        skip: None,
        emits_skip: None,
    }
}

impl Block {
    /// Registers freshly initialised parameters in `store`.
    pub fn new<R: Rng + ?Sized>(
        config: BlockConfig,
        geometry: BlockGeometry,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(geometry.height, geometry.width)?;
        let per = config.layers_per_level()?;
        let levels = config.levels;
        let c = config.query_dim();

        // encoder
        let mut encoder = Vec::new();
        let mut ch = geometry.window;
        for level in 0..levels {
            let width = config.width(level);
            for i in 0..per {
                let last = level == levels - 1 && i == per - 1;
                let act = if last {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                };
                let stride = if i == 0 { 2 } else { 1 };
                let mut layer = new_layer(
                    store,
                    format!("{prefix}.enc{level}.{i}"),
                    LayerKind::Conv { stride },
                    ch,
                    width,
                    act,
                    rng,
                );
                if i == per - 1 && level < levels - 1 {
                    layer.emits_skip = Some(level);
                }
                encoder.push(layer);
                ch = width;
            }
        }

        let build_decoder = |store: &mut ParamStore,
                             tag: &str,
                             input: usize,
                             out: usize,
                             skips: bool,
                             rng: &mut R| {
            let mut layers = Vec::new();
            let mut ch = input;
            for stage in (0..levels).rev() {
                if stage > 0 {
                    let width = config.width(stage - 1);
                    let mut up = new_layer(
                        store,
                        format!("{prefix}.{tag}{stage}.up"),
                        LayerKind::Up,
                        ch,
                        width,
                        Activation::Relu,
                        rng,
                    );
                    ch = width;
                    if skips {
                        up.skip = Some(stage - 1);
                        ch += width;
                    }
                    layers.push(up);
                    for i in 1..per {
                        layers.push(new_layer(
                            store,
                            format!("{prefix}.{tag}{stage}.{i}"),
                            LayerKind::Conv { stride: 1 },
                            ch,
                            width,
                            Activation::Relu,
                            rng,
                        ));
                        ch = width;
                    }
                } else if per == 1 {
                    layers.push(new_layer(
                        store,
                        format!("{prefix}.{tag}0.up"),
                        LayerKind::Up,
                        ch,
                        out,
                        Activation::Linear,
                        rng,
                    ));
                } else {
                    let width = config.width(0);
                    layers.push(new_layer(
                        store,
                        format!("{prefix}.{tag}0.up"),
                        LayerKind::Up,
                        ch,
                        width,
                        Activation::Relu,
                        rng,
                    ));
                    for i in 1..per {
                        let last = i == per - 1;
                        layers.push(new_layer(
                            store,
                            format!("{prefix}.{tag}0.{i}"),
                            LayerKind::Conv { stride: 1 },
                            width,
                            if last { out } else { width },
                            if last {
                                Activation::Linear
                            } else {
                                Activation::Relu
                            },
                            rng,
                        ));
                    }
                }
            }
            layers
        };
        let predictor = build_decoder(store, "pred", 2 * c, 1, true, rng);
        let reconstructor = build_decoder(store, "recon", c, geometry.window, false, rng);
        // a fresh block starts out predicting nothing and reconstructing nothing
        for layers in [&predictor, &reconstructor] {
            if let Some(last) = layers.last() {
                store.get_mut(last.w).scale_assign(0.0);
            }
        }

        let m = (geometry.height >> levels) * (geometry.width >> levels);
        let e = config.embedding_dim;
        let s1w = store.push(
            format!("{prefix}.siam0.w"),
            init_uniform(&[m * c, e], m * c, 6.0, rng),
        );
        let s1b = store.push(format!("{prefix}.siam0.b"), Tensor::zeros(&[e]));
        let s2w = store.push(
            format!("{prefix}.siam1.w"),
            init_uniform(&[e, e], e, 3.0, rng),
        );
        let s2b = store.push(format!("{prefix}.siam1.b"), Tensor::zeros(&[e]));

        let bank = PatternBank::random(config.pattern_count, c, rng)?;
        let patterns = store.push(format!("{prefix}.patterns"), bank.into_tensor());

        Ok(Self {
            config,
            geometry,
            encoder,
            predictor,
            reconstructor,
            siamese: [Dense { w: s1w, b: s1b }, Dense { w: s2w, b: s2b }],
            patterns,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.geometry
    }

    pub fn patterns_id(&self) -> ParamId {
        self.patterns
    }

    /// Number of queries `M` per sample.
    pub fn queries_per_sample(&self) -> usize {
        (self.geometry.height >> self.config.levels) * (self.geometry.width >> self.config.levels)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self
            .encoder
            .iter()
            .chain(&self.predictor)
            .chain(&self.reconstructor)
        {
            ids.push(l.w);
            ids.push(l.b);
        }
        for d in &self.siamese {
            ids.push(d.w);
            ids.push(d.b);
        }
        ids.push(self.patterns);
        ids
    }

    /// Parameters of the predicting decoder, the only consumer of skip tensors.
    pub fn predictor_param_ids(&self) -> Vec<ParamId> {
        self.predictor.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn reconstructor_param_ids(&self) -> Vec<ParamId> {
        self.reconstructor.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn bank(&self, store: &ParamStore) -> Result<PatternBank> {
        PatternBank::new(store.get(self.patterns).clone())
    }

    /// Per-sample siamese cosine score of two `[B·M, C]` query sets, embedded
    /// with the block's shared weights.
    pub fn siamese_similarity(
        &self,
        store: &ParamStore,
        queries: &Tensor,
        recon_queries: &Tensor,
    ) -> Result<Vec<f64>> {
        crate::error::ensure_shape("siamese query sets", queries.shape(), recon_queries.shape())?;
        let m = self.queries_per_sample();
        if queries.shape().len() != 2
            || queries.dim(1) != self.config.query_dim()
            || !queries.dim(0).is_multiple_of(m)
        {
            return Err(Error::ShapeMismatch {
                context: "siamese query sets",
                expected: vec![m, self.config.query_dim()],
                actual: queries.shape().to_vec(),
            });
        }
        let batch = queries.dim(0) / m;
        let mut g = Graph::new();
        let q = g.input(queries.clone());
        let q_hat = g.input(recon_queries.clone());
        let f = self.embed(&mut g, store, q, batch, false)?;
        let f_hat = self.embed(&mut g, store, q_hat, batch, false)?;
        let (f, f_hat) = (g.value(f), g.value(f_hat));
        Ok((0..batch).map(|b| cosine(f.row(b), f_hat.row(b))).collect())
    }

    fn apply<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        layer: &Layer,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let w = g.param(store, layer.w, trainable);
        let b = g.param(store, layer.b, trainable);
        let y = match layer.kind {
            LayerKind::Conv { stride } => g.conv2d(x, w, b, stride, 1)?,
            LayerKind::Up => g.conv_t2(x, w, b)?,
        };
        Ok(match layer.act {
            Activation::Relu => g.relu(y),
            Activation::Sigmoid => g.sigmoid(y),
            Activation::Linear => y,
        })
    }

    fn embed<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        q: Var,
        batch: usize,
        trainable: bool,
    ) -> Result<Var> {
        let flat_len = self.queries_per_sample() * self.config.query_dim();
        let x = g.reshape(q, &[batch, flat_len])?;
        let [d0, d1] = &self.siamese;
        let (w0, b0) = (
            g.param(store, d0.w, trainable),
            g.param(store, d0.b, trainable),
        );
        let h = g.linear(x, w0, b0)?;
        let h = g.relu(h);
        let (w1, b1) = (
            g.param(store, d1.w, trainable),
            g.param(store, d1.b, trainable),
        );
        g.linear(h, w1, b1)
    }

    /// Runs the block on `x` (`[B, K, H, W]`).
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        x: Var,
        trainable: bool,
        opts: ForwardOptions,
    ) -> Result<BlockOutput> {
        let geo = self.geometry;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != geo.window
            || shape[2] != geo.height
            || shape[3] != geo.width
        {
            return Err(Error::ShapeMismatch {
                context: "block input",
                expected: vec![
                    shape.first().copied().unwrap_or(0),
                    geo.window,
                    geo.height,
                    geo.width,
                ],
                actual: shape,
            });
        }
        let batch = shape[0];

        let mut skips = Vec::new();
        let mut h = x;
        for layer in &self.encoder {
            h = self.apply(g, store, layer, h, trainable)?;
            if layer.emits_skip.is_some() {
                skips.push(h);
            }
        }
        let bshape = g.shape(h).to_vec();
        let bottleneck = [bshape[0], bshape[1], bshape[2], bshape[3]];
        let queries = g.to_queries(h);
        let patterns = g.param(store, self.patterns, trainable);
        let recon_queries = if self.config.memory_enabled {
            g.memory_read(queries, patterns, self.config.kernel)?
        } else {
            queries
        };

        let similarity = if opts.siamese {
            let f = self.embed(g, store, queries, batch, trainable)?;
            let f_hat = self.embed(g, store, recon_queries, batch, trainable)?;
            Some(g.cosine_rows(f, f_hat)?)
        } else {
            None
        };

        let q_map = g.from_queries(queries, bottleneck)?;
        let q_hat_map = g.from_queries(recon_queries, bottleneck)?;

        let skip_inputs: Vec<Var> = if opts.zero_skips {
            skips.iter().map(|&s| g.scale(s, 0.0)).collect()
        } else {
            skips.clone()
        };

        let mut p = g.concat_channels(&[q_map, q_hat_map])?;
        for layer in &self.predictor {
            p = self.apply(g, store, layer, p, trainable)?;
            if let Some(level) = layer.skip {
                p = g.concat_channels(&[p, skip_inputs[level]])?;
            }
        }

        let mut r = q_hat_map;
        for layer in &self.reconstructor {
            r = self.apply(g, store, layer, r, trainable)?;
        }

        Ok(BlockOutput {
            prediction: p,
            reconstruction: r,
            queries,
            recon_queries,
            patterns,
            similarity,
            skips,
        })
    }
}

/// Cosine similarity between the shared-weight embeddings of two query sets.
pub fn siamese_similarity(f: &Tensor, f_hat: &Tensor) -> Result<f64> {
    crate::error::ensure_shape("siamese_similarity", f.shape(), f_hat.shape())?;
    Ok(cosine(f.data(), f_hat.data()))
}
