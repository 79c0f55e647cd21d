#![allow(dead_code)]

use stha_core::memory::AttentionKernel;
use stha_core::Tensor;

pub fn kernel_score(q: &[f64], k: &[f64], kernel: AttentionKernel) -> f64 {
    match kernel {
        AttentionKernel::StudentTDistance => {
            let mut d = 0.0;
            for i in 0..q.len() {
                d += (q[i] - k[i]) * (q[i] - k[i]);
            }
            1.0 / (1.0 + d)
        }
        AttentionKernel::LiteralDot => {
            let mut d = 0.0;
            for i in 0..q.len() {
                d += q[i] * k[i];
            }
            1.0 / (1.0 + d.abs())
        }
    }
}

/// Elementwise read: normalise scores over patterns, then average patterns.
pub fn naive_read(k: &Tensor, q: &Tensor, kernel: AttentionKernel) -> Tensor {
    let (m, n, c) = (q.dim(0), k.dim(0), k.dim(1));
    let mut out = vec![0.0; m * c];
    for mi in 0..m {
        let mut denom = 0.0;
        for ni in 0..n {
            denom += kernel_score(q.row(mi), k.row(ni), kernel);
        }
        for ni in 0..n {
            let a = kernel_score(q.row(mi), k.row(ni), kernel) / denom;
            for ci in 0..c {
                out[mi * c + ci] += a * k.row(ni)[ci];
            }
        }
    }
    Tensor::from_vec(&[m, c], out).unwrap()
}

/// Elementwise update: normalise scores over queries, add the weighted
/// query sum to each pattern and squash.
pub fn naive_update(k: &Tensor, q: &Tensor, kernel: AttentionKernel) -> Tensor {
    let (m, n, c) = (q.dim(0), k.dim(0), k.dim(1));
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        let mut denom = 0.0;
        for mi in 0..m {
            denom += kernel_score(q.row(mi), k.row(ni), kernel);
        }
        for ci in 0..c {
            let mut acc = k.row(ni)[ci];
            for mi in 0..m {
                acc += kernel_score(q.row(mi), k.row(ni), kernel) / denom * q.row(mi)[ci];
            }
            out[ni * c + ci] = 1.0 / (1.0 + (-acc).exp());
        }
    }
    Tensor::from_vec(&[n, c], out).unwrap()
}

/// Mann-Whitney AUC by counting concordant positive/negative pairs.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Printed PSNR evaluated directly.
pub fn direct_psnr(pred: &[f64], target: &[f64]) -> f64 {
    let max = pred.iter().cloned().fold(f64::MIN, f64::max);
    let se: f64 = pred.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * ((pred.len() as f64 * max) / se).log10()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stha_core::block::{BlockConfig, SizeClass};
use stha_core::data::StreamKind;
use stha_core::hierarchy::{
    ArchitectureConfig, DegreeActivation, Model, StackConfig, StreamConfig, CONFIG_VERSION,
};

pub const SIDE: usize = 16;
pub const WINDOW: usize = 2;

pub fn tiny_block() -> BlockConfig {
    BlockConfig {
        base_width: 2,
        embedding_dim: 6,
        pattern_count: 5,
        ..BlockConfig::new(SizeClass::Small)
    }
}

/// One appearance stream on 16×16 frames; `stacks[i]` blocks in stack `i`.
/// Degree `d` activates stacks `0..d`.
pub fn tiny_config(stacks: &[usize]) -> ArchitectureConfig {
    ArchitectureConfig {
        version: CONFIG_VERSION,
        frame_height: SIDE,
        frame_width: SIDE,
        streams: vec![StreamConfig {
            kind: StreamKind::Appearance,
            window: WINDOW,
            stacks: stacks
                .iter()
                .enumerate()
                .map(|(i, &n)| StackConfig {
                    blocks: vec![tiny_block(); n],
                    masked: false,
                    degree: i as u32 + 1,
                })
                .collect(),
            fusion_weight: 1.0,
        }],
        degrees: (1..=stacks.len())
            .map(|d| DegreeActivation {
                degree: d as u32,
                stacks: (0..d).collect(),
            })
            .collect(),
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Copies every parameter of `from` into `to` whose renamed name exists there.
pub fn copy_params(from: &Model, to: &mut Model, rename: impl Fn(&str) -> Option<String>) -> usize {
    let mut copied = 0;
    let src = from.store();
    let targets: Vec<_> = to.store().ids().collect();
    for id in src.ids() {
        if let Some(name) = rename(src.name(id)) {
            if let Some(&t) = targets.iter().find(|&&t| to.store().name(t) == name) {
                *to.store_mut().get_mut(t) = src.get(id).clone();
                copied += 1;
            }
        }
    }
    copied
}

/// Gives every bias and every all-zero tensor small random values so that
/// fresh blocks produce nonzero outputs.
pub fn perturb(model: &mut Model, seed: u64) {
    let ids: Vec<_> = model.store().ids().collect();
    for (n, &id) in ids.iter().enumerate() {
        let t = model.store().get(id);
        if model.store().name(id).ends_with(".b") || t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            *model.store_mut().get_mut(id) =
                random_tensor(&shape, seed * 1000 + n as u64).map(|v| 0.4 * v - 0.2);
        }
    }
}
