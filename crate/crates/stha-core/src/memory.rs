//! Normal-pattern memory of a block.
//!
//! A [`PatternBank`] stores `N` latent vectors of dimension `C`. Queries
//! produced by the encoder read the bank through a heavy-tailed attention
//! kernel normalised over patterns, and the bank is written by the same kernel
//! normalised over queries followed by a logistic squashing, which keeps every
//! stored entry inside `(0, 1)`.

use alloc::vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unnormalised attention score between one query and one pattern.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    /// `1 / (1 + ‖q − k‖²)`: a Student-t kernel on Euclidean distance.
    #[default]
    StudentTDistance,
    /// `1 / (1 + |qᵀk|)`: the dot-product form.
    LiteralDot,
}

impl AttentionKernel {
    #[inline]
    pub fn score(self, q: &[f64], k: &[f64]) -> f64 {
        match self {
            Self::StudentTDistance => {
                let d: f64 = q.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
                1.0 / (1.0 + d)
            }
            Self::LiteralDot => {
                let p: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                1.0 / (1.0 + p.abs())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternBank {
    patterns: Tensor,
}

impl PatternBank {
    pub fn new(patterns: Tensor) -> Result<Self> {
        if patterns.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "PatternBank::new",
                expected: vec![0, 0],
                actual: patterns.shape().to_vec(),
            });
        }
        if patterns.dim(0) == 0 {
            return Err(Error::EmptyBank);
        }
        Ok(Self { patterns })
    }

    /// Patterns drawn uniformly from the open unit interval.
    pub fn random<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut t = Tensor::uniform(&[count, dim], 0.0, 1.0, rng);
        for v in t.data_mut() {
            *v = v.clamp(1e-6, 1.0 - 1e-6);
        }
        Self::new(t)
    }

    pub fn len(&self) -> usize {
        self.patterns.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patterns.dim(1)
    }

    pub fn patterns(&self) -> &Tensor {
        &self.patterns
    }

    pub fn into_tensor(self) -> Tensor {
        self.patterns
    }

    /// Reads the bank with `queries` (`[M, C]`). Returns the reconstructed
    /// queries and the row-stochastic read weights `[M, N]`.
    pub fn read(&self, queries: &Tensor, kernel: AttentionKernel) -> Result<(Tensor, Tensor)> {
        read(&self.patterns, queries, kernel)
    }

    /// Writes `queries` into the bank and returns the new state.
    pub fn update(&self, queries: &Tensor, kernel: AttentionKernel) -> Result<Self> {
        Ok(Self {
            patterns: update(&self.patterns, queries, kernel)?,
        })
    }
}

fn check(patterns: &Tensor, queries: &Tensor) -> Result<(usize, usize, usize)> {
    if patterns.shape().len() != 2 || patterns.dim(0) == 0 {
        return Err(Error::EmptyBank);
    }
    let (n, c) = (patterns.dim(0), patterns.dim(1));
    if queries.shape().len() != 2 || queries.dim(1) != c {
        return Err(Error::ShapeMismatch {
            context: "memory query dimension",
            expected: vec![queries.shape().first().copied().unwrap_or(0), c],
            actual: queries.shape().to_vec(),
        });
    }
    Ok((queries.dim(0), n, c))
}

/// Unnormalised kernel scores `[M, N]`.
pub fn scores(patterns: &Tensor, queries: &Tensor, kernel: AttentionKernel) -> Result<Tensor> {
    let (m, n, _) = check(patterns, queries)?;
    let mut s = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let q = queries.row(i);
        for j in 0..n {
            s[i * n + j] = kernel.score(q, patterns.row(j));
        }
    }
    Ok(s)
}

/// Read weights normalised over patterns (rows sum to one).
pub fn read_weights(
    patterns: &Tensor,
    queries: &Tensor,
    kernel: AttentionKernel,
) -> Result<Tensor> {
    let mut s = scores(patterns, queries, kernel)?;
    let n = patterns.dim(0);
    for row in s.data_mut().chunks_mut(n) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(s)
}

/// Update weights normalised over queries (columns sum to one).
pub fn update_weights(
    patterns: &Tensor,
    queries: &Tensor,
    kernel: AttentionKernel,
) -> Result<Tensor> {
    let mut s = scores(patterns, queries, kernel)?;
    let (m, n) = (s.dim(0), s.dim(1));
    for j in 0..n {
        let total: f64 = (0..m).map(|i| s[i * n + j]).sum();
        for i in 0..m {
            s[i * n + j] /= total;
        }
    }
    Ok(s)
}

pub fn read(
    patterns: &Tensor,
    queries: &Tensor,
    kernel: AttentionKernel,
) -> Result<(Tensor, Tensor)> {
    let a = read_weights(patterns, queries, kernel)?;
    let (m, n, c) = (a.dim(0), a.dim(1), patterns.dim(1));
    let mut out = Tensor::zeros(&[m, c]);
    crate::kernels::gemm(
        m,
        n,
        c,
        a.data(),
        n as isize,
        1,
        patterns.data(),
        c as isize,
        1,
        out.data_mut(),
        0.0,
    );
    Ok((out, a))
}

pub fn update(patterns: &Tensor, queries: &Tensor, kernel: AttentionKernel) -> Result<Tensor> {
    let b = update_weights(patterns, queries, kernel)?;
    let (m, n, c) = (b.dim(0), b.dim(1), patterns.dim(1));
    // written[n, c] = b^T[n, m] · q[m, c]
    let mut written = Tensor::zeros(&[n, c]);
    crate::kernels::gemm(
        n,
        m,
        c,
        b.data(),
        1,
        n as isize,
        queries.data(),
        c as isize,
        1,
        written.data_mut(),
        0.0,
    );
    Ok(patterns.zip_map(&written, |k, w| sigmoid(k + w)))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

/// Vector-Jacobian product of [`read`]: given `dL/dq̂` (`[M, C]`), returns
/// `(dL/dq, dL/dk)`.
pub fn read_backward(
    patterns: &Tensor,
    queries: &Tensor,
    kernel: AttentionKernel,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (m, n, c) = check(patterns, queries)?;
    crate::error::ensure_shape("memory read gradient", &[m, c], grad_out.shape())?;
    let s = scores(patterns, queries, kernel)?;
    let mut gq = Tensor::zeros(&[m, c]);
    let mut gk = Tensor::zeros(&[n, c]);
    let mut g_a = vec![0.0; n];
    let mut a = vec![0.0; n];
    for i in 0..m {
        let srow = s.row(i);
        let total: f64 = srow.iter().sum();
        let go = grad_out.row(i);
        let mut weighted = 0.0;
        for j in 0..n {
            a[j] = srow[j] / total;
            let k = patterns.row(j);
            g_a[j] = go.iter().zip(k).map(|(x, y)| x * y).sum();
            weighted += a[j] * g_a[j];
            // direct path through the weighted average
            for (dst, g) in gk.data_mut()[j * c..(j + 1) * c].iter_mut().zip(go) {
                *dst += a[j] * g;
            }
        }
        let q = queries.row(i);
        for j in 0..n {
            let g_s = (g_a[j] - weighted) / total;
            let k = patterns.row(j);
            let sv = srow[j];
            match kernel {
                AttentionKernel::StudentTDistance => {
                    // s = 1/(1+d), d = ‖q−k‖², ∂s/∂q = −2 s² (q−k)
                    let coef = -2.0 * sv * sv * g_s;
                    for t in 0..c {
                        let diff = q[t] - k[t];
                        gq[i * c + t] += coef * diff;
                        gk[j * c + t] -= coef * diff;
                    }
                }
                AttentionKernel::LiteralDot => {
                    let p: f64 = q.iter().zip(k).map(|(x, y)| x * y).sum();
                    let sign = if p > 0.0 {
                        1.0
                    } else if p < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let coef = -sv * sv * sign * g_s;
                    for t in 0..c {
                        gq[i * c + t] += coef * k[t];
                        gk[j * c + t] += coef * q[t];
                    }
                }
            }
        }
    }
    Ok((gq, gk))
}
