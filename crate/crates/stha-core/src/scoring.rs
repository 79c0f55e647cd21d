//! Frame-level anomaly scores from prediction quality, per-video
//! normalisation and ROC AUC.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

const MAX_FLOOR: f64 = 1e-8;

/// Peak term used in the PSNR numerator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakMode {
    /// `P · max(Ŷ)`.
    #[default]
    MaxPrediction,
    /// `P · max(Ŷ)²`, the textbook peak signal-to-noise ratio.
    Conventional,
}

/// `10·log10(P · peak / ‖Ŷ − Y‖²)` for one predicted frame.
///
/// Returns `+∞` for a perfect prediction. A non-positive prediction maximum
/// is floored at `1e-8`.
pub fn psnr_score(prediction: &[f64], target: &[f64], mode: PeakMode) -> Result<f64> {
    ensure_shape("psnr_score", &[target.len()], &[prediction.len()])?;
    if prediction.is_empty() {
        return Err(Error::Empty("psnr_score frame"));
    }
    let p = prediction.len() as f64;
    let mut peak = prediction.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak < MAX_FLOOR {
        log::warn!("prediction maximum {peak} floored at {MAX_FLOOR} for PSNR");
        peak = MAX_FLOOR;
    }
    let peak = match mode {
        PeakMode::MaxPrediction => peak,
        PeakMode::Conventional => peak * peak,
    };
    let err: f64 = prediction
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * Float::log10(p * peak / err))
}

/// Per-video min-max normalisation of PSNR turned into anomaly scores
/// `1 − g(PSNR)`; higher is more anomalous. Infinite values are clamped to
/// the series' finite extremes. A constant series maps to 0.5.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::Empty("score series needs at least two frames"));
    }
    let finite = raw.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        log::warn!("score series has no finite value; all scores set to 0.5");
        return Ok(alloc::vec![0.5; raw.len()]);
    }
    let clamped = raw
        .iter()
        .map(|&v| if v.is_nan() { hi } else { v.clamp(lo, hi) });
    if hi == lo {
        log::warn!("constant score series; all scores set to 0.5");
        return Ok(alloc::vec![0.5; raw.len()]);
    }
    Ok(clamped.map(|v| 1.0 - (v - lo) / (hi - lo)).collect())
}

/// ROC AUC of `scores` against binary `labels` (`true` = anomalous, the
/// positive class) via the Mann-Whitney statistic with average ranks for ties.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::MisalignedSeries {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassLabels {
            split: format!("{} frames with {positives} anomalous", labels.len()),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Frame-aligned scores of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    /// Source frame index each entry refers to.
    pub frames: Vec<usize>,
    pub raw_psnr: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSeries {
    pub fn new(
        video_id: String,
        frames: Vec<usize>,
        raw_psnr: Vec<f64>,
        labels: Vec<bool>,
    ) -> Result<Self> {
        if frames.len() != raw_psnr.len() || frames.len() != labels.len() {
            return Err(Error::MisalignedSeries {
                left: frames.len(),
                right: raw_psnr.len().min(labels.len()),
            });
        }
        let anomaly = normalize_scores(&raw_psnr)?;
        Ok(Self {
            video_id,
            frames,
            raw_psnr,
            anomaly,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Restricts the series to the given frame indices (which must be present).
    pub fn restrict(&self, frames: &[usize]) -> Result<Self> {
        let mut raw = Vec::with_capacity(frames.len());
        let mut labels = Vec::with_capacity(frames.len());
        for f in frames {
            let i = self.frames.iter().position(|x| x == f).ok_or_else(|| {
                Error::InvalidConfig(format!("frame {f} missing from {}", self.video_id))
            })?;
            raw.push(self.raw_psnr[i]);
            labels.push(self.labels[i]);
        }
        Self::new(self.video_id.clone(), frames.to_vec(), raw, labels)
    }
}

/// AUC over the concatenation of per-video normalised scores.
pub fn series_auc(series: &[ScoreSeries]) -> Result<f64> {
    let scores: Vec<f64> = series
        .iter()
        .flat_map(|s| s.anomaly.iter().copied())
        .collect();
    let labels: Vec<bool> = series
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .collect();
    frame_auc(&scores, &labels)
}

/// PSNR of every sample in a `[B, 1, H, W]` prediction batch.
pub fn batch_psnr(prediction: &Tensor, target: &Tensor, mode: PeakMode) -> Result<Vec<f64>> {
    ensure_shape("batch_psnr", target.shape(), prediction.shape())?;
    (0..prediction.dim(0))
        .map(|b| psnr_score(prediction.sample(b), target.sample(b), mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_analytic_value() {
        let v = psnr_score(&[1.0; 4], &[0.9; 4], PeakMode::MaxPrediction).unwrap();
        assert!((v - 20.0).abs() < 1e-9);
        assert_eq!(
            psnr_score(&[0.5; 4], &[0.5; 4], PeakMode::MaxPrediction).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn psnr_floors_nonpositive_maximum() {
        let v = psnr_score(&[0.0, 0.0], &[0.1, 0.1], PeakMode::MaxPrediction).unwrap();
        assert!((v - 10.0 * (2.0 * 1e-8 / 0.02f64).log10()).abs() < 1e-9);
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(
            normalize_scores(&[10.0, 20.0, 30.0]).unwrap(),
            vec![1.0, 0.5, 0.0]
        );
        assert_eq!(normalize_scores(&[3.0, 3.0, 3.0]).unwrap(), vec![0.5; 3]);
        let with_inf = normalize_scores(&[10.0, f64::INFINITY, 30.0]).unwrap();
        assert_eq!(with_inf, vec![1.0, 0.0, 0.0]);
        assert!(normalize_scores(&[1.0]).is_err());
    }

    #[test]
    fn auc_perfect_and_degenerate() {
        let s = [0.1, 0.2, 0.8, 0.9];
        assert_eq!(frame_auc(&s, &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(frame_auc(&s, &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(
            frame_auc(&[0.5; 4], &[false, true, false, true]).unwrap(),
            0.5
        );
        assert!(matches!(
            frame_auc(&s, &[true; 4]),
            Err(Error::SingleClassLabels { .. })
        ));
    }
}
