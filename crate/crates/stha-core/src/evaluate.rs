//! Scoring whole videos with a trained model.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{source_target_index, stream_frames, Frame, LabeledVideo};
use crate::error::{Error, Result};
use crate::hierarchy::{fuse_streams, Model};
use crate::scoring::{batch_psnr, frame_auc, PeakMode, ScoreSeries};
use crate::tensor::Tensor;

/// Per-stream and fused scores of one video, aligned on source frame index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub frames: Vec<usize>,
    pub labels: Vec<bool>,
    pub streams: Vec<ScoreSeries>,
    pub fused: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub videos: Vec<VideoScores>,
    pub auc: f64,
    pub stream_auc: Vec<f64>,
}

/// Raw PSNR of every scoreable frame of `video` for one stream, as
/// `(source frame index, psnr)`.
pub fn stream_psnr(
    model: &Model,
    stream: usize,
    video: &[Frame],
    mode: PeakMode,
    batch: usize,
) -> Result<Vec<(usize, f64)>> {
    let cfg = &model.config().streams[stream];
    let k = cfg.window;
    let frames = stream_frames(video, cfg.kind)?;
    if frames.len() < k + 1 {
        return Err(Error::VideoTooShort {
            frames: video.len(),
            window: k,
            needed: k + 1,
        });
    }
    let (h, w) = (model.config().frame_height, model.config().frame_width);
    let hw = h * w;
    let n = frames.len() - k;
    let mut out = Vec::with_capacity(n);
    let batch = batch.max(1);
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let mut x = Vec::with_capacity(idx.len() * k * hw);
        let mut y = Vec::with_capacity(idx.len() * hw);
        for &i in &idx {
            for f in &frames[i..i + k] {
                x.extend_from_slice(f.pixels());
            }
            y.extend_from_slice(frames[i + k].pixels());
        }
        let x = Tensor::from_vec(&[idx.len(), k, h, w], x)?;
        let y = Tensor::from_vec(&[idx.len(), 1, h, w], y)?;
        let pred = model.predict(stream, x)?;
        let psnr = batch_psnr(&pred, &y, mode)?;
        out.extend(
            idx.iter()
                .map(|&i| source_target_index(cfg.kind, i, k))
                .zip(psnr),
        );
    }
    Ok(out)
}

/// Scores one video under the model's current tolerance. `labels` has one
/// entry per source frame; `None` means all normal.
pub fn score_video(
    model: &Model,
    video_id: &str,
    video: &[Frame],
    labels: Option<&[bool]>,
    mode: PeakMode,
    batch: usize,
) -> Result<VideoScores> {
    if let Some(l) = labels {
        if l.len() != video.len() {
            return Err(Error::MisalignedSeries {
                left: video.len(),
                right: l.len(),
            });
        }
    }
    let raw: Vec<Vec<(usize, f64)>> = (0..model.config().streams.len())
        .map(|s| stream_psnr(model, s, video, mode, batch))
        .collect::<Result<_>>()?;
    let first = raw.iter().map(|r| r[0].0).max().unwrap_or(0);
    let frames: Vec<usize> = (first..video.len()).collect();
    let frame_labels: Vec<bool> = frames
        .iter()
        .map(|&f| labels.is_some_and(|l| l[f]))
        .collect();
    let mut streams = Vec::with_capacity(raw.len());
    for r in &raw {
        let psnr: Vec<f64> = r
            .iter()
            .filter(|(f, _)| *f >= first)
            .map(|&(_, p)| p)
            .collect();
        streams.push(ScoreSeries::new(
            video_id.to_string(),
            frames.clone(),
            psnr,
            frame_labels.clone(),
        )?);
    }
    let mut fused = streams[0].anomaly.clone();
    let mut weight = model.config().streams[0].fusion_weight;
    for (s, series) in streams.iter().enumerate().skip(1) {
        let ws = model.config().streams[s].fusion_weight;
        let total = weight + ws;
        fused = if total > 0.0 {
            fuse_streams(&fused, &series.anomaly, weight / total)?
        } else {
            fuse_streams(&fused, &series.anomaly, 0.5)?
        };
        weight = total;
    }
    Ok(VideoScores {
        video_id: video_id.to_string(),
        frames,
        labels: frame_labels,
        streams,
        fused,
    })
}

/// Scores labelled test videos and reports frame-level AUC, labelling
/// anomalies according to `degree`.
pub fn evaluate_videos(
    model: &Model,
    videos: &[&LabeledVideo],
    degree: u32,
    mode: PeakMode,
    batch: usize,
) -> Result<Evaluation> {
    let mut scored = Vec::with_capacity(videos.len());
    for v in videos {
        let labels = v.labels(degree)?;
        scored.push(score_video(
            model,
            &v.id,
            &v.frames,
            Some(&labels),
            mode,
            batch,
        )?);
    }
    auc_of(scored)
}

/// Fused and per-stream AUC of already scored videos.
pub fn auc_of(videos: Vec<VideoScores>) -> Result<Evaluation> {
    if videos.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let labels: Vec<bool> = videos
        .iter()
        .flat_map(|v| v.labels.iter().copied())
        .collect();
    let fused: Vec<f64> = videos
        .iter()
        .flat_map(|v| v.fused.iter().copied())
        .collect();
    let auc = frame_auc(&fused, &labels)?;
    let stream_auc = (0..videos[0].streams.len())
        .map(|s| {
            let scores: Vec<f64> = videos
                .iter()
                .flat_map(|v| v.streams[s].anomaly.iter().copied())
                .collect();
            frame_auc(&scores, &labels)
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        videos,
        auc,
        stream_auc,
    })
}
