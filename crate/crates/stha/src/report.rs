//! Metrics and score tables, evaluation summaries.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stha_core::evaluate::VideoScores;
use stha_core::loss::LossBreakdown;
use stha_core::scoring::PeakMode;

use crate::error::{CliError, Result};

/// Appends one row per epoch, flushing as it goes so an interrupted run keeps
/// its history.
pub struct MetricsWriter {
    path: std::path::PathBuf,
    inner: csv::Writer<File>,
}

#[derive(Serialize)]
struct MetricsRow {
    phase: usize,
    degree: u32,
    epoch: usize,
    total: f64,
    prediction: f64,
    diversity: f64,
    siamese: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::parse(path, e)
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn row(
        &mut self,
        phase: usize,
        degree: u32,
        epoch: usize,
        l: &LossBreakdown,
    ) -> Result<()> {
        self.inner
            .serialize(MetricsRow {
                phase,
                degree,
                epoch,
                total: l.total,
                prediction: l.prediction,
                diversity: l.diversity,
                siamese: l.siamese,
            })
            .map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub frame_index: usize,
    /// Mean raw PSNR over streams.
    pub raw_psnr: f64,
    /// Fused anomaly score.
    pub anomaly_score: f64,
    pub label: u8,
}

pub fn score_rows(v: &VideoScores) -> Vec<ScoreRow> {
    let n = v.streams.len().max(1) as f64;
    v.frames
        .iter()
        .enumerate()
        .map(|(i, &f)| ScoreRow {
            frame_index: f,
            raw_psnr: v.streams.iter().map(|s| s.raw_psnr[i]).sum::<f64>() / n,
            anomaly_score: v.fused[i],
            label: v.labels[i] as u8,
        })
        .collect()
}

pub fn write_scores(path: &Path, v: &VideoScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in score_rows(v) {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeSummary {
    pub degree: u32,
    /// Active stacks of each stream under this degree.
    pub active_stacks: Vec<Vec<usize>>,
    /// Frame-level AUC of the fused score; absent when labels have one class.
    pub auc: Option<f64>,
    pub stream_auc: Option<Vec<f64>>,
    pub videos: Vec<VideoSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub id: String,
    pub frames: usize,
    pub anomalous_frames: usize,
    pub scores: String,
    pub plot: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub checkpoint: String,
    pub config_hash: String,
    pub peak_mode: PeakMode,
    pub available_degrees: Vec<u32>,
    pub evaluations: Vec<DegreeSummary>,
}
