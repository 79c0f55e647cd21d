//! On-disk datasets: one directory per video holding numbered grayscale PNG
//! frames and a `meta.json`, plus a top-level `meta.json`.
//!
//! ```text
//! <root>/meta.json
//! <root>/train/<video id>/meta.json, 0000.png, 0001.png, ...
//! <root>/test/<video id>/...
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stha_core::data::{
    ClassSet, Frame, GeneratorConfig, LabeledVideo, ObjectClass, Split, SyntheticDataset,
};

use crate::error::{CliError, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    /// Tolerance degrees with labelled content.
    pub degrees: Vec<u32>,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorConfig>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    /// Degree whose normal content a training video shows.
    #[serde(default)]
    pub degree: Option<u32>,
    /// Object classes visible per frame (synthetic data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence: Option<Vec<Vec<ObjectClass>>>,
    /// Degree-independent anomaly labels, used when `presence` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub meta: VideoMeta,
    pub frames: Vec<Frame>,
}

impl Video {
    /// Per-frame labels under `degree`; `None` when the video carries none.
    pub fn labels(&self, degree: u32) -> Result<Option<Vec<bool>>> {
        if let Some(p) = &self.meta.presence {
            Ok(Some(self.as_labeled(p).labels(degree)?))
        } else {
            Ok(self.meta.labels.clone())
        }
    }

    fn as_labeled(&self, presence: &[Vec<ObjectClass>]) -> LabeledVideo {
        LabeledVideo {
            id: self.meta.id.clone(),
            split: self.meta.split,
            degree: self.meta.degree,
            frames: Vec::new(),
            presence: presence.iter().map(|c| ClassSet::of(c)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

impl Dataset {
    pub fn train_split(&self, degree: u32) -> Vec<&Video> {
        self.train
            .iter()
            .filter(|v| v.meta.degree.unwrap_or(1) == degree)
            .collect()
    }
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::parse(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CliError::parse(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes a frame as 8-bit grayscale.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(f),
        frame.width() as u32,
        frame.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = frame
        .pixels()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = enc.write_header().map_err(|e| CliError::parse(path, e))?;
    w.write_image_data(&bytes)
        .map_err(|e| CliError::parse(path, e))
}

/// Reads an 8-bit grayscale or RGB(A) PNG into `[0, 1]` luminance.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| CliError::parse(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CliError::parse(path, e))?;
    let bytes = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let pixels: Vec<f64> = bytes
        .chunks(channels)
        .map(|px| match channels {
            1 | 2 => px[0] as f64 / 255.0,
            _ => (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0,
        })
        .collect();
    Ok(Frame::new(
        info.height as usize,
        info.width as usize,
        pixels,
    )?)
}

fn frame_name(i: usize) -> String {
    format!("{i:04}.png")
}

pub fn write_video(dir: &Path, meta: &VideoMeta, frames: &[Frame]) -> Result<()> {
    create_dir(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(i)), f)?;
    }
    write_json(&dir.join("meta.json"), meta)
}

pub fn read_video(dir: &Path) -> Result<Video> {
    let meta: VideoMeta = read_json(&dir.join("meta.json"))?;
    let frames = (0..meta.frames)
        .map(|i| read_frame(&dir.join(frame_name(i))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &meta.presence {
        if p.len() != frames.len() {
            return Err(CliError::parse(
                &dir.join("meta.json"),
                format!("{} presence entries for {} frames", p.len(), frames.len()),
            ));
        }
    }
    if let Some(l) = &meta.labels {
        if l.len() != frames.len() {
            return Err(CliError::parse(
                &dir.join("meta.json"),
                format!("{} labels for {} frames", l.len(), frames.len()),
            ));
        }
    }
    Ok(Video { meta, frames })
}

fn video_meta(v: &LabeledVideo) -> VideoMeta {
    VideoMeta {
        id: v.id.clone(),
        split: v.split,
        frames: v.frames.len(),
        degree: v.degree,
        presence: Some(v.presence.iter().map(|p| p.classes()).collect()),
        labels: None,
    }
}

/// Materializes a generated dataset under `root`.
pub fn write_synthetic(root: &Path, ds: &SyntheticDataset) -> Result<DatasetMeta> {
    create_dir(root)?;
    let all = ds.train.iter().chain(&ds.test);
    for v in all {
        write_video(
            &root.join(split_dir(v.split)).join(&v.id),
            &video_meta(v),
            &v.frames,
        )?;
    }
    let meta = DatasetMeta {
        version: DATASET_VERSION,
        height: ds.config.canvas.height,
        width: ds.config.canvas.width,
        degrees: ds.degrees(),
        seed: Some(ds.config.seed),
        generator: Some(ds.config.clone()),
        train: ds.train.iter().map(|v| v.id.clone()).collect(),
        test: ds.test.iter().map(|v| v.id.clone()).collect(),
    };
    write_json(&root.join("meta.json"), &meta)?;
    Ok(meta)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("meta.json");
    let meta: DatasetMeta = read_json(&path)?;
    if meta.version != DATASET_VERSION {
        return Err(CliError::parse(
            &path,
            format!("unsupported dataset version {}", meta.version),
        ));
    }
    let load = |split: Split, ids: &[String]| -> Result<Vec<Video>> {
        ids.iter()
            .map(|id| read_video(&root.join(split_dir(split)).join(id)))
            .collect()
    };
    let train = load(Split::Train, &meta.train)?;
    let test = load(Split::Test, &meta.test)?;
    for v in train.iter().chain(&test) {
        if let Some(f) = v
            .frames
            .iter()
            .find(|f| f.height() != meta.height || f.width() != meta.width)
        {
            return Err(CliError::parse(
                &path,
                format!(
                    "video {} has {}×{} frames, dataset declares {}×{}",
                    v.meta.id,
                    f.height(),
                    f.width(),
                    meta.height,
                    meta.width
                ),
            ));
        }
    }
    Ok(Dataset { meta, train, test })
}

/// Directory of one video inside a dataset.
pub fn video_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split_dir(split)).join(id)
}
