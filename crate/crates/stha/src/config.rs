//! Declarative run configuration and the named presets shipped with the tool.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stha_core::data::GeneratorConfig;
use stha_core::hierarchy::{ArchitectureConfig, Preset};
use stha_core::loss::LossConfig;
use stha_core::scoring::PeakMode;
use stha_core::train::{default_schedule, Phase};

use crate::error::{CliError, Result};

pub const RUN_CONFIG_VERSION: u32 = 1;

fn one() -> u32 {
    1
}
fn default_window() -> usize {
    4
}
fn default_every() -> usize {
    1
}
fn default_batch() -> usize {
    16
}

/// Training and evaluation settings read by `train`, `eval` and `score`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "one")]
    pub version: u32,
    /// Named architecture; ignored when `architecture` is given.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub architecture: Option<ArchitectureConfig>,
    /// Window length `K` for preset architectures.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Overrides the first-scale channel count of every preset block.
    #[serde(default)]
    pub base_width: Option<usize>,
    #[serde(default)]
    pub loss: LossConfig,
    /// Progressive phases; without one the lowest degree is trained directly.
    #[serde(default)]
    pub schedule: Option<Vec<Phase>>,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between periodic checkpoints (0 disables them).
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub peak_mode: PeakMode,
    #[serde(default = "default_batch")]
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            preset: None,
            architecture: None,
            window: default_window(),
            base_width: None,
            loss: LossConfig::default(),
            schedule: None,
            seed: 0,
            checkpoint_every: default_every(),
            peak_mode: PeakMode::default(),
            eval_batch: default_batch(),
        }
    }
}

/// Config files bundled with the binary, addressable by name.
pub const NAMED_CONFIGS: [(&str, &str); 6] = [
    ("ped2", include_str!("../../../configs/ped2.json")),
    ("avenue", include_str!("../../../configs/avenue.json")),
    (
        "shanghaitech",
        include_str!("../../../configs/shanghaitech.json"),
    ),
    ("toy", include_str!("../../../configs/toy.json")),
    ("desk-ped2", include_str!("../../../configs/desk-ped2.json")),
    ("desk-toy", include_str!("../../../configs/desk-toy.json")),
];

pub const GENERATOR_CONFIG: &str = include_str!("../../../configs/generator.json");

pub fn named_config(name: &str) -> Option<RunConfig> {
    NAMED_CONFIGS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| serde_json::from_str(text).expect("bundled config parses"))
}

/// Reads a JSON file; a missing file is reported as such.
pub fn load_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::MissingConfig {
            path: path.to_path_buf(),
        });
    }
    crate::dataset::read_json(path)
}

pub fn load_generator(path: Option<&Path>) -> Result<GeneratorConfig> {
    let cfg: GeneratorConfig = match path {
        Some(p) => load_file(p)?,
        None => serde_json::from_str(GENERATOR_CONFIG).expect("bundled generator config parses"),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves `--config` as a file path or, failing that, a bundled name.
pub fn load_run(path: Option<&Path>) -> Result<RunConfig> {
    let cfg: RunConfig = match path {
        None => RunConfig::default(),
        Some(p) if !p.exists() => match p.to_str().and_then(named_config) {
            Some(c) => c,
            None => {
                return Err(CliError::MissingConfig {
                    path: p.to_path_buf(),
                })
            }
        },
        Some(p) => load_file(p)?,
    };
    if cfg.version != RUN_CONFIG_VERSION {
        return Err(CliError::Usage(format!(
            "run config version {} is not supported (expected {RUN_CONFIG_VERSION})",
            cfg.version
        )));
    }
    cfg.loss.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Architecture for frames of `height × width`; `preset` overrides the
    /// file's choice.
    pub fn architecture(
        &self,
        preset: Option<&str>,
        height: usize,
        width: usize,
    ) -> Result<ArchitectureConfig> {
        let cfg = match (preset, &self.architecture) {
            (None, Some(a)) => a.clone(),
            (p, _) => {
                let name = p.or(self.preset.as_deref()).unwrap_or("ped2");
                let preset = Preset::from_name(name).ok_or_else(|| {
                    let known: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                    CliError::Usage(format!(
                        "unknown preset {name:?}; known presets: {}",
                        known.join(", ")
                    ))
                })?;
                let mut a = ArchitectureConfig::preset(preset, height, width, self.window);
                if let Some(w) = self.base_width {
                    a = a.map_blocks(|b| b.base_width = w);
                }
                a
            }
        };
        if cfg.frame_height != height || cfg.frame_width != width {
            return Err(CliError::Usage(format!(
                "architecture expects {}×{} frames but the data has {height}×{width}",
                cfg.frame_height, cfg.frame_width
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Phases to run. `degrees` picks and orders phases from the configured
    /// (or default) schedule.
    pub fn schedule(
        &self,
        arch: &ArchitectureConfig,
        degrees: Option<&[u32]>,
    ) -> Result<Option<Vec<Phase>>> {
        let Some(degrees) = degrees else {
            return Ok(self.schedule.clone());
        };
        let base = match &self.schedule {
            Some(s) => s.clone(),
            None => default_schedule(arch)?,
        };
        degrees
            .iter()
            .map(|&d| {
                base.iter().find(|p| p.degree == d).cloned().ok_or_else(|| {
                    stha_core::Error::UnknownDegree {
                        degree: d,
                        available: base.iter().map(|p| p.degree).collect(),
                    }
                    .into()
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// SHA-256 of the architecture's canonical JSON with every stack unmasked, so
/// a model hashes the same under every tolerance.
pub fn config_hash(arch: &ArchitectureConfig) -> String {
    let mut arch = arch.clone();
    for st in arch.streams.iter_mut().flat_map(|s| s.stacks.iter_mut()) {
        st.masked = false;
    }
    let bytes = serde_json::to_vec(&arch).expect("architecture serializes");
    format!("{:x}", Sha256::digest(bytes))
}
