use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config file {} not found", path.display())]
    MissingConfig { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error("{}: unsupported checkpoint version {found} (expected {expected})", path.display())]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] stha_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingConfig { .. } => "missing_config",
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::CheckpointVersion { .. } => "checkpoint_version",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Usage(_) => "usage",
            Self::Core(stha_core::Error::NonFiniteLoss { .. }) => "non_finite_loss",
            Self::Core(stha_core::Error::UnknownDegree { .. }) => "unknown_degree",
            Self::Core(_) => "invalid_input",
        }
    }

    /// Missing configuration and usage errors exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingConfig { .. } | Self::Usage(_) => 2,
            _ => 1,
        }
    }

    fn path(&self) -> Option<&Path> {
        match self {
            Self::MissingConfig { path }
            | Self::Io { path, .. }
            | Self::Parse { path, .. }
            | Self::CheckpointVersion { path, .. }
            | Self::Checkpoint { path, .. } => Some(path),
            _ => None,
        }
    }

    /// One-line JSON record for standard error.
    pub fn to_json(&self) -> String {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        if let Some(p) = self.path() {
            v["path"] = json!(p.display().to_string());
        }
        if let Self::Core(stha_core::Error::UnknownDegree { available, .. }) = self {
            v["available_degrees"] = json!(available);
        }
        v.to_string()
    }
}
