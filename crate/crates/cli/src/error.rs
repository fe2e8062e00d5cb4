use std::io::ErrorKind;
use std::path::Path;

use fusepose::checkpoint::CheckpointError;
use fusepose::config::ConfigError;
use fusepose::evalkit::EvalError;
use fusepose::fusion::ModelError;
use fusepose::synthdata::{RecordError, SynthConfigError};
use fusepose::training::TrainError;

/// Failure classes with their process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Io,
    MissingFile,
    Schema,
    Divergence,
    Config,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Io => 1,
            Kind::MissingFile => 3,
            Kind::Schema => 4,
            Kind::Divergence => 5,
            Kind::Config => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Io => "io",
            Kind::MissingFile => "missing-file",
            Kind::Schema => "schema",
            Kind::Divergence => "divergence",
            Kind::Config => "config",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn io(e: std::io::Error, path: &Path) -> Self {
        let kind = if e.kind() == ErrorKind::NotFound { Kind::MissingFile } else { Kind::Io };
        Self::new(kind, format!("{}: {e}", path.display()))
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.kind.name(), "code": self.kind.code(), "message": self.message }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches the offending path to format and io errors.
pub trait Context<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, RecordError> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| match e {
            RecordError::Io(e) => CliError::io(e, path),
            e => CliError::new(Kind::Schema, format!("{}: {e}", path.display())),
        })
    }
}

impl<T> Context<T> for std::result::Result<T, CheckpointError> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| match e {
            CheckpointError::Io(e) => CliError::io(e, path),
            e => CliError::new(Kind::Schema, format!("{}: {e}", path.display())),
        })
    }
}

impl<T> Context<T> for std::result::Result<T, ConfigError> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| match e {
            ConfigError::Io(e) => CliError::io(e, path),
            e => CliError::new(Kind::Schema, format!("{}: {e}", path.display())),
        })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(e, path))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::new(Kind::Config, e.to_string())
    }
}

impl From<SynthConfigError> for CliError {
    fn from(e: SynthConfigError) -> Self {
        CliError::new(Kind::Config, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::new(Kind::Io, e.to_string()),
            e => CliError::new(Kind::Schema, e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Divergence { .. } => Kind::Divergence,
            TrainError::Io(_) => Kind::Io,
            TrainError::Checkpoint(CheckpointError::Io(_)) => Kind::Io,
            TrainError::Checkpoint(_) => Kind::Schema,
            TrainError::Config(_) | TrainError::NoLabels | TrainError::EmptyPool(_) | TrainError::Model(_) => Kind::Config,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => (*t).into(),
            EvalError::Shape(m) => CliError::new(Kind::Schema, m),
            e => CliError::new(Kind::Config, e.to_string()),
        }
    }
}
