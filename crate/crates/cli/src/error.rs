use std::fmt;

/// A failure reported as one `error kind=... [field=...] message="..."` line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub field: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl fmt::Display) -> Self {
        CliError { kind, field: None, message: message.to_string() }
    }

    pub fn field(kind: &'static str, field: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError { kind, field: Some(field.into()), message: message.to_string() }
    }

    pub fn missing(field: &str) -> Self {
        Self::field("config", field, "missing required field")
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error kind={}", self.kind)?;
        if let Some(field) = &self.field {
            write!(f, " field={field}")?;
        }
        // Debug quoting escapes newlines and quotes, keeping the line single
        write!(f, " message={:?}", self.message)
    }
}

macro_rules! from_err {
    ($t:ty, $kind:literal) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($kind, e)
            }
        }
    };
}

from_err!(stainbench_core::dataset::DatasetError, "dataset");
from_err!(stainbench_core::imaging::ManifestError, "manifest");
from_err!(stainbench_core::imaging::ImageError, "image");
from_err!(stainbench_core::train::TrainError, "train");
from_err!(stainbench_core::metrics::MetricError, "metric");
from_err!(stainbench_core::lmm::LmmError, "lmm");
from_err!(stainbench_core::checkpoint::CheckpointError, "checkpoint");
from_err!(stainbench_core::backbone::BackboneError, "backbone");

pub type Result<T> = std::result::Result<T, CliError>;
