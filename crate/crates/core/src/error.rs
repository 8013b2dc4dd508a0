use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("value {value} outside domain of {function}: {domain}")]
    Domain {
        function: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("inconsistent counts for {category}: {reason}")]
    InconsistentCounts { category: String, reason: String },

    #[error("category {0} has no sent pulses")]
    EmptyCategory(String),

    #[error("estimation failed: {0}")]
    EstimationFailure(String),

    #[error("capacity diverges at transmissivity {0}")]
    DivergentCapacity(f64),

    #[error("cannot lay out {slots} slots: {reason}")]
    InfeasiblePattern { slots: usize, reason: String },

    #[error("gain {gain} for the {stage} loop is outside (0, 2)")]
    UnstableGain { stage: &'static str, gain: f64 },

    #[error("phase loop lost lock at t = {time_s:.6} s (rms error {rms:.3} rad)")]
    LostLock { time_s: f64, rms: f64 },

    #[error("schema error in {source_name}: {reason}")]
    Schema { source_name: String, reason: String },

    #[error("missing key `{key}` in {source_name}")]
    MissingKey { source_name: String, key: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by malformed or incomplete input files.
    pub fn is_schema(&self) -> bool {
        matches!(self, Error::Schema { .. } | Error::MissingKey { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
