//! Exit-code buckets and the machine-readable error envelope.

use posekit::augmotion::AugmotionError;
use posekit::heatpose::HeatposeError;
use posekit::ingest::IngestError;
use posekit::metrics::MetricsError;

/// Exit code 3: file system and I/O failures.
pub const EXIT_IO: i32 = 3;
/// Exit code 4: configuration violations (flags, config file, parameters).
pub const EXIT_CONFIG: i32 = 4;
/// Exit code 5: malformed or inconsistent input data.
pub const EXIT_DATA: i32 = 5;
/// Exit code 6: numerical failures (degenerate geometry, empty input).
pub const EXIT_NUMERIC: i32 = 6;
/// Exit code 7: a self-test reported failures.
pub const EXIT_SELFTEST: i32 = 7;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, "config", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, "io", message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, "data", message)
    }

    /// Serialized form printed to stderr on failure.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "code": self.code,
                "kind": self.kind,
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<IngestError> for CliError {
    fn from(err: IngestError) -> Self {
        let code = match &err {
            IngestError::Io { .. } => EXIT_IO,
            IngestError::ZeroWindowParam | IngestError::WindowTooLong { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self::new(code, "ingest", err.to_string())
    }
}

impl From<HeatposeError> for CliError {
    fn from(err: HeatposeError) -> Self {
        let code = match &err {
            HeatposeError::Io { .. } => EXIT_IO,
            HeatposeError::BadDims(_)
            | HeatposeError::BadBounds
            | HeatposeError::DimsTooSmallForPadding { .. }
            | HeatposeError::SigmaTooSmall { .. }
            | HeatposeError::NonPositiveParameter { .. }
            | HeatposeError::JointOutOfBounds { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self::new(code, "heatpose", err.to_string())
    }
}

impl From<AugmotionError> for CliError {
    fn from(err: AugmotionError) -> Self {
        let code = match &err {
            AugmotionError::InvalidK { .. } | AugmotionError::KeyFrameOutOfRange { .. } => {
                EXIT_CONFIG
            }
            AugmotionError::MissingReferenceTriple | AugmotionError::Topology(_) => EXIT_DATA,
            _ => EXIT_NUMERIC,
        };
        Self::new(code, "augmotion", err.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(err: MetricsError) -> Self {
        let code = match &err {
            MetricsError::DegenerateConfiguration | MetricsError::Alignment(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self::new(code, "metrics", err.to_string())
    }
}
