use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or flag combinations; exit code 1.
    #[error("usage: {0}")]
    Usage(String),
    /// Unreadable, malformed or inconsistent data; exit code 2.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_errors!(
    orpercept_core::dataio::DataioError,
    orpercept_core::pipeline::PipelineError,
    orpercept_core::simulator::SimError,
    orpercept_core::mvpm::MvpmError,
    orpercept_core::metrics::MetricsError,
    orpercept_core::crf::CrfError,
    orpercept_core::calibration::CalibrationError,
    orpercept_core::geometry::GeometryError
);
