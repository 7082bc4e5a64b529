use iidlab::image::ImageError;
use iidlab::metrics::MetricError;
use iidlab::priors::PriorError;
use iidlab::signet::train::TrainError;
use iidlab::signet::SignetError;
use iidlab::synth::SynthError;
use std::fmt;

/// Exit code for malformed or missing user input.
pub const EXIT_INPUT: u8 = 2;
/// Exit code for failures inside a command.
pub const EXIT_INTERNAL: u8 = 1;

/// A failure reported to the user as `error[CODE]: message` on one line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub exit: u8,
    pub message: String,
}

impl CliError {
    pub fn input(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, exit: EXIT_INPUT, message: message.into() }
    }

    pub fn internal(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, exit: EXIT_INTERNAL, message: message.into() }
    }

    /// The stderr line: newlines in the message are flattened so each error
    /// stays on a single line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.code, self.message.replace('\n', " "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io { .. } => Self::internal("IO", e.to_string()),
            _ => Self::input("IMAGE", e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => Self::input("CONFIG", e.to_string()),
            SynthError::Manifest { .. } => Self::input("MANIFEST", e.to_string()),
            SynthError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::input("MANIFEST", e.to_string())
            }
            SynthError::Io { .. } => Self::internal("IO", e.to_string()),
            SynthError::Image(i) => i.into(),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        Self::input("PRIOR", e.to_string())
    }
}

impl From<SignetError> for CliError {
    fn from(e: SignetError) -> Self {
        match e {
            SignetError::InvalidConfig(_) => Self::input("CONFIG", e.to_string()),
            SignetError::SizeMismatch(_) => Self::input("SIZE", e.to_string()),
            SignetError::CheckpointMismatch { .. } | SignetError::Checkpoint(_) => {
                Self::input("CHECKPOINT", e.to_string())
            }
            SignetError::Prior(p) => p.into(),
            SignetError::Tensor(_) => Self::internal("TENSOR", e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Self::input("CONFIG", e.to_string()),
            TrainError::ManifestEmpty => Self::input("MANIFEST", e.to_string()),
            TrainError::NonFiniteLoss { .. } => Self::internal("NONFINITE", e.to_string()),
            TrainError::Io { .. } => Self::internal("IO", e.to_string()),
            TrainError::Synth(s) => s.into(),
            TrainError::Prior(p) => p.into(),
            TrainError::Signet(s) => s.into(),
            TrainError::Checkpoint(_) => Self::internal("CHECKPOINT", e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Io { .. } => Self::input("INPUT", e.to_string()),
            MetricError::Synth(s) => s.into(),
            MetricError::Signet(s) => s.into(),
            _ => Self::input("METRIC", e.to_string()),
        }
    }
}
