use std::fmt;

use hypnerf::denoise::DenoiseError;
use hypnerf::evaluation::EvalError;
use hypnerf::field::FieldError;
use hypnerf::hypernet::HypernetError;
use hypnerf::scene::{CheckpointError, SceneError};
use hypnerf::tensor::TensorError;
use hypnerf::training::TrainError;

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self {
            exit: Exit::Data,
            message: message.to_string(),
        }
    }

    pub fn numeric(message: impl fmt::Display) -> Self {
        Self {
            exit: Exit::Numeric,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn tensor_is_numeric(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            Self::numeric(e)
        } else {
            Self::data(e)
        }
    }
}

impl From<DenoiseError> for CliError {
    fn from(e: DenoiseError) -> Self {
        match e {
            DenoiseError::Train(t) => t.into(),
            DenoiseError::Tensor(ref t) if tensor_is_numeric(t) => Self::numeric(e),
            other => Self::data(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            other => Self::data(other),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        if tensor_is_numeric(&e) {
            Self::numeric(e)
        } else {
            Self::data(e)
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::data(e)
            }
        })*
    };
}

data_errors!(SceneError, CheckpointError, HypernetError, FieldError, std::io::Error, serde_json::Error);
