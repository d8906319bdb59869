//! Command failures and their process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | other failure (unwritable output, internal error) |
//! | 2 | configuration error, including weight/architecture mismatch |
//! | 3 | data error: missing or unreadable manifest, image, mask or weight file; empty split |
//! | 4 | numeric abort: non-finite loss during training |

use ucmnet::data::DataError;
use ucmnet::profile::ProfileError;
use ucmnet::train::TrainError;
use ucmnet::weights::WeightError;
use ucmnet::ModelError;

use crate::config::ConfigError;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, msg: msg.into() }
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, msg: msg.into() }
    }
    pub fn other(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_OTHER, msg: msg.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(format!("config error: {e}"))
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(format!("data error: {e}"))
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::config(format!("config error: {e}")),
            e => Failure::other(e.to_string()),
        }
    }
}

impl From<WeightError> for Failure {
    fn from(e: WeightError) -> Self {
        match e {
            WeightError::ShapeMismatch { .. } | WeightError::Missing(_) | WeightError::Unexpected(_) => {
                Failure::config(format!("weights do not match the configured architecture: {e}"))
            }
            e => Failure::data(format!("weight file: {e}")),
        }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Model(m) => m.into(),
            e => Failure::other(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Weights(w) => w.into(),
            TrainError::Config(_) => Failure::config(e.to_string()),
            TrainError::NonFinite { .. } => Failure {
                code: EXIT_NUMERIC,
                msg: format!("numeric abort: {e}"),
            },
            e => Failure::other(e.to_string()),
        }
    }
}
