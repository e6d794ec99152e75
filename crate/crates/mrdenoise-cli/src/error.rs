//! Error classification for exit codes: 2 = configuration, 3 = I/O,
//! 4 = numeric failure, 1 = anything else.

use mrdenoise::data::DataError;
use mrdenoise::metrics::MetricError;
use mrdenoise::model::ModelError;
use mrdenoise::noise::NoiseError;
use mrdenoise::train::TrainError;
use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Numeric(m) => write!(f, "numeric: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::InvalidSpec(_) | DataError::SplitOverlap { .. } => {
                CliError::Config(e.to_string())
            }
            DataError::InvalidVolume(_) | DataError::PairShapeMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            DataError::LesionPlacement { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<NoiseError> for CliError {
    fn from(e: NoiseError) -> Self {
        match &e {
            NoiseError::BadLevel(_) => CliError::Config(e.to_string()),
            NoiseError::NegativeVoxel { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::InvalidConfig(_) | ModelError::VolumeTooSmall { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match &e {
            MetricError::AllZeroReference | MetricError::DegenerateRange => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NanLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
            TrainError::Model(m) => match m {
                ModelError::InvalidConfig(_) | ModelError::VolumeTooSmall { .. } => {
                    CliError::Config(e.to_string())
                }
                _ => CliError::Other(e.to_string()),
            },
            TrainError::Data(d) => CliError::from_data_ref(d, &e),
            TrainError::Noise(NoiseError::BadLevel(_)) => CliError::Config(e.to_string()),
            TrainError::Noise(NoiseError::NegativeVoxel { .. }) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Metric(MetricError::AllZeroReference)
            | TrainError::Metric(MetricError::DegenerateRange) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl CliError {
    fn from_data_ref(d: &DataError, outer: &TrainError) -> Self {
        match d {
            DataError::InvalidSpec(_)
            | DataError::SplitOverlap { .. }
            | DataError::InvalidVolume(_)
            | DataError::PairShapeMismatch { .. }
            | DataError::LesionPlacement { .. } => CliError::Config(outer.to_string()),
            _ => CliError::Io(outer.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
