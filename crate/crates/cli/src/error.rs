use sst_atl::active::ActiveError;
use sst_atl::hsi::HsiError;
use sst_atl::metrics::MetricsError;
use sst_atl::model::ModelError;
use sst_atl::transfer::TransferError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<HsiError> for CliError {
    fn from(e: HsiError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            ModelError::InvalidConfig(_) | ModelError::SubpatchDoesNotDivide { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ActiveError> for CliError {
    fn from(e: ActiveError) -> Self {
        match e {
            ActiveError::Model(m) => m.into(),
            ActiveError::Hsi(h) => h.into(),
            ActiveError::InvalidConfig(_) | ActiveError::EvenNeighborhood(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Model(m) => m.into(),
            TransferError::Hsi(h) => h.into(),
            TransferError::InvalidConfig(_) | TransferError::InvalidRho(_) | TransferError::InvalidFraction(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
