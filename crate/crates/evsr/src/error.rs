use std::path::PathBuf;

use evsr_core::events::EventError;
use evsr_core::flow::FlowError;
use evsr_core::metrics::MetricError;
use evsr_core::network::{ArchConfig, NetworkError};
use evsr_core::simulator::SimError;
use evsr_core::stacking::StackError;
use evsr_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Events {
        path: PathBuf,
        #[source]
        source: EventError,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: invalid checkpoint: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("no texture images found in {0}")]
    NoTextures(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint architecture {got:?} does not match configured {expected:?}")]
    ArchMismatch { expected: Box<ArchConfig>, got: Box<ArchConfig> },
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (lr {lr})")]
    NonFinite { epoch: usize, step: usize, lr: f64, loss: f64 },
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches a path to an IO error.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
