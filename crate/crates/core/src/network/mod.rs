//! Layer graphs, temporal unrolling, training and checkpoints.

mod checkpoint;
mod data;
mod graph;
mod layer;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION, MANIFEST_FILE};
pub use data::{Dataset, DatasetError, Generator};
pub use graph::{BnMode, Forward, GraphMode, InputEncoding, LayerGraph, Unit, Unrolled};
pub use layer::{
    Activation, BatchNormLayer, Conv2dLayer, Layer, LinearLayer, NeuronLayer, PlaneOrder, SpikeCoding,
};
pub(crate) use train::argmax_rows;
pub use train::{evaluate, train_epoch, EpochMetrics, Evaluation, GradStats};

use crate::neuron::NeuronError;
use crate::tensor::{OptimError, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("layer {layer} ({kind}): {message}")]
    Layer {
        layer: usize,
        kind: &'static str,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; gradient report:\n{report}")]
    NonFinite { epoch: usize, batch: usize, report: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl NetworkError {
    pub(crate) fn at(layer: usize, kind: &'static str, message: impl Into<String>) -> Self {
        NetworkError::Layer {
            layer,
            kind,
            message: message.into(),
        }
    }
}
