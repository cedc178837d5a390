//! Compilation of trained graphs into accumulate-only spike graphs.

mod bitplane;
mod compile;
mod exec;
mod verify;

pub use bitplane::{levels_to_bitplanes, reconstruct, scaled_levels, to_bitplanes, to_unary, BitPlaneTrain};
pub use compile::{coding_for, convert_ann, lower_graph, CALIBRATION_QUANTILE};
pub use exec::{run_lowered, CountRule, LoweredRun};
pub use verify::{audit, verify_equivalence, AuditFinding, AuditReport, Divergence, EquivalenceReport};

pub(crate) use exec::conv_taps;

use crate::network::NetworkError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum LoweringError {
    #[error("lowering integrity: {0}")]
    Integrity(String),
    #[error("layer {layer}: cannot fold batch norm: {reason}")]
    Unfoldable { layer: usize, reason: String },
    #[error("layer {layer} ({kind}): {reason}")]
    Unsupported {
        layer: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("layer {layer}: unbounded activation and no calibration data")]
    Uncalibrated { layer: usize },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
