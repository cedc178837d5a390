//! Integer-binary spiking neural networks with range alignment.
//!
//! * [`neuron`]: LIF, I-LIF and IBRA-LIF dynamics with surrogate gradients.
//! * [`tensor`]: dense tensors, a reverse-mode tape and the IBRT container.
//! * [`network`]: layer graphs, training, datasets and checkpoints.
//! * [`lowering`]: batch-norm folding, bit-plane execution and verification.
//! * [`energy`]: operation ledgers and pricing.
//! * [`cli`]: the `ibra` command line.

pub mod cli;
pub mod energy;
pub mod lowering;
pub mod network;
pub mod neuron;
pub mod tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/neurons.md")]
    mod neurons {}
    #[doc = include_str!("../../../book/src/bitplanes.md")]
    mod bitplanes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/lowering.md")]
    mod lowering {}
    #[doc = include_str!("../../../book/src/conversion.md")]
    mod conversion {}
    #[doc = include_str!("../../../book/src/energy.md")]
    mod energy {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
