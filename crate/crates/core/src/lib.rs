//! Differentially private training of SmoothNet-style CNNs.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense tensors and a reverse-mode
//!   computation record with per-sample parameter gradients.
//! - [`layers`] and [`arch`]: parameters, initializers, SmoothBlock,
//!   SmoothNet and the configurable study CNN.
//! - [`dp`]: per-sample gradients, clipping, Gaussian noising and the
//!   momentum-SGD update.
//! - [`accountant`]: Rényi-DP accounting for the subsampled Gaussian
//!   mechanism.
//! - [`data`]: CIFAR-10 binary loading, synthetic datasets, normalization,
//!   splitting and lot sampling.
//! - [`harness`]: run configuration, the training loop, sweeps, metrics CSV,
//!   checkpoints and Pareto fronts.

pub mod accountant;
pub mod arch;
pub mod autograd;
pub mod data;
pub mod dp;
mod error;
pub mod harness;
pub mod layers;
pub mod tensor;

pub use arch::{
    build_smoothblock, build_smoothnet, build_study_cnn, count_params, Architecture,
    ArchSummary, Model, SmoothBlockConfig, SmoothNetConfig, StudyCnnConfig,
};
pub use autograd::{Gradients, Reduction, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
