//! Flow-based generative pseudoinverses for super-resolution.
//!
//! A coupling flow splits an image `x` into measurement coordinates `y`,
//! trained to match `D(x)`, and kernel coordinates `z ~ N(0, I)`. A
//! conditional DDPM models `p(z | y)`, and `x = f⁻¹(y, z)` turns a posterior
//! draw back into an image that re-degrades to `y`. The crate is CPU-only
//! and carries its own small autodiff engine in [`numerics`].
//!
//! [`pipeline`] is the high-level entry point: configs, training, sampling.

// Validation is written as `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod degradations;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod oracle2d;
pub mod pipeline;

pub use degradations::{DegradationDescriptor, DegradationOp};
pub use diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
pub use error::{Error, Result};
pub use flow::{CouplingFlow, FlowConfig, LatentPair};
pub use numerics::{RngStream, Tensor};
pub use pipeline::{DdpmModel, ExperimentConfig, FlowModel};
