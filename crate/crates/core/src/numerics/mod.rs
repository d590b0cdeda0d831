//! Differentiable array core: tensors, reverse-mode graphs, parameter
//! storage, optimizers, random streams and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{compare_gradients, gradcheck, GradcheckReport, Objective};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, clip_global_norm, sgd_step, AdamConfig};
pub use params::{grad, Bindings, ParamStore};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};
