//! End-to-end orchestration: configs, data, the two training phases,
//! posterior sampling and the linear-Gaussian toy.

pub mod config;
pub mod corpus;
pub mod data;
pub mod log;
pub mod sample;
pub mod toy;
pub mod train;

pub use config::{ExperimentConfig, ProblemKind};
pub use data::{Dataset, ImageSet};
pub use log::MetricsLog;
pub use sample::{sample_posterior, PosteriorSamples};
pub use train::{
    flow_loss, flow_loss_graph, train_ddpm, train_flow, DdpmModel, DdpmRun, FlowModel, FlowRun,
};
