//! Fixtures shared by the benchmarks.

use pseudoflow::flow::{CouplingFlow, FlowConfig};
use pseudoflow::nn::Init;
use pseudoflow::numerics::rng::purpose;
use pseudoflow::numerics::{ParamStore, RngStream, Tensor};

/// An image flow with random (non-identity) weights.
pub fn image_flow(channels: usize, size: usize, scale: usize) -> (CouplingFlow, ParamStore) {
    let flow =
        CouplingFlow::new(FlowConfig::image(channels, size, size, scale)).expect("valid flow");
    let mut rng = RngStream::new(0, purpose::INIT);
    let params = flow.init_params(&mut rng, Init::DEFAULT).expect("init");
    (flow, params)
}

/// A batch of uniform images in `[0, 1)`.
pub fn image_batch(n: usize, channels: usize, size: usize) -> Tensor {
    RngStream::new(1, purpose::DATA_GEN).uniform_tensor(&[n, channels, size, size], 0.0, 1.0)
}
