//! Posterior sampling: refine the kernel coordinates with the reverse
//! diffusion, then invert the flow at the measured `y`.

use crate::diffusion::{ancestral_sample, subsample_schedule};
use crate::error::{Error, Result};
use crate::flow::LatentPair;
use crate::numerics::rng::purpose;
use crate::numerics::{RngStream, Tensor};

use super::train::{DdpmModel, FlowModel};

/// Items processed per denoiser call.
pub const SAMPLE_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    /// `[N, ...input_shape]`
    pub x: Tensor,
    /// The refined kernel coordinates, `[N, ...z_shape]`.
    pub z: Tensor,
    /// Function evaluations per item: `n_steps` denoiser calls plus one
    /// flow inversion.
    pub nfe: usize,
}

/// Draws one posterior sample per measurement in the batch `y`.
///
/// Item `i` uses only `RngStream::new(seed, SAMPLE).substream(i)`, so the
/// output for an item does not depend on the batch it was processed in.
/// `n_steps < T` runs the evenly subsampled schedule.
pub fn sample_posterior(
    y: &Tensor,
    flow: &FlowModel,
    ddpm: &DdpmModel,
    n_steps: usize,
    seed: u64,
) -> Result<PosteriorSamples> {
    sample_posterior_from(y, flow, ddpm, n_steps, seed, 0)
}

/// As [`sample_posterior`], with item `i` of `y` using substream
/// `first_index + i`.
pub fn sample_posterior_from(
    y: &Tensor,
    flow: &FlowModel,
    ddpm: &DdpmModel,
    n_steps: usize,
    seed: u64,
    first_index: u64,
) -> Result<PosteriorSamples> {
    ddpm.check_compatible(flow)?;
    let fc = flow.flow.config();
    let y_shape = fc.y_shape();
    if y.ndim() != y_shape.len() + 1 || y.item_shape() != y_shape.as_slice() {
        let mut want = vec![y.batch_len()];
        want.extend_from_slice(&y_shape);
        return Err(Error::shape("measurements", &want, y.shape()));
    }
    let t_max = ddpm.schedule.len();
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::Contract(format!(
            "n_steps must be in 1..={t_max}, got {n_steps}"
        )));
    }
    y.check_finite(|| "measurements".into())?;
    let schedule = subsample_schedule(&ddpm.schedule, n_steps)?;
    let predictor = ddpm.net.bind(&ddpm.params);
    let base = RngStream::new(seed, purpose::SAMPLE);
    let n = y.batch_len();
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut nfe = 0;
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let idx: Vec<usize> = (start..(start + SAMPLE_CHUNK).min(n)).collect();
        let yc = y.select_rows(&idx)?;
        let mut rngs: Vec<RngStream> = idx
            .iter()
            .map(|&i| base.substream(first_index + i as u64))
            .collect();
        let out = ancestral_sample(&predictor, &yc, &fc.z_shape(), &schedule, &mut rngs)?;
        nfe = out.nfe + 1;
        let x = flow.inverse(&LatentPair {
            y: yc,
            z: out.z0.clone(),
        })?;
        xs.push(x);
        zs.push(out.z0);
    }
    let x = Tensor::concat_rows(&xs)?;
    x.check_finite(|| "posterior samples".into())?;
    Ok(PosteriorSamples {
        x,
        z: Tensor::concat_rows(&zs)?,
        nfe,
    })
}
