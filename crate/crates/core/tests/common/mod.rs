//! Reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use pseudoflow::flow::{CouplingFlow, FlowConfig};
use pseudoflow::nn::Init;
use pseudoflow::numerics::rng::purpose;
use pseudoflow::numerics::{Bindings, Graph, ParamStore, RngStream, Tensor};

/// A flow whose every weight is random, so no layer is the identity.
pub fn random_flow(cfg: FlowConfig, seed: u64, gain: f32) -> (CouplingFlow, ParamStore) {
    let flow = CouplingFlow::new(cfg).unwrap();
    let mut rng = RngStream::new(seed, purpose::INIT);
    let mut params = flow.init_params(&mut rng, Init::DEFAULT).unwrap();
    let paths: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    for p in paths {
        let t = params.get_mut(&p).unwrap();
        for v in t.data_mut() {
            *v *= gain;
        }
    }
    (flow, params)
}

/// Coupling stack in f64 on a single latent-layout item.
fn latent_f64(
    flow: &CouplingFlow,
    params: &ParamStore,
    item_shape: &[usize],
    x: &[f64],
) -> (Vec<f64>, f64) {
    let g = Graph::<f64>::new();
    let b = Bindings::constants(&g, params);
    let mut shape = vec![1];
    shape.extend_from_slice(item_shape);
    let xv = g.constant(Tensor::<f64>::new(shape, x.to_vec()).unwrap());
    let (out, logdet) = flow.forward_graph(&g, &b, xv).unwrap();
    let ld = g.value(logdet).data()[0];
    (g.value(out).data().to_vec(), ld)
}

/// `(reported log-det, log|det J|)` at `x`, with `J` from central differences.
pub fn logdet_vs_jacobian(flow: &CouplingFlow, params: &ParamStore, x: &[f64]) -> (f64, f64) {
    let item = flow.config().latent_shape();
    let n = x.len();
    let (_, reported) = latent_f64(flow, params, &item, x);
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, _) = latent_f64(flow, params, &item, &xp);
        let (fm, _) = latent_f64(flow, params, &item, &xm);
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (reported, jac.determinant().abs().ln())
}

use pseudoflow::degradations::DegradationOp;
use pseudoflow::diffusion::{
    ddpm_loss_graph, draw_ddpm_batch, DdpmBatch, Denoiser, DenoiserConfig, NoiseSchedule,
};
use pseudoflow::numerics::{Objective, Real, Var};
use pseudoflow::pipeline::flow_loss_graph;

/// The flow training objective on a fixed batch.
pub struct FlowObjective {
    pub flow: CouplingFlow,
    pub x: Tensor,
    pub target: Tensor,
    pub sigma: f64,
}

impl FlowObjective {
    /// A `dim`-dimensional problem measured by the average of all
    /// coordinates, with random weights throughout.
    pub fn averaging(dim: usize, seed: u64) -> (Self, ParamStore) {
        let mut cfg = FlowConfig::vector(dim, 1);
        cfg.layers = 4;
        cfg.hidden = 6;
        let (flow, params) = random_flow(cfg, seed, 1.0);
        let d = DegradationOp::from_rows(&[&vec![1.0 / dim as f64; dim]]).unwrap();
        let x = RngStream::new(seed, purpose::DATA_GEN).normal_tensor(&[5, dim]);
        let target = d.apply(&x).unwrap();
        (
            FlowObjective {
                flow,
                x,
                target,
                sigma: 0.05,
            },
            params,
        )
    }
}

impl Objective for FlowObjective {
    fn loss<R: Real>(&self, g: &Graph<R>, b: &Bindings) -> pseudoflow::Result<Var> {
        Ok(flow_loss_graph(g, b, &self.flow, &self.x, &self.target, self.sigma)?.loss)
    }
}

/// The denoising objective on fixed `(t, ε)` draws.
pub struct DdpmObjective {
    pub net: Denoiser,
    pub batch: DdpmBatch,
    pub y: Tensor,
}

impl DdpmObjective {
    pub fn small(z_dim: usize, y_dim: usize, s: &NoiseSchedule, seed: u64) -> (Self, ParamStore) {
        let mut cfg = DenoiserConfig::vector(z_dim, y_dim);
        cfg.hidden = 6;
        cfg.blocks = 1;
        cfg.embed_dim = 4;
        let net = Denoiser::new(cfg).unwrap();
        let mut rng = RngStream::new(seed, purpose::INIT);
        let mut params = net.init_params(&mut rng).unwrap();
        // Fresh denoisers end in a zero layer; randomize it so every path
        // carries gradient.
        let paths: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
        for p in paths {
            let t = params.get_mut(&p).unwrap();
            if t.data().iter().all(|&v| v == 0.0) {
                *t = rng.normal_tensor(t.shape()).scale(0.3).with_grad();
            }
        }
        let z0 = rng.normal_tensor(&[4, z_dim]);
        let y = rng.normal_tensor(&[4, y_dim]);
        let mut t_rng = RngStream::new(seed, purpose::TIMESTEP);
        let mut e_rng = RngStream::new(seed, purpose::EPSILON);
        let batch = draw_ddpm_batch(&z0, s, &mut t_rng, &mut e_rng).unwrap();
        (DdpmObjective { net, batch, y }, params)
    }
}

impl Objective for DdpmObjective {
    fn loss<R: Real>(&self, g: &Graph<R>, b: &Bindings) -> pseudoflow::Result<Var> {
        ddpm_loss_graph(g, b, &self.net, &self.batch, &self.y)
    }
}

/// `E[ε | z_t]` when `z₀ ~ N(m, s² I)`: the exact noise predictor.
pub struct GaussianOracle {
    pub mean: f64,
    pub var: f64,
    pub schedule: NoiseSchedule,
}

impl pseudoflow::diffusion::NoisePredictor for GaussianOracle {
    fn predict(
        &self,
        z_t: &Tensor,
        _y: &Tensor,
        t: &[usize],
        alpha_bar: &[f64],
    ) -> pseudoflow::Result<Tensor> {
        let stride = z_t.len() / z_t.batch_len();
        let mut out = z_t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(stride).enumerate() {
            // `t` holds original timesteps, so the full schedule must agree
            // with the ᾱ the sampler hands over.
            let ab = self.schedule.alpha_bar(t[i]);
            assert!((ab - alpha_bar[i]).abs() < 1e-12);
            let gain = (1.0 - ab).sqrt() / (ab * self.var + 1.0 - ab);
            for v in chunk {
                *v = (gain * (*v as f64 - ab.sqrt() * self.mean)) as f32;
            }
        }
        Ok(out)
    }
}
