//! Degradation-flow training and kernel-refinement diffusion training.
//!
//! Flow training minimizes, per batch,
//!
//! ```text
//! mean_i [ ‖y_i − D(x_i)‖² / 2σ² + ‖z_i‖² / 2 − log|det ∂(y, z)/∂x|_i ]
//! ```
//!
//! i.e. the negative log-density of `(y, z)` under a Gaussian measurement
//! likelihood of width `σ` and a standard normal kernel prior, with the
//! additive constants dropped. Diffusion training then pushes clean data
//! through the frozen flow and fits the ε-prediction objective on `z`
//! conditioned on `y`.

use std::path::Path;

use crate::degradations::{DegradationDescriptor, DegradationOp};
use crate::diffusion::{
    ddpm_loss_graph, draw_ddpm_batch, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::flow::{CouplingFlow, FlowConfig, LatentPair, LATENT_LAYOUT_VERSION};
use crate::nn::Init;
use crate::numerics::rng::purpose;
use crate::numerics::{
    adam_step, clip_global_norm, grad, Bindings, Checkpoint, Graph, ParamStore, Real, RngStream,
    Tensor, Var,
};

use super::config::{ExperimentConfig, ProblemKind};
use super::data::Dataset;
use super::log::{MetricsLog, DDPM_COLUMNS, FLOW_COLUMNS};

pub const FLOW_CHECKPOINT: &str = "flow.ckpt";
pub const FLOW_LOG: &str = "flow_metrics.csv";
pub const DDPM_CHECKPOINT: &str = "ddpm.ckpt";
pub const DDPM_LOG: &str = "ddpm_metrics.csv";

/// Copy of a store without optimizer state.
fn trainable_only(params: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in params.trainable() {
        out.insert(k, v.clone()).expect("trainable paths are valid");
    }
    out
}

fn check_kind(ck: &Checkpoint, want: &str) -> Result<()> {
    let kind = ck.meta("kind")?;
    if kind != want {
        return Err(Error::Format(format!(
            "expected a {want} checkpoint, found {kind:?}"
        )));
    }
    Ok(())
}

/// A trained flow together with the measurement model it was fitted to.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub flow: CouplingFlow,
    pub params: ParamStore,
    pub degradation: DegradationOp,
    pub sigma: f64,
}

impl FlowModel {
    /// A freshly initialized (identity) flow.
    pub fn init(
        cfg: FlowConfig,
        degradation: DegradationOp,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let flow = CouplingFlow::new(cfg)?;
        let mut rng = RngStream::new(seed, purpose::INIT);
        let params = flow.init_params(&mut rng, Init::Zero)?;
        Ok(FlowModel {
            flow,
            params,
            degradation,
            sigma,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(LatentPair, Tensor)> {
        self.flow.forward(&self.params, x)
    }

    pub fn inverse(&self, pair: &LatentPair) -> Result<Tensor> {
        self.flow.inverse(&self.params, pair)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(trainable_only(&self.params))
            .with_meta("kind", "flow")
            .with_meta("flow.config", self.flow.config().to_text())
            .with_meta("flow.latent_layout", LATENT_LAYOUT_VERSION)
            .with_meta("degradation", self.degradation.descriptor().to_text())
            .with_meta("sigma", self.sigma)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_kind(ck, "flow")?;
        let layout: u32 = ck.meta_parse("flow.latent_layout")?;
        if layout != LATENT_LAYOUT_VERSION {
            return Err(Error::Format(format!(
                "flow checkpoint uses latent layout {layout}, this build reads {LATENT_LAYOUT_VERSION}"
            )));
        }
        let flow = CouplingFlow::new(FlowConfig::from_text(ck.meta("flow.config")?)?)?;
        let degradation = DegradationOp::from_descriptor(
            &DegradationDescriptor::from_text(ck.meta("degradation")?)?,
            None,
        )?;
        // Every parameter the architecture expects must be present with the
        // right shape.
        let mut rng = RngStream::new(0, purpose::INIT);
        let expected = flow.init_params(&mut rng, Init::Zero)?;
        for (path, t) in expected.iter() {
            let got = ck.params.get(path).map_err(|_| {
                Error::Format(format!("flow checkpoint is missing parameter {path}"))
            })?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    format!("checkpoint parameter {path}"),
                    t.shape(),
                    got.shape(),
                ));
            }
        }
        Ok(FlowModel {
            flow,
            params: ck.params.clone(),
            degradation,
            sigma: ck.meta_parse("sigma")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// A trained conditional denoiser with its noise schedule.
#[derive(Clone, Debug)]
pub struct DdpmModel {
    pub net: Denoiser,
    pub params: ParamStore,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
}

impl DdpmModel {
    pub fn init(cfg: DenoiserConfig, schedule_config: ScheduleConfig, seed: u64) -> Result<Self> {
        let net = Denoiser::new(cfg)?;
        let mut rng = RngStream::new(seed, purpose::INIT).substream(1);
        let params = net.init_params(&mut rng)?;
        let schedule = schedule_config.build()?;
        Ok(DdpmModel {
            net,
            params,
            schedule_config,
            schedule,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let sched = toml::to_string(&self.schedule_config).expect("schedule serializes");
        Checkpoint::new(trainable_only(&self.params))
            .with_meta("kind", "ddpm")
            .with_meta("ddpm.config", self.net.config().to_text())
            .with_meta("ddpm.schedule", sched)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        check_kind(ck, "ddpm")?;
        let net = Denoiser::new(DenoiserConfig::from_text(ck.meta("ddpm.config")?)?)?;
        let schedule_config: ScheduleConfig = toml::from_str(ck.meta("ddpm.schedule")?)
            .map_err(|e| Error::Format(format!("ddpm.schedule: {e}")))?;
        let mut rng = RngStream::new(0, purpose::INIT);
        let expected = net.init_params(&mut rng)?;
        for (path, t) in expected.iter() {
            let got = ck.params.get(path).map_err(|_| {
                Error::Format(format!("ddpm checkpoint is missing parameter {path}"))
            })?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    format!("checkpoint parameter {path}"),
                    t.shape(),
                    got.shape(),
                ));
            }
        }
        let schedule = schedule_config.build()?;
        Ok(DdpmModel {
            net,
            params: ck.params.clone(),
            schedule_config,
            schedule,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Errors unless this denoiser consumes exactly the flow's `(y, z)`.
    pub fn check_compatible(&self, flow: &FlowModel) -> Result<()> {
        let (fc, dc) = (flow.flow.config(), self.net.config());
        if fc.y_shape() != dc.y_shape || fc.z_shape() != dc.z_shape {
            return Err(Error::Contract(format!(
                "denoiser expects y {:?} / z {:?} but the flow produces y {:?} / z {:?}",
                dc.y_shape,
                dc.z_shape,
                fc.y_shape(),
                fc.z_shape()
            )));
        }
        Ok(())
    }
}

/// Graph nodes of one flow-objective evaluation.
pub struct FlowLossTerms {
    /// Scalar batch-mean objective.
    pub loss: Var,
    /// `‖y − target‖²` per item, `[N]`.
    pub fit: Var,
    pub y: Var,
    pub z: Var,
    /// `[N]`
    pub logdet: Var,
}

/// Flow objective against an explicit measurement target (`target` has
/// the flow's `y` shape with a leading batch axis).
pub fn flow_loss_graph<R: Real>(
    g: &Graph<R>,
    b: &Bindings,
    flow: &CouplingFlow,
    x: &Tensor,
    target: &Tensor,
    sigma: f64,
) -> Result<FlowLossTerms> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let xs = flow.to_latent_layout(x)?;
    let (latent, logdet) = flow.forward_graph(g, b, g.constant(xs.cast()))?;
    let (y, z) = flow.split_graph(g, latent)?;
    if g.shape(y) != target.shape() {
        return Err(Error::shape(
            "measurement target",
            &g.shape(y),
            target.shape(),
        ));
    }
    let fit = g.sum_rows(g.square(g.sub(y, g.constant(target.cast()))?))?;
    let zsq = g.sum_rows(g.square(z))?;
    let per_item = g.sub(
        g.add(g.scale(fit, 0.5 / (sigma * sigma)), g.scale(zsq, 0.5))?,
        logdet,
    )?;
    Ok(FlowLossTerms {
        loss: g.mean_all(per_item),
        fit,
        y,
        z,
        logdet,
    })
}

/// The flow objective for a clean batch `x` with target `D(x)`.
pub fn flow_loss(
    flow: &CouplingFlow,
    params: &ParamStore,
    x: &Tensor,
    degradation: &DegradationOp,
    sigma: f64,
) -> Result<f32> {
    let target = degradation.apply(x)?;
    let g = Graph::<f32>::new();
    let b = Bindings::constants(&g, params);
    let terms = flow_loss_graph(&g, &b, flow, x, &target, sigma)?;
    g.value(terms.loss).item()
}

/// Draws flow-training inputs and their measurement targets.
///
/// With measurement dither the input is `x + σ·D⁺ξ` while the target stays
/// `D(x)`; otherwise the input is `x` itself.
pub struct FlowBatchSource<'a> {
    sampler: super::data::BatchSampler<'a>,
    degradation: DegradationOp,
    dither: Option<(crate::degradations::Pseudoinverse, RngStream)>,
    sigma: f64,
}

impl<'a> FlowBatchSource<'a> {
    pub fn new(cfg: &ExperimentConfig, data: &'a Dataset, stream_seed: u64) -> Result<Self> {
        let degradation = cfg.degradation()?;
        let dither = if cfg.problem.measurement_dither {
            let rng = RngStream::new(stream_seed, purpose::DEQUANT).substream(1);
            Some((degradation.pseudoinverse()?, rng))
        } else {
            None
        };
        Ok(FlowBatchSource {
            sampler: data.sampler(stream_seed),
            degradation,
            dither,
            sigma: cfg.training.sigma,
        })
    }

    /// `(input, target)`.
    pub fn next(&mut self, n: usize) -> Result<(Tensor, Tensor)> {
        let x = self.sampler.next_batch(n)?;
        let target = self.degradation.apply(&x)?;
        let input = match &mut self.dither {
            Some((pinv, rng)) => {
                let xi = rng.normal_tensor(target.shape());
                x.add(&pinv.apply(&xi.scale(self.sigma as f32))?)?
            }
            None => x,
        };
        Ok((input, target))
    }
}

fn mean_var(t: &Tensor) -> (f64, f64) {
    let n = t.len().max(1) as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var)
}

/// Per-layer parameter norms, for divergence reports.
fn layer_norms(flow: &CouplingFlow, params: &ParamStore) -> String {
    flow.layers()
        .iter()
        .map(|l| {
            let sub = params.subset(&format!("{}l{}/", crate::flow::PARAM_PREFIX, l.index));
            format!("l{}={:.3e}", l.index, sub.global_norm())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Result of a flow training run.
#[derive(Debug)]
pub struct FlowRun {
    pub model: FlowModel,
    pub log: MetricsLog,
}

/// Trains the degradation flow for `training.flow_iters` Adam steps.
///
/// With `out_dir` set, the metrics log is streamed to `flow_metrics.csv`
/// and the checkpoint `flow.ckpt` is rewritten at every logging interval
/// and at the end. A non-finite loss or gradient aborts with
/// [`Error::Diverged`], leaving the last good checkpoint on disk.
pub fn train_flow(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<FlowRun> {
    cfg.validate()?;
    data.check_nonempty()?;
    let flow_cfg = cfg.flow_config()?;
    if data.item_shape() != flow_cfg.input_shape {
        return Err(Error::Contract(format!(
            "dataset items have shape {:?} but the flow expects {:?}",
            data.item_shape(),
            flow_cfg.input_shape
        )));
    }
    let t = &cfg.training;
    let mut model = FlowModel::init(flow_cfg, cfg.degradation()?, t.sigma, t.seed)?;
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            MetricsLog::create(&d.join(FLOW_LOG), FLOW_COLUMNS)?
        }
        None => MetricsLog::in_memory(FLOW_COLUMNS),
    };
    let mut source = FlowBatchSource::new(cfg, data, t.seed)?;
    let mut params = model.params.clone();
    for iter in 1..=t.flow_iters {
        let (x, target) = source.next(t.batch_size)?;
        let mut stats = (0.0, 0.0, 0.0, 0.0);
        let step = grad(&params, |g, b| {
            let terms = flow_loss_graph(g, b, &model.flow, &x, &target, t.sigma)?;
            let n = x.batch_len() as f64;
            let ylen = target.len() as f64;
            stats.0 = g.value(terms.fit).sum() as f64 / ylen;
            stats.1 = g.value(terms.logdet).sum() as f64 / n;
            let (zm, zv) = mean_var(&g.value(terms.z));
            stats.2 = zm;
            stats.3 = zv;
            Ok(terms.loss)
        });
        let (loss, mut grads) = match step {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                return Err(Error::Diverged {
                    iter,
                    detail: format!(
                        "{e}; last logdet {:.4e}; layer norms {}",
                        stats.1,
                        layer_norms(&model.flow, &params)
                    ),
                })
            }
            Err(e) => return Err(e),
        };
        let gnorm = if t.clip_norm > 0.0 {
            clip_global_norm(&mut grads, t.clip_norm)
        } else {
            grads.global_norm()
        };
        let lr = t.lr_at(t.flow_lr, iter - 1, t.flow_iters);
        params = adam_step(&params, &grads, &t.adam(lr))?;
        if iter % t.log_every == 0 || iter == t.flow_iters {
            log.push(&[
                iter as f64,
                lr,
                loss as f64,
                stats.0,
                stats.1,
                stats.2,
                stats.3,
                gnorm,
            ])?;
            model.params = params.clone();
            if let Some(d) = out_dir {
                model.save(&d.join(FLOW_CHECKPOINT))?;
            }
        }
    }
    model.params = trainable_only(&params);
    if let Some(d) = out_dir {
        model.save(&d.join(FLOW_CHECKPOINT))?;
    }
    Ok(FlowRun { model, log })
}

/// Settings of a denoiser fitting loop.
#[derive(Clone, Debug)]
pub struct DenoiserFit {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub training: super::config::TrainingSection,
    pub seed: u64,
}

/// Generic ε-prediction training loop. `draw(n)` supplies `(z0, y)` for a
/// batch of `n` items.
pub fn fit_denoiser<F>(
    model: &mut DdpmModel,
    fit: &DenoiserFit,
    mut draw: F,
    log: &mut MetricsLog,
    mut checkpoint: impl FnMut(&DdpmModel) -> Result<()>,
) -> Result<()>
where
    F: FnMut(usize) -> Result<(Tensor, Tensor)>,
{
    let mut t_rng = RngStream::new(fit.seed, purpose::TIMESTEP);
    let mut eps_rng = RngStream::new(fit.seed, purpose::EPSILON);
    let mut params = model.params.clone();
    let mut ema: Option<f64> = None;
    let t = &fit.training;
    for iter in 1..=fit.iters {
        let (z0, y) = draw(fit.batch_size)?;
        let batch = draw_ddpm_batch(&z0, &model.schedule, &mut t_rng, &mut eps_rng)?;
        let step = grad(&params, |g, b| {
            ddpm_loss_graph(g, b, &model.net, &batch, &y)
        });
        let (loss, mut grads) = match step {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                return Err(Error::Diverged {
                    iter,
                    detail: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        };
        let gnorm = if t.clip_norm > 0.0 {
            clip_global_norm(&mut grads, t.clip_norm)
        } else {
            grads.global_norm()
        };
        let lr = t.lr_at(fit.lr, iter - 1, fit.iters);
        params = adam_step(&params, &grads, &t.adam(lr))?;
        let l = loss as f64;
        let e = match ema {
            Some(prev) => 0.98 * prev + 0.02 * l,
            None => l,
        };
        ema = Some(e);
        if iter % t.log_every == 0 || iter == fit.iters {
            log.push(&[iter as f64, lr, l, e, gnorm])?;
            model.params = params.clone();
            checkpoint(model)?;
        }
    }
    model.params = trainable_only(&params);
    Ok(())
}

/// Result of a diffusion training run.
#[derive(Debug)]
pub struct DdpmRun {
    pub model: DdpmModel,
    pub log: MetricsLog,
}

/// Trains the conditional denoiser on `(y, z) = f(x)` for clean data `x`
/// pushed through the frozen flow.
pub fn train_ddpm(
    cfg: &ExperimentConfig,
    flow: &FlowModel,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<DdpmRun> {
    cfg.validate()?;
    data.check_nonempty()?;
    let dcfg = cfg.denoiser_config()?;
    let t = &cfg.training;
    let mut model = DdpmModel::init(dcfg, cfg.schedule_config(), t.seed)?;
    model.check_compatible(flow)?;
    if data.item_shape() != flow.flow.config().input_shape {
        return Err(Error::Contract(format!(
            "dataset items have shape {:?} but the flow expects {:?}",
            data.item_shape(),
            flow.flow.config().input_shape
        )));
    }
    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            MetricsLog::create(&d.join(DDPM_LOG), DDPM_COLUMNS)?
        }
        None => MetricsLog::in_memory(DDPM_COLUMNS),
    };
    // A separate data stream from flow training, so the two phases do not
    // see identical batches.
    let mut sampler = data.sampler(t.seed ^ 0x5eed_d00d);
    let cached = match (cfg.diffusion.cache_latents, data) {
        (true, Dataset::Images(set)) => {
            let shape: Vec<usize> = std::iter::once(set.len())
                .chain(set.shape().iter().copied())
                .collect();
            let mut rng = RngStream::new(t.seed, purpose::DEQUANT).substream(2);
            let flat: Vec<u8> = set.items().concat();
            let x = crate::degradations::dequantize(&flat, &shape, &mut rng)?;
            let (pair, _) = flow.forward(&x)?;
            Some(pair)
        }
        _ => None,
    };
    let mut order = RngStream::new(t.seed, purpose::DATA_ORDER).substream(2);
    let fit = DenoiserFit {
        iters: t.ddpm_iters,
        batch_size: t.batch_size,
        lr: t.ddpm_lr,
        training: t.clone(),
        seed: t.seed,
    };
    let draw = |n: usize| -> Result<(Tensor, Tensor)> {
        match &cached {
            Some(pair) => {
                let idx: Vec<usize> = (0..n).map(|_| order.below(pair.batch_len())).collect();
                Ok((pair.z.select_rows(&idx)?, pair.y.select_rows(&idx)?))
            }
            None => {
                let x = sampler.next_batch(n)?;
                let (pair, _) = flow.forward(&x)?;
                Ok((pair.z, pair.y))
            }
        }
    };
    let save = |m: &DdpmModel| -> Result<()> {
        match out_dir {
            Some(d) => m.save(&d.join(DDPM_CHECKPOINT)),
            None => Ok(()),
        }
    };
    fit_denoiser(&mut model, &fit, draw, &mut log, save)?;
    save(&model)?;
    Ok(DdpmRun { model, log })
}

/// Both phases back to back.
pub fn train_all(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(FlowRun, DdpmRun)> {
    let flow = train_flow(cfg, data, out_dir)?;
    let ddpm = train_ddpm(cfg, &flow.model, data, out_dir)?;
    Ok((flow, ddpm))
}

/// The dataset implied by a vector config.
pub fn vector_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.problem.kind {
        ProblemKind::Vector => Ok(Dataset::Gaussian {
            dim: cfg.degradation()?.input_len(),
        }),
        ProblemKind::Image => Err(Error::Config("image problems need an image dataset".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
[problem]
kind = "vector"
[problem.degradation]
kind = "linear-matrix"
input_shape = [2]
matrix = [[0.5, 0.5]]
[flow]
layers = 2
hidden = 8
[diffusion]
steps = 50
hidden = 16
blocks = 1
embed_dim = 8
[training]
sigma = 1.0
batch_size = 32
flow_iters = 20
ddpm_iters = 20
log_every = 5
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn identity_flow_loss_matches_hand_computation() {
        let cfg = toy_cfg("");
        let model = FlowModel::init(
            cfg.flow_config().unwrap(),
            cfg.degradation().unwrap(),
            1.0,
            0,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let l = flow_loss(&model.flow, &model.params, &x, &model.degradation, 1.0).unwrap();
        assert!((l - 5.0).abs() < 1e-6, "{l}");
        for c in [-2.0f32, 0.5, 4.0] {
            let x = Tensor::from_vec(vec![1, 2], vec![c, c]).unwrap();
            let l = flow_loss(&model.flow, &model.params, &x, &model.degradation, 1.0).unwrap();
            assert!((l - c * c / 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn training_writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_cfg("");
        let data = vector_dataset(&cfg).unwrap();
        let (flow, ddpm) = train_all(&cfg, &data, Some(dir.path())).unwrap();
        assert_eq!(flow.log.rows().len(), 4);
        assert_eq!(ddpm.log.rows().len(), 4);
        let reloaded = FlowModel::load(&dir.path().join(FLOW_CHECKPOINT)).unwrap();
        assert_eq!(reloaded.params, flow.model.params);
        let reloaded = DdpmModel::load(&dir.path().join(DDPM_CHECKPOINT)).unwrap();
        assert_eq!(reloaded.params, ddpm.model.params);
        let text = std::fs::read_to_string(dir.path().join(FLOW_LOG)).unwrap();
        assert_eq!(text, flow.log.to_csv());
    }

    #[test]
    fn checkpoints_reject_the_wrong_kind() {
        let cfg = toy_cfg("");
        let flow = FlowModel::init(
            cfg.flow_config().unwrap(),
            cfg.degradation().unwrap(),
            1.0,
            0,
        )
        .unwrap();
        assert!(DdpmModel::from_checkpoint(&flow.to_checkpoint()).is_err());
        let back = FlowModel::from_checkpoint(&flow.to_checkpoint()).unwrap();
        assert_eq!(back.params, flow.params);
        assert_eq!(back.sigma, 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = toy_cfg("");
        assert!(train_flow(&cfg, &Dataset::Gaussian { dim: 0 }, None).is_err());
    }

    #[test]
    fn mismatched_denoiser_is_rejected() {
        let cfg = toy_cfg("");
        let flow = FlowModel::init(
            cfg.flow_config().unwrap(),
            cfg.degradation().unwrap(),
            1.0,
            0,
        )
        .unwrap();
        let mut dcfg = cfg.denoiser_config().unwrap();
        dcfg.z_shape = vec![3];
        let ddpm = DdpmModel::init(dcfg, cfg.schedule_config(), 0).unwrap();
        let err = ddpm.check_compatible(&flow).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[1]"), "{err}");
    }
}
