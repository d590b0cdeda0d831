//! The linear-Gaussian toy end to end: train the flow and denoiser on
//! `x ~ N(0, I)` with a linear `D`, sample the posterior at a measurement,
//! and compare with the closed form.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::rng::purpose;
use crate::numerics::{RngStream, Tensor};
use crate::oracle2d::{moments, LinearGaussianProblem};

use super::config::ExperimentConfig;
use super::data::Dataset;
use super::sample::sample_posterior;
use super::train::{train_ddpm, train_flow, DdpmModel, FlowBatchSource, FlowModel};

/// Default toy budget: iterations of flow and diffusion training.
pub const TOY_FLOW_ITERS: usize = 5000;
pub const TOY_DDPM_ITERS: usize = 5000;

/// Config for the toy with operator rows `d`.
pub fn toy_config(d: &[Vec<f64>], sigma: f64, seed: u64) -> Result<ExperimentConfig> {
    let n = d.first().map_or(0, |r| r.len());
    let rows: Vec<String> = d
        .iter()
        .map(|r| {
            let v: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", v.join(", "))
        })
        .collect();
    ExperimentConfig::from_toml(&format!(
        r#"
[problem]
kind = "vector"
measurement_dither = true

[problem.degradation]
kind = "linear-matrix"
input_shape = [{n}]
matrix = [{rows}]

[flow]
layers = 4
hidden = 32

[diffusion]
steps = 1000
hidden = 64
blocks = 2
embed_dim = 16

[training]
sigma = {sigma:?}
batch_size = 256
flow_iters = {TOY_FLOW_ITERS}
ddpm_iters = {TOY_DDPM_ITERS}
flow_lr = 0.003
ddpm_lr = 0.002
log_every = 100
eval_samples = 10000
seed = {seed}
"#,
        rows = rows.join(", ")
    ))
}

/// The oracle problem matching a vector config.
pub fn oracle_problem(cfg: &ExperimentConfig, y: &[f64]) -> Result<LinearGaussianProblem> {
    let a = cfg.degradation()?.matrix()?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = DMatrix::from_fn(m, n, |i, j| a.data()[i * n + j] as f64);
    LinearGaussianProblem::from_matrix(d, DVector::from_column_slice(y))
}

/// Moments of the learned pushforward `(y, z) = f(x̃)` on fresh training
/// inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Pushforward {
    /// Mean of `‖y − D(x)‖²` per item.
    pub fit_mse: f64,
    pub z_mean: Vec<f64>,
    pub z_var: Vec<f64>,
    /// Largest absolute correlation between any `y` and `z` coordinate.
    pub max_abs_corr_yz: f64,
}

pub fn pushforward(
    cfg: &ExperimentConfig,
    model: &FlowModel,
    n: usize,
    seed: u64,
) -> Result<Pushforward> {
    let data = Dataset::Gaussian {
        dim: model.degradation.input_len(),
    };
    let mut src = FlowBatchSource::new(cfg, &data, seed ^ 0xe7a1_0000)?;
    let (x, target) = src.next(n)?;
    let (pair, _) = model.forward(&x)?;
    let to_cols = |t: &Tensor| -> Vec<Vec<f64>> {
        let k = t.item_shape().iter().product();
        (0..k)
            .map(|j| (0..n).map(|i| t.data()[i * k + j] as f64).collect())
            .collect()
    };
    let (ys, zs) = (to_cols(&pair.y), to_cols(&pair.z));
    let fit_mse = pair
        .y
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n as f64;
    let mv = |c: &[f64]| {
        let m = c.iter().sum::<f64>() / n as f64;
        (m, c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64)
    };
    let mut max_corr: f64 = 0.0;
    for yc in &ys {
        let (ym, yv) = mv(yc);
        for zc in &zs {
            let (zm, zv) = mv(zc);
            let cov = yc
                .iter()
                .zip(zc)
                .map(|(a, b)| (a - ym) * (b - zm))
                .sum::<f64>()
                / n as f64;
            max_corr = max_corr.max((cov / (yv * zv).sqrt()).abs());
        }
    }
    let (z_mean, z_var) = zs.iter().map(|c| mv(c)).unzip();
    Ok(Pushforward {
        fit_mse,
        z_mean,
        z_var,
        max_abs_corr_yz: max_corr,
    })
}

/// Comparison of learned posterior samples with the closed form.
#[derive(Clone, Debug)]
pub struct ToyReport {
    pub sigma: f64,
    pub y: Vec<f64>,
    pub oracle_mean: Vec<f64>,
    pub oracle_var: Vec<f64>,
    pub sample_mean: Vec<f64>,
    pub sample_var: Vec<f64>,
    /// `D⁺y`.
    pub moore_penrose: Vec<f64>,
    /// Mean of `‖D x̂ − y‖²` over the samples.
    pub sample_residual: f64,
    pub nfe: usize,
    pub pushforward: Pushforward,
}

impl ToyReport {
    pub fn max_mean_error(&self) -> f64 {
        max_abs_diff(&self.sample_mean, &self.oracle_mean)
    }

    pub fn max_var_error(&self) -> f64 {
        max_abs_diff(&self.sample_var, &self.oracle_var)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sigma            {}", self.sigma);
        let _ = writeln!(s, "y                {:?}", self.y);
        let _ = writeln!(s, "moore-penrose    {:?}", self.moore_penrose);
        let _ = writeln!(s, "oracle mean      {:?}", self.oracle_mean);
        let _ = writeln!(s, "sample mean      {:?}", self.sample_mean);
        let _ = writeln!(s, "oracle variance  {:?}", self.oracle_var);
        let _ = writeln!(s, "sample variance  {:?}", self.sample_var);
        let _ = writeln!(s, "sample residual  {:.3e}", self.sample_residual);
        let _ = writeln!(s, "fit mse          {:.3e}", self.pushforward.fit_mse);
        let _ = writeln!(
            s,
            "z mean / var     {:?} / {:?}",
            self.pushforward.z_mean, self.pushforward.z_var
        );
        let _ = writeln!(
            s,
            "max |corr(y,z)|  {:.3}",
            self.pushforward.max_abs_corr_yz
        );
        let _ = writeln!(s, "nfe              {}", self.nfe);
        s
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Everything a toy run produces.
#[derive(Debug)]
pub struct ToyRun {
    pub flow: FlowModel,
    pub ddpm: DdpmModel,
    pub problem: LinearGaussianProblem,
    /// Learned posterior samples.
    pub samples: Vec<Vec<f64>>,
    pub report: ToyReport,
}

/// Posterior samples at `y` from trained models, compared with the oracle.
pub fn evaluate_toy(
    cfg: &ExperimentConfig,
    flow: &FlowModel,
    ddpm: &DdpmModel,
    y: &[f64],
    n_samples: usize,
    n_steps: usize,
) -> Result<(Vec<Vec<f64>>, ToyReport)> {
    let problem = oracle_problem(cfg, y)?;
    let m = y.len();
    let yb = Tensor::from_fn(vec![n_samples, m], |i| y[i % m] as f32);
    let seed = cfg.training.seed;
    let out = sample_posterior(&yb, flow, ddpm, n_steps, seed)?;
    let n = problem.dim();
    let samples: Vec<Vec<f64>> = (0..n_samples)
        .map(|i| {
            out.x.data()[i * n..(i + 1) * n]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let points: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| DVector::from_column_slice(s))
        .collect();
    let (mean, var) = moments(&points);
    let mut residual = 0.0;
    for s in &samples {
        residual += problem.feasibility_residual(s)?.powi(2);
    }
    let post = problem.posterior();
    let report = ToyReport {
        sigma: cfg.training.sigma,
        y: y.to_vec(),
        oracle_mean: post.mean.iter().copied().collect(),
        oracle_var: post.covariance.diagonal().iter().copied().collect(),
        sample_mean: mean.iter().copied().collect(),
        sample_var: var.iter().copied().collect(),
        moore_penrose: problem.moore_penrose_point().iter().copied().collect(),
        sample_residual: residual / n_samples as f64,
        nfe: out.nfe,
        pushforward: pushforward(cfg, flow, cfg.training.eval_samples, seed)?,
    };
    Ok((samples, report))
}

/// Trains both phases on the toy and evaluates at `y`.
pub fn run_toy(
    cfg: &ExperimentConfig,
    y: &[f64],
    n_samples: usize,
    n_steps: usize,
    out_dir: Option<&Path>,
) -> Result<ToyRun> {
    let data = Dataset::Gaussian {
        dim: cfg.degradation()?.input_len(),
    };
    let problem = oracle_problem(cfg, y)?;
    let flow = train_flow(cfg, &data, out_dir)?.model;
    let ddpm = train_ddpm(cfg, &flow, &data, out_dir)?.model;
    let (samples, report) = evaluate_toy(cfg, &flow, &ddpm, y, n_samples, n_steps)?;
    Ok(ToyRun {
        flow,
        ddpm,
        problem,
        samples,
        report,
    })
}

/// Measurement-fit error of flows trained at each `σ` with an otherwise
/// identical config; returns `(σ, E‖y − D(x)‖²)` pairs.
pub fn sigma_sweep(cfg: &ExperimentConfig, sigmas: &[f64]) -> Result<Vec<(f64, f64)>> {
    let data = Dataset::Gaussian {
        dim: cfg.degradation()?.input_len(),
    };
    sigmas
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.training.sigma = s;
            let model = train_flow(&c, &data, None)?.model;
            let p = pushforward(&c, &model, c.training.eval_samples, c.training.seed)?;
            Ok((s, p.fit_mse))
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Contract(
            "log-log fit needs at least two positive points".into(),
        ));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Writes the toy data file: one row per point, `kind,x1,...,xn` with kind
/// one of `feasibility` (points along `{x : Dx = y}`), `flow` (learned
/// posterior samples), `oracle` (exact posterior samples) and
/// `moore-penrose`.
pub fn write_toy_data(
    path: &Path,
    problem: &LinearGaussianProblem,
    samples: &[Vec<f64>],
    seed: u64,
) -> Result<()> {
    let n = problem.dim();
    let mut out = String::from("kind");
    for j in 1..=n {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    let mut row = |kind: &str, v: &[f64]| {
        out.push_str(kind);
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    };
    let mp = problem.moore_penrose_point();
    let proj = problem.kernel_projector();
    // A kernel direction: the projector's largest column.
    let dir = (0..n)
        .map(|j| proj.column(j).into_owned())
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or_else(|| DVector::zeros(n));
    let dir = if dir.norm() > 1e-12 {
        dir.normalize()
    } else {
        dir
    };
    for k in 0..=40 {
        let t = -4.0 + 0.2 * k as f64;
        let p = &mp + &dir * t;
        row("feasibility", p.as_slice());
    }
    for s in samples {
        row("flow", s);
    }
    let mut rng = RngStream::new(seed, purpose::EVAL);
    for s in problem.posterior_sampler(&mut rng, samples.len()) {
        row("oracle", s.as_slice());
    }
    row("moore-penrose", mp.as_slice());
    std::fs::write(path, out).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}
