//! Denoising diffusion over the kernel coordinates `z`.
//!
//! Timesteps are 1-based throughout: step `t` of a schedule with `T` steps
//! has noise variance `β_t`, `α_t = 1 − β_t` and `ᾱ_t = α_1 ⋯ α_t`. A
//! subsampled schedule keeps a strictly increasing subset of the original
//! steps; [`NoiseSchedule::timestep`] maps its step indices back to the
//! original ones, which is what the denoiser's time embedding sees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Activation, Conv, Dense, Init};
use crate::numerics::{Bindings, Graph, ParamStore, Real, RngStream, Tensor, Var};

/// Path prefix of every denoiser parameter.
pub const PARAM_PREFIX: &str = "ddpm/";

/// How the per-step sampling standard deviation `σ_t` is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaRule {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    PosteriorVariance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    lambdas: Vec<f64>,
    /// Original timestep of each step (identity unless subsampled).
    timesteps: Vec<usize>,
    sigma_rule: SigmaRule,
}

fn sigmas_for(rule: SigmaRule, betas: &[f64], alpha_bars: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .enumerate()
        .map(|(i, &b)| match rule {
            SigmaRule::Beta => b.sqrt(),
            SigmaRule::PosteriorVariance => {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (b * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            }
        })
        .collect()
}

impl NoiseSchedule {
    /// Schedule from explicit noise variances with unit loss weights.
    /// Requires `0 ≤ β_t < 1` and `β_1 > 0`.
    pub fn from_betas(betas: Vec<f64>, sigma_rule: SigmaRule) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config(
                "noise schedule needs at least one step".into(),
            ));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(betas[0] > 0.0) {
            return Err(Error::Config(format!(
                "noise variances must lie in [0, 1) with a positive first entry, got {betas:?}"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = sigmas_for(sigma_rule, &betas, &alpha_bars);
        let t = betas.len();
        Ok(NoiseSchedule {
            lambdas: vec![1.0; t],
            timesteps: (1..=t).collect(),
            betas,
            alphas,
            alpha_bars,
            sigmas,
            sigma_rule,
        })
    }

    pub fn with_loss_weight(mut self, lambda: f64) -> Self {
        self.lambdas.iter_mut().for_each(|l| *l = lambda);
        self
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn lambda(&self, t: usize) -> f64 {
        self.lambdas[t - 1]
    }

    /// Original timestep of step `t`.
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn sigma_rule(&self) -> SigmaRule {
        self.sigma_rule
    }
}

/// `β` interpolated linearly from `beta_1` to `beta_t` over `t` steps.
pub fn make_linear_schedule(t: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    make_linear_schedule_with(t, beta_1, beta_t, SigmaRule::Beta)
}

pub fn make_linear_schedule_with(
    t: usize,
    beta_1: f64,
    beta_t: f64,
    rule: SigmaRule,
) -> Result<NoiseSchedule> {
    if t == 0 || !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Config(format!(
            "linear schedule needs T >= 1 and 0 < beta_1 <= beta_T < 1, got T={t}, {beta_1}, {beta_t}"
        )));
    }
    let betas = (0..t)
        .map(|i| {
            if t == 1 {
                beta_1
            } else {
                beta_1 + (beta_t - beta_1) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas, rule)
}

/// Keeps `n` evenly spaced steps `t_k = ⌊k·T/n⌋`, `k = 1..=n` (so the last
/// kept step is `T`), with effective variances
/// `β'_k = 1 − ᾱ_{t_k} / ᾱ_{t_{k−1}}` that preserve `ᾱ` at every kept step.
pub fn subsample_schedule(s: &NoiseSchedule, n: usize) -> Result<NoiseSchedule> {
    let t = s.len();
    if n == 0 || n > t {
        return Err(Error::Contract(format!("cannot keep {n} of {t} steps")));
    }
    if n == t {
        return Ok(s.clone());
    }
    let kept: Vec<usize> = (1..=n).map(|k| k * t / n).collect();
    let mut betas = Vec::with_capacity(n);
    let mut prev = 1.0;
    for &tk in &kept {
        let ab = s.alpha_bar(tk);
        betas.push(1.0 - ab / prev);
        prev = ab;
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    // Copied rather than re-multiplied so kept marginals are bit-identical.
    let alpha_bars: Vec<f64> = kept.iter().map(|&tk| s.alpha_bar(tk)).collect();
    let sigmas = sigmas_for(s.sigma_rule, &betas, &alpha_bars);
    Ok(NoiseSchedule {
        lambdas: kept.iter().map(|&tk| s.lambda(tk)).collect(),
        timesteps: kept.iter().map(|&tk| s.timestep(tk)).collect(),
        betas,
        alphas,
        alpha_bars,
        sigmas,
        sigma_rule: s.sigma_rule,
    })
}

/// `z_t = √ᾱ_t z₀ + √(1 − ᾱ_t) ε` with one timestep per batch item.
pub fn forward_noise(z0: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if eps.shape() != z0.shape() {
        return Err(Error::shape("forward_noise ε", z0.shape(), eps.shape()));
    }
    let n = z0.batch_len();
    if t.len() != n {
        return Err(Error::shape("forward_noise timesteps", &[n], &[t.len()]));
    }
    let stride = z0.len() / n.max(1);
    let mut out = z0.data().to_vec();
    for (i, &ti) in t.iter().enumerate() {
        s.check(ti)?;
        let a = s.alpha_bar(ti).sqrt() as f32;
        let b = (1.0 - s.alpha_bar(ti)).sqrt() as f32;
        for (o, e) in out[i * stride..(i + 1) * stride]
            .iter_mut()
            .zip(&eps.data()[i * stride..(i + 1) * stride])
        {
            *o = a * *o + b * e;
        }
    }
    Tensor::new(z0.shape().to_vec(), out)
}

/// Mean of the reverse transition,
/// `μ = (z_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t`, for one shared step.
pub fn reverse_mean(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check(t)?;
    if eps_pred.shape() != z_t.shape() {
        return Err(Error::shape(
            "reverse_step ε̂",
            z_t.shape(),
            eps_pred.shape(),
        ));
    }
    let coef = (s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt()) as f32;
    let inv = (1.0 / s.alpha(t).sqrt()) as f32;
    z_t.zip_map(eps_pred, |z, e| inv * (z - coef * e))
}

/// One ancestral step `z_{t−1} ~ N(μ, σ_t² I)`; the noise is suppressed at
/// `t = 1`. Item `i` draws its noise from `rngs[i]`.
pub fn reverse_step(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    rngs: &mut [RngStream],
) -> Result<Tensor> {
    let mut mu = reverse_mean(z_t, eps_pred, t, s)?;
    let sigma = if t == 1 { 0.0 } else { s.sigma(t) };
    if sigma > 0.0 {
        let n = mu.batch_len();
        if rngs.len() != n {
            return Err(Error::shape("reverse_step streams", &[n], &[rngs.len()]));
        }
        let stride = mu.len() / n.max(1);
        for (chunk, rng) in mu.data_mut().chunks_mut(stride).zip(rngs.iter_mut()) {
            for v in chunk {
                *v += (sigma * rng.normal()) as f32;
            }
        }
    }
    mu.check_finite(|| format!("reverse step {t}"))?;
    Ok(mu)
}

/// Anything that predicts the noise in `z_t` given the measurement and the
/// original timestep of every item, together with that step's `ᾱ`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, y: &Tensor, t: &[usize], alpha_bar: &[f64]) -> Result<Tensor>;
}

/// Result of [`ancestral_sample`].
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub z0: Tensor,
    /// Denoiser evaluations performed.
    pub nfe: usize,
}

/// Draws `z_T ~ N(0, I)` and runs every step of `s` down to `z_0`.
/// Item `i` uses only `rngs[i]`, so results do not depend on how inputs
/// are batched.
pub fn ancestral_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    y: &Tensor,
    z_item_shape: &[usize],
    s: &NoiseSchedule,
    rngs: &mut [RngStream],
) -> Result<SampleOutput> {
    let n = y.batch_len();
    if rngs.len() != n {
        return Err(Error::shape("sampling streams", &[n], &[rngs.len()]));
    }
    let stride: usize = z_item_shape.iter().product();
    let mut data = Vec::with_capacity(n * stride);
    for rng in rngs.iter_mut() {
        data.extend((0..stride).map(|_| rng.normal() as f32));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(z_item_shape);
    let mut z = Tensor::new(shape, data)?;
    let mut nfe = 0;
    for t in (1..=s.len()).rev() {
        let ts = vec![s.timestep(t); n];
        let eps = predictor.predict(&z, y, &ts, &vec![s.alpha_bar(t); n])?;
        nfe += 1;
        z = reverse_step(&z, &eps, t, s, rngs)?;
    }
    Ok(SampleOutput { z0: z, nfe })
}

/// Schedule hyperparameters as stored in configs and checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma: SigmaRule,
    #[serde(default = "one")]
    pub loss_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: SigmaRule::Beta,
            loss_weight: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if !(self.loss_weight > 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "loss weight must be positive, got {}",
                self.loss_weight
            )));
        }
        Ok(
            make_linear_schedule_with(self.steps, self.beta_start, self.beta_end, self.sigma)?
                .with_loss_weight(self.loss_weight),
        )
    }
}

/// Denoiser structure as stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Item shape of `z`: `[d]` or `[C_z, h, w]`.
    pub z_shape: Vec<usize>,
    /// Item shape of the conditioning `y`: `[m]` or `[C_y, h, w]`.
    pub y_shape: Vec<usize>,
    pub hidden: usize,
    /// Residual blocks (dense) or convolutions per resolution (images).
    pub blocks: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Add `√(1 − ᾱ_t)·z_t`, the exact noise prediction for `z₀ ~ N(0, I)`,
    /// to the network output so the network learns only the correction.
    #[serde(default = "yes")]
    pub prior_skip: bool,
}

fn yes() -> bool {
    true
}

impl DenoiserConfig {
    pub fn vector(z_dim: usize, y_dim: usize) -> Self {
        DenoiserConfig {
            z_shape: vec![z_dim],
            y_shape: vec![y_dim],
            hidden: 64,
            blocks: 2,
            embed_dim: 32,
            activation: Activation::Silu,
            prior_skip: true,
        }
    }

    pub fn image(z_shape: &[usize], y_shape: &[usize]) -> Self {
        DenoiserConfig {
            z_shape: z_shape.to_vec(),
            y_shape: y_shape.to_vec(),
            hidden: 64,
            blocks: 2,
            embed_dim: 32,
            activation: Activation::Silu,
            prior_skip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match (self.z_shape.as_slice(), self.y_shape.as_slice()) {
            (&[d], &[_]) => d > 0,
            (&[c, h, w], &[_, yh, yw]) => {
                if (h, w) != (yh, yw) {
                    return Err(Error::Config(format!(
                        "denoiser z grid {h}x{w} differs from y grid {yh}x{yw}"
                    )));
                }
                c > 0 && h % 2 == 0 && w % 2 == 0
            }
            _ => false,
        };
        if !ok || self.hidden == 0 || self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "unsupported denoiser shapes z={:?} y={:?} (hidden {}, embed {})",
                self.z_shape, self.y_shape, self.hidden, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("denoiser config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: DenoiserConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("denoiser config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
enum Body {
    /// `[z, y] -> hidden`, residual blocks, `hidden -> z`.
    Dense {
        input: Dense,
        time: Dense,
        blocks: Vec<(Dense, Dense)>,
        output: Dense,
    },
    /// Two-resolution encoder-decoder on the measurement grid.
    Conv {
        time_hi: Dense,
        time_lo: Dense,
        enc_hi: Vec<Conv>,
        enc_lo: Vec<Conv>,
        dec: Vec<Conv>,
    },
}

/// The conditional noise predictor `ε_θ(z_t, y, t)`.
///
/// `y` is concatenated to `z_t` along the feature/channel axis and the
/// sinusoidal embedding of `t`, projected by a learned linear map, is added
/// to the hidden activations. The output layer starts at zero, so with
/// `prior_skip` a fresh denoiser predicts `ε̂ = √(1 − ᾱ_t)·z_t`: exact when
/// the latents are standard normal, which is what the flow is trained to
/// produce. Without the skip the network must learn that near-identity map
/// itself, and small errors at large `t` are amplified by the `1/√α_t`
/// factors of the reverse chain.
#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    body: Body,
}

fn name(s: &str) -> String {
    format!("{PARAM_PREFIX}{s}")
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let e = cfg.embed_dim;
        let body = match (cfg.z_shape.as_slice(), cfg.y_shape.as_slice()) {
            (&[d], &[m]) => Body::Dense {
                input: Dense::new(name("in"), d + m, h),
                time: Dense::new(name("time"), e, h),
                blocks: (0..cfg.blocks)
                    .map(|i| {
                        (
                            Dense::new(name(&format!("b{i}/fc0")), h, h),
                            Dense::new(name(&format!("b{i}/fc1")), h, h),
                        )
                    })
                    .collect(),
                output: Dense::new(name("out"), h, d),
            },
            (&[cz, _, _], &[cy, _, _]) => {
                let convs = |prefix: &str, first_in: usize, out: usize| -> Vec<Conv> {
                    (0..cfg.blocks.max(1))
                        .map(|i| {
                            let cin = if i == 0 { first_in } else { out };
                            Conv::new(name(&format!("{prefix}{i}")), cin, out, 3)
                        })
                        .collect()
                };
                let mut dec = convs("dec", 3 * h, h);
                dec.push(Conv::new(name("out"), h, cz, 3));
                Body::Conv {
                    time_hi: Dense::new(name("time_hi"), e, h),
                    time_lo: Dense::new(name("time_lo"), e, 2 * h),
                    enc_hi: convs("hi", cz + cy, h),
                    enc_lo: convs("lo", h, 2 * h),
                    dec,
                }
            }
            _ => unreachable!("validated shapes"),
        };
        Ok(Denoiser { cfg, body })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Fresh parameters; the output layer is zero so the initial
    /// prediction is `ε̂ = 0`.
    pub fn init_params(&self, rng: &mut RngStream) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        match &self.body {
            Body::Dense {
                input,
                time,
                blocks,
                output,
            } => {
                input.init(&mut s, rng, Init::DEFAULT)?;
                time.init(&mut s, rng, Init::DEFAULT)?;
                for (a, b) in blocks {
                    a.init(&mut s, rng, Init::DEFAULT)?;
                    b.init(&mut s, rng, Init::DEFAULT)?;
                }
                output.init(&mut s, rng, Init::Zero)?;
            }
            Body::Conv {
                time_hi,
                time_lo,
                enc_hi,
                enc_lo,
                dec,
            } => {
                time_hi.init(&mut s, rng, Init::DEFAULT)?;
                time_lo.init(&mut s, rng, Init::DEFAULT)?;
                for c in enc_hi
                    .iter()
                    .chain(enc_lo)
                    .chain(dec.iter().take(dec.len() - 1))
                {
                    c.init(&mut s, rng, Init::DEFAULT)?;
                }
                dec.last()
                    .expect("output conv")
                    .init(&mut s, rng, Init::Zero)?;
            }
        }
        Ok(s)
    }

    /// `ε̂` for a batch inside a graph. `t` holds original timesteps and
    /// `alpha_bar` the matching `ᾱ` per item.
    pub fn forward_graph<R: Real>(
        &self,
        g: &Graph<R>,
        b: &Bindings,
        z_t: Var,
        y: Var,
        t: &[usize],
        alpha_bar: &[f64],
    ) -> Result<Var> {
        let n = g.shape(z_t)[0];
        if t.len() != n || alpha_bar.len() != n || g.shape(y)[0] != n {
            return Err(Error::shape(
                "denoiser batch",
                &[n],
                &[t.len(), alpha_bar.len(), g.shape(y)[0]],
            ));
        }
        let body = self.body_graph(g, b, z_t, y, t)?;
        if !self.cfg.prior_skip {
            return Ok(body);
        }
        let zs = g.shape(z_t);
        let stride: usize = zs[1..].iter().product();
        let coef = Tensor::<R>::from_fn(zs, |i| R::of((1.0 - alpha_bar[i / stride]).sqrt()));
        g.add(body, g.mul(z_t, g.constant(coef))?)
    }

    fn body_graph<R: Real>(
        &self,
        g: &Graph<R>,
        b: &Bindings,
        z_t: Var,
        y: Var,
        t: &[usize],
    ) -> Result<Var> {
        let n = g.shape(z_t)[0];
        let act = self.cfg.activation;
        let emb = g.constant(timestep_embedding(t, self.cfg.embed_dim).cast::<R>());
        match &self.body {
            Body::Dense {
                input,
                time,
                blocks,
                output,
            } => {
                let x = g.concat(&[z_t, y], 1)?;
                let mut h = g.add(input.forward(g, b, x)?, time.forward(g, b, emb)?)?;
                for (fc0, fc1) in blocks {
                    let r = fc0.forward(g, b, act.apply(g, h))?;
                    let r = fc1.forward(g, b, act.apply(g, r))?;
                    h = g.add(h, r)?;
                }
                output.forward(g, b, act.apply(g, h))
            }
            Body::Conv {
                time_hi,
                time_lo,
                enc_hi,
                enc_lo,
                dec,
            } => {
                let per_channel = |d: &Dense| -> Result<Var> {
                    let v = d.forward(g, b, emb)?;
                    g.reshape(v, &[n, d.fan_out, 1, 1])
                };
                let mut h = g.concat(&[z_t, y], 1)?;
                for (i, c) in enc_hi.iter().enumerate() {
                    h = c.forward(g, b, h)?;
                    if i == 0 {
                        h = g.add(h, per_channel(time_hi)?)?;
                    }
                    h = act.apply(g, h);
                }
                let skip = h;
                let mut l = g.avg_pool2d(h, 2)?;
                for (i, c) in enc_lo.iter().enumerate() {
                    l = c.forward(g, b, l)?;
                    if i == 0 {
                        l = g.add(l, per_channel(time_lo)?)?;
                    }
                    l = act.apply(g, l);
                }
                let mut d = g.concat(&[skip, g.upsample_nearest2d(l, 2)?], 1)?;
                let last = dec.len() - 1;
                for (i, c) in dec.iter().enumerate() {
                    d = c.forward(g, b, d)?;
                    if i < last {
                        d = act.apply(g, d);
                    }
                }
                Ok(d)
            }
        }
    }

    /// Binds parameters for inference.
    pub fn bind<'a>(&'a self, params: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, params }
    }
}

/// A [`Denoiser`] with fixed parameters.
pub struct BoundDenoiser<'a> {
    net: &'a Denoiser,
    params: &'a ParamStore,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, z_t: &Tensor, y: &Tensor, t: &[usize], alpha_bar: &[f64]) -> Result<Tensor> {
        let g = Graph::<f32>::new();
        let b = Bindings::constants(&g, self.params);
        let out = self.net.forward_graph(
            &g,
            &b,
            g.constant(z_t.clone()),
            g.constant(y.clone()),
            t,
            alpha_bar,
        )?;
        let v = (*g.value(out)).clone();
        v.check_finite(|| "denoiser output".into())?;
        Ok(v)
    }
}

/// The random draws behind one evaluation of the training objective.
#[derive(Clone, Debug)]
pub struct DdpmBatch {
    pub z_t: Tensor,
    pub eps: Tensor,
    /// Step index per item (into the training schedule).
    pub t: Vec<usize>,
    /// Original timestep per item (what the embedding sees).
    pub timesteps: Vec<usize>,
    /// `ᾱ` per item.
    pub alpha_bar: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Draws `t ~ U{1..T}` from `t_rng` and `ε ~ N(0, I)` from `eps_rng`, and
/// corrupts `z0` accordingly.
pub fn draw_ddpm_batch(
    z0: &Tensor,
    s: &NoiseSchedule,
    t_rng: &mut RngStream,
    eps_rng: &mut RngStream,
) -> Result<DdpmBatch> {
    let n = z0.batch_len();
    let t: Vec<usize> = (0..n).map(|_| 1 + t_rng.below(s.len())).collect();
    let eps = eps_rng.normal_tensor(z0.shape());
    let z_t = forward_noise(z0, &t, &eps, s)?;
    Ok(DdpmBatch {
        timesteps: t.iter().map(|&k| s.timestep(k)).collect(),
        alpha_bar: t.iter().map(|&k| s.alpha_bar(k)).collect(),
        lambda: t.iter().map(|&k| s.lambda(k)).collect(),
        z_t,
        eps,
        t,
    })
}

/// `mean_i λ_{t_i} ‖ε_θ(z_t, y, t)_i − ε_i‖²` inside a graph.
pub fn ddpm_loss_graph<R: Real>(
    g: &Graph<R>,
    b: &Bindings,
    net: &Denoiser,
    batch: &DdpmBatch,
    y: &Tensor,
) -> Result<Var> {
    let n = batch.t.len();
    let pred = net.forward_graph(
        g,
        b,
        g.constant(batch.z_t.cast()),
        g.constant(y.cast()),
        &batch.timesteps,
        &batch.alpha_bar,
    )?;
    let diff = g.sub(pred, g.constant(batch.eps.cast()))?;
    let per_item = g.sum_rows(g.square(diff))?;
    let lambda = g.constant(Tensor::<R>::from_fn(vec![n], |i| R::of(batch.lambda[i])));
    Ok(g.mean_all(g.mul(per_item, lambda)?))
}

/// One stochastic evaluation of the training objective.
pub fn ddpm_loss(
    z0: &Tensor,
    y: &Tensor,
    net: &Denoiser,
    params: &ParamStore,
    s: &NoiseSchedule,
    t_rng: &mut RngStream,
    eps_rng: &mut RngStream,
) -> Result<f32> {
    let batch = draw_ddpm_batch(z0, s, t_rng, eps_rng)?;
    let g = Graph::<f32>::new();
    let b = Bindings::constants(&g, params);
    let loss = ddpm_loss_graph(&g, &b, net, &batch, y)?;
    g.value(loss).item()
}
