//! Invertible coupling flows `f: X <-> Y x Z`.
//!
//! # Latent layout
//!
//! Image inputs `[C, H, W]` are first squeezed by the scale `s` into
//! `[s²C, H/s, W/s]`; input pixel `(c, i, j)` lands in channel
//! `((i mod s)·s + (j mod s))·C + c` at position `(i / s, j / s)`. After the
//! coupling stack the first `C` channels are `y` (shaped like the
//! low-resolution measurement) and the remaining `(s² − 1)C` channels are
//! `z`. Vector inputs `[n]` are not squeezed; the first `m` coordinates are
//! `y` and the remaining `n − m` are `z`. This mapping is versioned by
//! [`LATENT_LAYOUT_VERSION`] in checkpoint headers.
//!
//! # Coupling layers
//!
//! Each layer splits its input with a binary mask into `u` (mask = 1) and
//! `v` (mask = 0) and applies
//!
//! ```text
//! u' = exp(ψ̃(v))·u + φ(v)
//! v' = exp(ρ̃(u'))·v + η(u')
//! ```
//!
//! with `ψ̃ = c·tanh(ψ/c)` and likewise for `ρ`. One subnet produces
//! `(ψ, φ)` and another `(ρ, η)`; their final layers start at zero so a
//! fresh flow is the identity. Layer `l` uses the checkerboard partition
//! when `l` is even and the channel split when odd, and the roles of the
//! two halves swap every second layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv, ConvStack, Init, Mlp};
use crate::numerics::{Bindings, Graph, ParamStore, Real, RngStream, Tensor, Var};

/// Version of the `(y, z)` index mapping documented above.
pub const LATENT_LAYOUT_VERSION: u32 = 1;

/// Path prefix of every flow parameter.
pub const PARAM_PREFIX: &str = "flow/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Checkerboard,
    ChannelSplit,
}

/// Which partitions the layers use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionOrder {
    /// Checkerboard, channel split, checkerboard, ...
    #[default]
    Alternate,
    Checkerboard,
    ChannelSplit,
}

impl PartitionOrder {
    fn at(self, layer: usize) -> Partition {
        match self {
            PartitionOrder::Alternate if layer.is_multiple_of(2) => Partition::Checkerboard,
            PartitionOrder::Alternate => Partition::ChannelSplit,
            PartitionOrder::Checkerboard => Partition::Checkerboard,
            PartitionOrder::ChannelSplit => Partition::ChannelSplit,
        }
    }
}

/// Everything needed to rebuild a flow's structure; stored in checkpoint
/// headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// `[n]` for vectors, `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    /// Squeeze factor; must be 1 for vectors.
    pub scale: usize,
    /// Number of `y` coordinates (vectors only; images use `C` channels).
    pub y_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub activation: Activation,
    pub partition: PartitionOrder,
}

impl FlowConfig {
    pub fn vector(n: usize, y_dim: usize) -> Self {
        FlowConfig {
            input_shape: vec![n],
            scale: 1,
            y_dim,
            layers: 8,
            hidden: 64,
            clamp: 2.0,
            activation: Activation::Tanh,
            partition: PartitionOrder::Alternate,
        }
    }

    pub fn image(channels: usize, height: usize, width: usize, scale: usize) -> Self {
        FlowConfig {
            input_shape: vec![channels, height, width],
            scale,
            y_dim: channels,
            layers: 8,
            hidden: 64,
            clamp: 2.0,
            activation: Activation::Relu,
            partition: PartitionOrder::Alternate,
        }
    }

    pub fn is_image(&self) -> bool {
        self.input_shape.len() == 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad(format!("flow clamp must be positive, got {}", self.clamp));
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("flow needs at least one layer and one hidden unit".into());
        }
        match self.input_shape.as_slice() {
            &[n] => {
                if self.scale != 1 {
                    return bad("vector flows take scale 1".into());
                }
                if self.y_dim == 0 || self.y_dim >= n {
                    return bad(format!("y_dim must be in 1..{n}, got {}", self.y_dim));
                }
            }
            &[c, h, w] => {
                let s = self.scale;
                if s < 2 || c == 0 || h % s != 0 || w % s != 0 {
                    return bad(format!(
                        "scale {s} must be >= 2 and divide the spatial shape {h}x{w}"
                    ));
                }
                if self.y_dim != c {
                    return bad(format!("image flows use y_dim = channels = {c}"));
                }
            }
            other => {
                return bad(format!(
                    "flow input shape must be [n] or [C, H, W], got {other:?}"
                ))
            }
        }
        Ok(())
    }

    /// Item shape after squeezing.
    pub fn latent_shape(&self) -> Vec<usize> {
        match self.input_shape.as_slice() {
            &[c, h, w] => {
                let s = self.scale;
                vec![s * s * c, h / s, w / s]
            }
            other => other.to_vec(),
        }
    }

    /// Item shape of `y`.
    pub fn y_shape(&self) -> Vec<usize> {
        let mut s = self.latent_shape();
        s[0] = self.y_dim;
        s
    }

    /// Item shape of `z`.
    pub fn z_shape(&self) -> Vec<usize> {
        let mut s = self.latent_shape();
        s[0] -= self.y_dim;
        s
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flow config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: FlowConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("flow config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn leading(n: usize, item: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(item.len() + 1);
    s.push(n);
    s.extend_from_slice(item);
    s
}

/// `[N, C, H, W] -> [N, s²C, H/s, W/s]`; see the module docs for the order.
pub fn squeeze(x: &Tensor, s: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Contract(format!(
            "squeeze needs [N, C, H, W], got {:?}",
            x.shape()
        )));
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Contract(format!(
            "factor {s} does not divide {h}x{w}"
        )));
    }
    let (oh, ow, oc) = (h / s, w / s, s * s * c);
    let mut out = vec![0.0f32; x.len()];
    let src = x.data();
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let ch = ((i % s) * s + j % s) * c + ci;
                    out[((b * oc + ch) * oh + i / s) * ow + j / s] =
                        src[((b * c + ci) * h + i) * w + j];
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze(x: &Tensor, s: usize) -> Result<Tensor> {
    let &[n, oc, oh, ow] = x.shape() else {
        return Err(Error::Contract(format!(
            "unsqueeze needs [N, C, H, W], got {:?}",
            x.shape()
        )));
    };
    if s == 0 || oc % (s * s) != 0 {
        return Err(Error::Contract(format!(
            "{oc} channels not divisible by {s}²"
        )));
    }
    let (c, h, w) = (oc / (s * s), oh * s, ow * s);
    let mut out = vec![0.0f32; x.len()];
    let src = x.data();
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let ch = ((i % s) * s + j % s) * c + ci;
                    out[((b * c + ci) * h + i) * w + j] =
                        src[((b * oc + ch) * oh + i / s) * ow + j / s];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// The `(y, z)` factorization of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    /// `[N, ...y_shape]`
    pub y: Tensor,
    /// `[N, ...z_shape]`
    pub z: Tensor,
}

impl LatentPair {
    pub fn batch_len(&self) -> usize {
        self.y.batch_len()
    }
}

#[derive(Clone, Debug)]
enum Subnet {
    Dense(Mlp),
    Conv(ConvStack),
}

impl Subnet {
    fn init(&self, store: &mut ParamStore, rng: &mut RngStream, last: Init) -> Result<()> {
        match self {
            Subnet::Dense(m) => m.init(store, rng, last),
            Subnet::Conv(c) => c.init(store, rng, last),
        }
    }

    fn forward<R: Real>(&self, g: &Graph<R>, b: &Bindings, x: Var) -> Result<Var> {
        match self {
            Subnet::Dense(m) => m.forward(g, b, x),
            Subnet::Conv(c) => c.forward(g, b, x),
        }
    }
}

/// One affine coupling layer.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub index: usize,
    pub partition: Partition,
    /// Whether the roles of the two mask halves are swapped.
    pub flipped: bool,
    pub clamp: f64,
    /// 1 on `u`, 0 on `v`; shape `[1, ...latent_shape]`.
    mask: Tensor,
    /// Produces `(ψ, φ)` from `v`.
    net_u: Subnet,
    /// Produces `(ρ, η)` from `u'`.
    net_v: Subnet,
}

fn partition_mask(shape: &[usize], partition: Partition, flipped: bool) -> Tensor {
    let on = |i: usize| -> bool {
        match (partition, shape) {
            (Partition::Checkerboard, &[_, h, w]) => {
                let p = i % (h * w);
                (p / w + p % w).is_multiple_of(2)
            }
            (Partition::Checkerboard, _) => i.is_multiple_of(2),
            (Partition::ChannelSplit, &[c, h, w]) => i / (h * w) < c.div_ceil(2),
            (Partition::ChannelSplit, _) => i < shape[0].div_ceil(2),
        }
    };
    Tensor::from_fn(
        leading(1, shape),
        |i| if on(i) != flipped { 1.0 } else { 0.0 },
    )
}

struct Affine {
    log_scale: Var,
    shift: Var,
}

impl CouplingLayer {
    fn new(cfg: &FlowConfig, index: usize) -> Self {
        let partition = cfg.partition.at(index);
        let flipped = (index / 2) % 2 == 1;
        let shape = cfg.latent_shape();
        let mask = partition_mask(&shape, partition, flipped);
        let name = |half: &str| format!("{PARAM_PREFIX}l{index}/{half}");
        let subnet = |half: &str| match *shape.as_slice() {
            [n] => Subnet::Dense(Mlp::new(
                &name(half),
                &[n, cfg.hidden, cfg.hidden, 2 * n],
                cfg.activation,
            )),
            [c, _, _] => Subnet::Conv(ConvStack::new(
                vec![
                    Conv::new(format!("{}/c0", name(half)), c, cfg.hidden, 3),
                    Conv::new(format!("{}/c1", name(half)), cfg.hidden, cfg.hidden, 1),
                    Conv::new(format!("{}/c2", name(half)), cfg.hidden, 2 * c, 3),
                ],
                cfg.activation,
            )),
            _ => unreachable!("validated shape"),
        };
        CouplingLayer {
            index,
            partition,
            flipped,
            clamp: cfg.clamp,
            mask,
            net_u: subnet("u"),
            net_v: subnet("v"),
        }
    }

    /// The `u` mask (1 on `u`, 0 on `v`), shape `[1, ...latent_shape]`.
    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    fn masks<R: Real>(&self, g: &Graph<R>) -> (Var, Var) {
        let m = self.mask.cast::<R>();
        let inv = m.map(|v| R::one() - v);
        (g.constant(m), g.constant(inv))
    }

    /// Runs `net` on `input` and returns the clamped log-scale and shift,
    /// both zeroed outside `target`.
    fn affine<R: Real>(
        &self,
        g: &Graph<R>,
        b: &Bindings,
        net: &Subnet,
        input: Var,
        target: Var,
    ) -> Result<Affine> {
        let out = net.forward(g, b, input)?;
        let half = g.shape(out)[1] / 2;
        let raw_scale = g.slice(out, 1, 0, half)?;
        let raw_shift = g.slice(out, 1, half, half)?;
        let log_scale = g.mul(g.soft_clamp(raw_scale, self.clamp), target)?;
        let shift = g.mul(raw_shift, target)?;
        if !g.value(log_scale).is_finite() || !g.value(shift).is_finite() {
            return Err(Error::NonFinite(format!(
                "subnet output of coupling layer {}",
                self.index
            )));
        }
        Ok(Affine { log_scale, shift })
    }

    /// Forward pass on a batch `[N, ...latent_shape]`; returns the output
    /// and the per-item log-determinant `[N]`.
    pub fn forward<R: Real>(&self, g: &Graph<R>, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let (mu, mv) = self.masks(g);
        let first = self.affine(g, b, &self.net_u, g.mul(x, mv)?, mu)?;
        let x1 = g.add(g.mul(x, g.exp(first.log_scale))?, first.shift)?;
        let second = self.affine(g, b, &self.net_v, g.mul(x1, mu)?, mv)?;
        let x2 = g.add(g.mul(x1, g.exp(second.log_scale))?, second.shift)?;
        let logdet = g.add(g.sum_rows(first.log_scale)?, g.sum_rows(second.log_scale)?)?;
        Ok((x2, logdet))
    }

    /// Exact inverse of [`CouplingLayer::forward`].
    pub fn inverse<R: Real>(&self, g: &Graph<R>, b: &Bindings, x2: Var) -> Result<Var> {
        let (mu, mv) = self.masks(g);
        let second = self.affine(g, b, &self.net_v, g.mul(x2, mu)?, mv)?;
        let x1 = g.mul(g.sub(x2, second.shift)?, g.exp(g.neg(second.log_scale)))?;
        let first = self.affine(g, b, &self.net_u, g.mul(x1, mv)?, mu)?;
        g.mul(g.sub(x1, first.shift)?, g.exp(g.neg(first.log_scale)))
    }
}

/// A single-scale stack of coupling layers behind a squeeze.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    cfg: FlowConfig,
    layers: Vec<CouplingLayer>,
}

impl CouplingFlow {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| CouplingLayer::new(&cfg, l))
            .collect();
        Ok(CouplingFlow { cfg, layers })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Fresh parameters with the final layer of every subnet set by
    /// `last`; [`Init::Zero`] makes the flow the identity.
    pub fn init_params(&self, rng: &mut RngStream, last: Init) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for l in &self.layers {
            l.net_u.init(&mut store, rng, last)?;
            l.net_v.init(&mut store, rng, last)?;
        }
        Ok(store)
    }

    fn check_batch(&self, x: &Tensor, item: &[usize], what: &str) -> Result<usize> {
        if x.ndim() != item.len() + 1 || x.item_shape() != item {
            return Err(Error::shape(what, &leading(x.batch_len(), item), x.shape()));
        }
        Ok(x.batch_len())
    }

    /// Squeezes a batch of inputs into the latent layout (identity for
    /// vectors).
    pub fn to_latent_layout(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x, &self.cfg.input_shape, "flow input")?;
        if self.cfg.is_image() {
            squeeze(x, self.cfg.scale)
        } else {
            Ok(x.clone())
        }
    }

    fn undo_latent_layout(&self, x: &Tensor) -> Result<Tensor> {
        if self.cfg.is_image() {
            unsqueeze(x, self.cfg.scale)
        } else {
            Ok(x.clone())
        }
    }

    /// Coupling stack on an already squeezed batch: returns the combined
    /// latent `[N, ...latent_shape]` and log-determinant `[N]`.
    pub fn forward_graph<R: Real>(&self, g: &Graph<R>, b: &Bindings, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let mut logdet: Option<Var> = None;
        for l in &self.layers {
            let (next, ld) = l.forward(g, b, h)?;
            h = next;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        let logdet = match logdet {
            Some(v) => v,
            None => g.constant(Tensor::zeros(vec![g.shape(x)[0]])),
        };
        Ok((h, logdet))
    }

    /// Splits a combined latent into `(y, z)` inside a graph.
    pub fn split_graph<R: Real>(&self, g: &Graph<R>, latent: Var) -> Result<(Var, Var)> {
        let total = self.cfg.latent_shape()[0];
        let y = g.slice(latent, 1, 0, self.cfg.y_dim)?;
        let z = g.slice(latent, 1, self.cfg.y_dim, total - self.cfg.y_dim)?;
        Ok((y, z))
    }

    /// Inverse coupling stack on a combined latent inside a graph.
    pub fn inverse_graph<R: Real>(&self, g: &Graph<R>, b: &Bindings, latent: Var) -> Result<Var> {
        let mut h = latent;
        for l in self.layers.iter().rev() {
            h = l.inverse(g, b, h)?;
        }
        Ok(h)
    }

    /// `[y, z] = f(x)` for a batch `[N, ...input_shape]`, with per-item
    /// log-determinants.
    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<(LatentPair, Tensor)> {
        let xs = self.to_latent_layout(x)?;
        let g = Graph::<f32>::new();
        let b = Bindings::constants(&g, params);
        let (latent, logdet) = self.forward_graph(&g, &b, g.constant(xs))?;
        let (y, z) = self.split_graph(&g, latent)?;
        let pair = LatentPair {
            y: (*g.value(y)).clone(),
            z: (*g.value(z)).clone(),
        };
        Ok((pair, (*g.value(logdet)).clone()))
    }

    /// `x = f⁻¹(y, z)`.
    pub fn inverse(&self, params: &ParamStore, pair: &LatentPair) -> Result<Tensor> {
        let n = self.check_batch(&pair.y, &self.cfg.y_shape(), "flow y")?;
        let nz = self.check_batch(&pair.z, &self.cfg.z_shape(), "flow z")?;
        if n != nz {
            return Err(Error::shape("flow latent batch", &[n], &[nz]));
        }
        let g = Graph::<f32>::new();
        let b = Bindings::constants(&g, params);
        let latent = g.concat(&[g.constant(pair.y.clone()), g.constant(pair.z.clone())], 1)?;
        let x = self.inverse_graph(&g, &b, latent)?;
        let out = (*g.value(x)).clone();
        out.check_finite(|| "flow inverse output".into())?;
        self.undo_latent_layout(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeeze_order_and_roundtrip() {
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32);
        let s = squeeze(&x, 2).unwrap();
        assert_eq!(s.shape(), &[1, 4, 2, 2]);
        // channel 0 holds the top-left pixel of each 2x2 block
        assert_eq!(&s.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
        // channel 1 holds the top-right pixel
        assert_eq!(&s.data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(unsqueeze(&s, 2).unwrap(), x);
        assert_eq!(squeeze(&x, 1).unwrap(), x);
        assert!(squeeze(&x, 3).is_err());
    }

    #[test]
    fn identity_flow_splits_squeezed_channels() {
        let flow = CouplingFlow::new(FlowConfig::image(1, 8, 8, 2)).unwrap();
        let params = flow
            .init_params(&mut RngStream::new(0, 1), Init::Zero)
            .unwrap();
        let x = RngStream::new(1, 0).uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0);
        let (pair, logdet) = flow.forward(&params, &x).unwrap();
        assert_eq!(pair.y.len(), 16);
        assert_eq!(pair.z.len(), 48);
        assert_eq!(logdet.data(), &[0.0]);
        let s = squeeze(&x, 2).unwrap();
        assert_eq!(pair.y.data(), &s.data()[..16]);
        assert_eq!(pair.z.data(), &s.data()[16..]);
        assert_eq!(flow.inverse(&params, &pair).unwrap(), x);
    }

    #[test]
    fn masks_partition_the_latent() {
        let cfg = FlowConfig::image(1, 4, 4, 2);
        for l in 0..4 {
            let layer = CouplingLayer::new(&cfg, l);
            let ones = layer.mask().data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, 8, "layer {l}");
        }
        let v = CouplingLayer::new(&FlowConfig::vector(2, 1), 0);
        assert_eq!(v.mask().data(), &[1.0, 0.0]);
        let v = CouplingLayer::new(&FlowConfig::vector(2, 1), 2);
        assert_eq!(v.mask().data(), &[0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig::vector(2, 2).validate().is_err());
        assert!(FlowConfig::image(1, 6, 6, 4).validate().is_err());
        let mut c = FlowConfig::vector(4, 1);
        c.clamp = 0.0;
        assert!(c.validate().is_err());
        let text = FlowConfig::image(3, 32, 32, 4).to_text();
        assert_eq!(
            FlowConfig::from_text(&text).unwrap(),
            FlowConfig::image(3, 32, 32, 4)
        );
    }
}
