//! Small parameterized building blocks shared by the flow and the denoiser.
//!
//! Layers hold only their parameter paths and sizes; the values live in a
//! [`ParamStore`] and are bound into a [`Graph`] per evaluation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Bindings, Graph, ParamStore, Real, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Relu,
}

impl Activation {
    pub fn apply<R: Real>(self, g: &Graph<R>, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Silu => g.silu(x),
            Activation::Relu => g.relu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±gain/sqrt(fan_in); zero bias.
    Uniform {
        gain: f32,
    },
    Zero,
}

impl Init {
    pub const DEFAULT: Init = Init::Uniform { gain: 1.0 };

    fn weights(self, shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
        match self {
            Init::Zero => Tensor::zeros(shape.to_vec()),
            Init::Uniform { gain } => {
                let bound = gain / (fan_in.max(1) as f32).sqrt();
                rng.uniform_tensor(shape, -bound, bound)
            }
        }
    }
}

/// Fully connected layer: `x [N, in] -> x W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Dense {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngStream, init: Init) -> Result<()> {
        store.insert(
            format!("{}/w", self.name),
            init.weights(&[self.fan_in, self.fan_out], self.fan_in, rng),
        )?;
        store.insert(
            format!("{}/b", self.name),
            Tensor::zeros(vec![self.fan_out]),
        )
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, b: &Bindings, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}/w", self.name))?;
        let bias = b.get(&format!("{}/b", self.name))?;
        let y = g.matmul(x, w)?;
        g.add(y, bias)
    }
}

/// Square-kernel convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngStream, init: Init) -> Result<()> {
        let k = self.kernel;
        store.insert(
            format!("{}/w", self.name),
            init.weights(&[self.out_ch, self.in_ch, k, k], self.in_ch * k * k, rng),
        )?;
        store.insert(format!("{}/b", self.name), Tensor::zeros(vec![self.out_ch]))
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, b: &Bindings, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}/w", self.name))?;
        let bias = b.get(&format!("{}/b", self.name))?;
        g.conv2d(x, w, Some(bias), self.kernel / 2)
    }
}

/// Dense layers with an activation between them; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub act: Activation,
}

impl Mlp {
    /// `sizes = [in, hidden..., out]`.
    pub fn new(name: &str, sizes: &[usize], act: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(format!("{name}/fc{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, act }
    }

    /// Hidden layers use the default init; the output layer uses `last`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut RngStream, last: Init) -> Result<()> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            l.init(store, rng, if i + 1 == n { last } else { Init::DEFAULT })?;
        }
        Ok(())
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, b: &Bindings, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, b, x)?;
            if i + 1 < n {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }
}

/// Convolutions with an activation between them; the last one is linear.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
    pub act: Activation,
}

impl ConvStack {
    pub fn new(layers: Vec<Conv>, act: Activation) -> Self {
        ConvStack { layers, act }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut RngStream, last: Init) -> Result<()> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            l.init(store, rng, if i + 1 == n { last } else { Init::DEFAULT })?;
        }
        Ok(())
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, b: &Bindings, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, b, x)?;
            if i + 1 < n {
                x = self.act.apply(g, x);
            }
        }
        Ok(x)
    }
}

/// Sinusoidal embedding of integer timesteps: `[N] -> [N, dim]`, first half
/// sines, second half cosines.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; t.len() * dim];
    for (n, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = step as f64 * freq;
            data[n * dim + i] = arg.sin() as f32;
            data[n * dim + half + i] = arg.cos() as f32;
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("finite embedding")
}
