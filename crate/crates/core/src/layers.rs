//! Parameterised building blocks: linear, layer norm and convolution layers.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::LAYER_NORM_EPS;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the normal init for dense projections and
/// dictionary entries.
pub const INIT_STD: f32 = 0.02;

pub type SeedRng = rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[in_dim, out_dim], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x` is `[N x in_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Uniform `±1/sqrt(fan_in)` init for weights and biases.
fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                fan_in_uniform(&[kernel, kernel, in_channels, out_channels], fan_in, rng),
            ),
            bias: store.add(
                format!("{name}.bias"),
                fan_in_uniform(&[out_channels], fan_in, rng),
            ),
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct DwConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl DwConv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                fan_in_uniform(&[kernel, kernel, channels], fan_in, rng),
            ),
            bias: store.add(format!("{name}.bias"), fan_in_uniform(&[channels], fan_in, rng)),
            kernel,
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dwconv2d(x, w, b)
    }
}
