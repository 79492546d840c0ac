//! Parameterized and stateless layers the model is built from.

mod attention;
mod conv;
mod param;
mod revin;

pub use attention::{AttentionKind, MultiHeadAttention};
pub use conv::{conv1d_out_len, Conv1d, Conv1dSpec, ConvTranspose1d};
pub use param::{Param, ParamGrads, ParamId, ParamStore, Session};
pub use revin::{RevIn, RevInStats, REVIN_EPS};

use crate::error::{config_err, Result};
use crate::tensor::{Scalar, Tensor, Var};
use rand::Rng;

/// PyTorch-style default init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, which is
/// Kaiming-uniform with negative slope `sqrt(5)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as Scalar).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Position-wise affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, trainable: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[in_dim, out_dim], in_dim, rng), trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), kaiming_uniform(&[out_dim], in_dim, rng), trainable));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with learnable `gamma`, `beta`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.tape.layer_norm(x, g, b)
    }
}

pub fn check_dropout(p: Scalar) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!("dropout probability must lie in [0, 1), got {p}"));
    }
    Ok(())
}

/// Inverted dropout. Identity outside training or when `p == 0`.
pub fn dropout(s: &mut Session, x: Var, p: Scalar) -> Result<Var> {
    check_dropout(p)?;
    if !s.training() || p == 0.0 {
        return Ok(x);
    }
    let shape = s.tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<Scalar> = (0..n).map(|_| if s.uniform() < p { 0.0 } else { keep }).collect();
    let m = s.tape.constant(Tensor::from_parts(shape, mask));
    s.tape.mul(x, m)
}

/// Fixed sinusoidal encoding `[len, dim]` with interleaved sin/cos columns:
/// column `2i` is `sin(t / 10000^(2i/dim))`, column `2i+1` the matching cosine.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err!("positional encoding needs an even dimension, got {dim}"));
    }
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + 2 * i] = angle.sin() as Scalar;
            data[t * dim + 2 * i + 1] = angle.cos() as Scalar;
        }
    }
    Ok(Tensor::from_parts(vec![len, dim], data))
}
