//! The time series representation model: a channel-independent stack of
//! encoding layers between an embedding and a flatten-linear head.
//!
//! Each encoding layer (EL) runs
//!
//! 1. a representation layer: K strided, dilated convolutions whose outputs
//!    are concatenated along the sequence axis into `R [D x d]`,
//! 2. two pre-activation residual blocks (attention, then a linear map),
//! 3. a merge layer: split `R` back into K blocks, invert each with a
//!    transposed convolution, concatenate on the feature axis and project
//!    `dK -> d` to recover `[T x d]`.
//!
//! Representation matrices are additionally threaded through all ELs by a
//! cross-layer residual.

mod config;
mod layer;

pub use config::{auto_conv_specs, ModelConfig, CONV_COUNT_RANGE, DIM_CHOICES, HEAD_CHOICES, LAYER_RANGE};
pub use layer::EncodingLayer;

use crate::error::{contract_err, data_err, dim_err, Result};
use crate::nn::{positional_encoding, Linear, ParamStore, RevIn, RevInStats, Session};
use crate::tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a forward pass produces.
pub struct ForwardOutput {
    /// Predictions `[batch, horizon, features]`.
    pub y: Var,
    /// Per EL: attention weights `[batch*features, heads, D, D]`, with rows
    /// ordered batch-major. `None` when capture was not requested.
    pub attention: Option<Vec<Var>>,
    pub stats: RevInStats,
}

impl ForwardOutput {
    pub fn attention(&self) -> Result<&[Var]> {
        self.attention
            .as_deref()
            .ok_or_else(|| contract_err!("attention capture was not enabled for this forward pass"))
    }
}

#[derive(Clone, Debug)]
pub struct Tsrm {
    pub config: ModelConfig,
    pub params: ParamStore,
    revin: RevIn,
    embed: Linear,
    layers: Vec<EncodingLayer>,
    head: Linear,
    pos: Tensor,
}

impl Tsrm {
    /// Builds and initializes a model. Initialization is a pure function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let revin = RevIn::new(&mut params, "revin", config.features);
        let embed = Linear::new(&mut params, "embed", 1, d, true, true, &mut rng);
        let layers = (0..config.layers)
            .map(|n| EncodingLayer::new(&mut params, &format!("el{n}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut params, "head", config.lookback * d, config.horizon, true, true, &mut rng);
        let pos = positional_encoding(config.lookback, d)?;
        Ok(Tsrm { config, params, revin, embed, layers, head, pos })
    }

    pub fn layers(&self) -> &[EncodingLayer] {
        &self.layers
    }

    /// Trainable scalar count; a frozen merge layer does not count.
    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// Embeds `[batch, T, F]` into per-channel sequences `[batch*F, T, d]`,
    /// after RevIN normalization.
    fn embed(&self, s: &mut Session, x: Var, mask: Option<&Tensor>) -> Result<(Var, RevInStats)> {
        let (b, t, f) = dims3(s.tape.shape(x));
        let (xn, stats) = self.revin.normalize(s, x, mask)?;
        let xc = s.tape.permute(xn, &[0, 2, 1])?;
        let xc = s.tape.reshape(xc, &[b * f, t, 1])?;
        let e = self.embed.forward(s, xc)?;
        let pe = s.tape.constant(self.pos.clone());
        Ok((s.tape.add(e, pe)?, stats))
    }

    /// Forward over a batch `x: [batch, T, F]`.
    ///
    /// `mask` (same shape, 1 = masked) only affects the RevIN statistics;
    /// masked cells are expected to already hold the sentinel value.
    pub fn forward(&self, s: &mut Session, x: &Tensor, mask: Option<&Tensor>, capture_attention: bool) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if x.rank() != 3 || x.shape()[1] != cfg.lookback || x.shape()[2] != cfg.features {
            return Err(dim_err!(
                "model expects input [batch, {}, {}], got {:?}",
                cfg.lookback,
                cfg.features,
                x.shape()
            ));
        }
        if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(data_err!("non-finite input value at flat index {i}"));
        }
        let (b, t, f) = dims3(x.shape());
        let xv = s.tape.constant(x.clone());
        let (mut e, stats) = self.embed(s, xv, mask)?;

        let mut residual = None;
        let mut attention = capture_attention.then(Vec::new);
        for layer in &self.layers {
            let out = layer.forward(s, e, residual, Some(f))?;
            e = out.output;
            residual = Some(out.residual);
            if let Some(a) = attention.as_mut() {
                a.push(out.attention);
            }
        }

        let flat = s.tape.reshape(e, &[b * f, t * cfg.dim])?;
        let y = self.head.forward(s, flat)?;
        let y = s.tape.reshape(y, &[b, f, cfg.horizon])?;
        let y = s.tape.permute(y, &[0, 2, 1])?;
        let y = self.revin.denormalize(s, y, &stats)?;
        Ok(ForwardOutput { y, attention, stats })
    }

    /// Convenience inference on one window `[T, F]`; returns `[H, F]`.
    pub fn predict(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let t = x.shape().first().copied().unwrap_or(0);
        let xb = x.reshape(&[1, t, x.numel() / t.max(1)])?;
        let mb = mask.map(|m| m.reshape(&[1, t, m.numel() / t.max(1)])).transpose()?;
        let mut s = Session::eval(&self.params);
        let out = self.forward(&mut s, &xb, mb.as_ref(), false)?;
        s.tape.value(out.y).reshape(&[self.config.horizon, self.config.features])
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}
