use super::{kaiming_uniform, ParamId, ParamStore, Session};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row normalizer applied to the scaled attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Softmax attention.
    #[default]
    Vanilla,
    /// Sparse attention with 1.5-entmax rows.
    Entmax15,
}

/// Multi-head self-attention without projection biases.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub kind: AttentionKind,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, kind: AttentionKind, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("model dimension {dim} is not divisible by {heads} heads"));
        }
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), kaiming_uniform(&[dim, dim], dim, rng), true);
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        Ok(MultiHeadAttention { wq, wk, wv, wo, heads, dim, kind })
    }

    /// `x: [n, len, dim]` → `(output [n, len, dim], weights [n, heads, len, len])`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, Var)> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(dim_err!("attention expects [n, len, {}], got {:?}", self.dim, shape));
        }
        let (n, len, h) = (shape[0], shape[1], self.heads);
        let dh = self.dim / h;

        let heads_of = |s: &mut Session, w: ParamId| -> Result<Var> {
            let w = s.param(w);
            let p = s.tape.linear(x, w, None)?;
            let p = s.tape.reshape(p, &[n, len, h, dh])?;
            let p = s.tape.permute(p, &[0, 2, 1, 3])?;
            s.tape.reshape(p, &[n * h, len, dh])
        };
        let q = heads_of(s, self.wq)?;
        let k = heads_of(s, self.wk)?;
        let v = heads_of(s, self.wv)?;

        let logits = s.tape.matmul_t(q, k, false, true)?;
        let logits = s.tape.mul_scalar(logits, 1.0 / (dh as Scalar).sqrt());
        let weights = match self.kind {
            AttentionKind::Vanilla => s.tape.softmax(logits),
            AttentionKind::Entmax15 => s.tape.entmax15(logits),
        };
        let ctx = s.tape.matmul_t(weights, v, false, false)?;
        let ctx = s.tape.reshape(ctx, &[n, h, len, dh])?;
        let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.tape.reshape(ctx, &[n, len, self.dim])?;
        let wo = s.param(self.wo);
        let out = s.tape.linear(ctx, wo, None)?;
        let weights = s.tape.reshape(weights, &[n, h, len, len])?;
        Ok((out, weights))
    }
}
