use super::{ParamId, ParamStore, Session};
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub const REVIN_EPS: Scalar = 1e-5;

/// Reversible instance normalization over `[batch, len, channels]` inputs.
///
/// Statistics are computed per instance and channel, treated as constants
/// (no gradient through them), and reused to undo the normalization on the
/// model output. The affine `gamma`/`beta` are learned per channel.
#[derive(Clone, Debug)]
pub struct RevIn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

/// Per-instance, per-channel statistics, both stored `[batch, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RevInStats {
    pub mean: Tensor,
    pub std: Tensor,
    /// Set for channels with no observed value; those use mean 0, std 1.
    pub fallback: Vec<bool>,
}

impl RevInStats {
    /// `mask` marks excluded cells with 1 (same shape as `x`).
    pub fn compute(x: &Tensor, mask: Option<&Tensor>) -> Result<Self> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(dim_err!("RevIN expects [batch, len, channels], got {:?}", shape));
        }
        if let Some(m) = mask {
            if m.shape() != shape {
                return Err(dim_err!("RevIN mask {:?} does not match input {:?}", m.shape(), shape));
            }
        }
        let (b, len, ch) = (shape[0], shape[1], shape[2]);
        let xd = x.data();
        let mut mean = vec![0.0; b * ch];
        let mut std = vec![1.0; b * ch];
        let mut fallback = vec![false; b * ch];
        for bi in 0..b {
            for c in 0..ch {
                let observed: Vec<Scalar> = (0..len)
                    .map(|t| (bi * len + t) * ch + c)
                    .filter(|&i| mask.is_none_or(|m| m.data()[i] == 0.0))
                    .map(|i| xd[i])
                    .collect();
                let k = bi * ch + c;
                if observed.is_empty() {
                    log::warn!("RevIN: instance {bi} channel {c} is fully masked; using mean 0, std 1");
                    fallback[k] = true;
                    continue;
                }
                let n = observed.len() as Scalar;
                let mu = observed.iter().sum::<Scalar>() / n;
                let var = observed.iter().map(|v| (v - mu) * (v - mu)).sum::<Scalar>() / n;
                mean[k] = mu;
                std[k] = (var + REVIN_EPS).sqrt();
            }
        }
        Ok(RevInStats {
            mean: Tensor::from_parts(vec![b, ch], mean),
            std: Tensor::from_parts(vec![b, ch], std),
            fallback,
        })
    }

    /// Broadcasts `[batch, channels]` statistics to `[batch, len, channels]`.
    fn expand(stat: &Tensor, len: usize, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        let (b, ch) = (stat.shape()[0], stat.shape()[1]);
        let mut data = Vec::with_capacity(b * len * ch);
        for bi in 0..b {
            let row = &stat.data()[bi * ch..][..ch];
            for _ in 0..len {
                data.extend(row.iter().map(|&v| f(v)));
            }
        }
        Tensor::from_parts(vec![b, len, ch], data)
    }
}

impl RevIn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        RevIn {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            channels,
        }
    }

    /// Normalizes `x: [batch, len, channels]`. Cells flagged in `mask` are
    /// left out of the statistics but still normalized.
    pub fn normalize(&self, s: &mut Session, x: Var, mask: Option<&Tensor>) -> Result<(Var, RevInStats)> {
        let stats = RevInStats::compute(s.tape.value(x), mask)?;
        let len = s.tape.shape(x)[1];
        if s.tape.shape(x)[2] != self.channels {
            return Err(dim_err!("RevIN built for {} channels, got {:?}", self.channels, s.tape.shape(x)));
        }
        let mean = s.tape.constant(RevInStats::expand(&stats.mean, len, |v| v));
        let inv_std = s.tape.constant(RevInStats::expand(&stats.std, len, |v| 1.0 / v));
        let centered = s.tape.sub(x, mean)?;
        let z = s.tape.mul(centered, inv_std)?;
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let z = s.tape.mul(z, g)?;
        let z = s.tape.add(z, b)?;
        Ok((z, stats))
    }

    /// Inverts [`RevIn::normalize`] on `y: [batch, len', channels]`.
    pub fn denormalize(&self, s: &mut Session, y: Var, stats: &RevInStats) -> Result<Var> {
        let shape = s.tape.shape(y).to_vec();
        if shape.len() != 3 || shape[0] != stats.mean.shape()[0] || shape[2] != self.channels {
            return Err(dim_err!("RevIN denormalize: output {:?} does not match statistics {:?}", shape, stats.mean.shape()));
        }
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let g_safe = s.tape.add_scalar(g, REVIN_EPS * REVIN_EPS);
        let u = s.tape.sub(y, b)?;
        let u = s.tape.div(u, g_safe)?;
        let std = s.tape.constant(RevInStats::expand(&stats.std, shape[1], |v| v));
        let mean = s.tape.constant(RevInStats::expand(&stats.mean, shape[1], |v| v));
        let u = s.tape.mul(u, std)?;
        s.tape.add(u, mean)
    }
}
