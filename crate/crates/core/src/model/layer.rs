use super::ModelConfig;
use crate::error::{contract_err, dim_err, Result};
use crate::nn::{dropout, Conv1d, ConvTranspose1d, LayerNorm, Linear, MultiHeadAttention, ParamStore, Session};
use crate::tensor::{Scalar, Var};
use rand::Rng;

/// Parameters of one encoding layer.
#[derive(Clone, Debug)]
pub struct EncodingLayer {
    pub convs: Vec<Conv1d>,
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    /// `d -> d`, or `F*d -> F*d` in the inter-feature variant.
    pub block2: Linear,
    pub tconvs: Vec<ConvTranspose1d>,
    pub merge_proj: Linear,
    /// Rows produced by each convolution (`D_j`).
    pub block_lens: Vec<usize>,
    lookback: usize,
    dim: usize,
    dropout: Scalar,
    ifc: bool,
}

pub struct LayerOutput {
    /// Restored sequence `[n, T, d]`.
    pub output: Var,
    /// Residual carried to the next layer, `[n, D, d]`.
    pub residual: Var,
    /// `[n, heads, D, D]`.
    pub attention: Var,
}

impl EncodingLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        let (block_lens, _) = cfg.representation_lens()?;
        let convs = cfg
            .convs
            .iter()
            .enumerate()
            .map(|(j, spec)| Conv1d::new(store, &format!("{name}.rl.conv{j}"), d, *spec, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
        let attention = MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, cfg.attention, rng)?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        let width = if cfg.ifc { cfg.features * d } else { d };
        let block2 = Linear::new(store, &format!("{name}.block2"), width, width, true, true, rng);
        let tconvs = cfg
            .convs
            .iter()
            .enumerate()
            .map(|(j, spec)| ConvTranspose1d::new(store, &format!("{name}.ml.tconv{j}"), d, *spec, cfg.merge_trainable, rng))
            .collect::<Result<Vec<_>>>()?;
        let k = cfg.convs.len();
        let merge_proj = Linear::new(store, &format!("{name}.ml.proj"), d * k, d, true, cfg.merge_trainable, rng);
        Ok(EncodingLayer {
            convs,
            norm1,
            attention,
            norm2,
            block2,
            tconvs,
            merge_proj,
            block_lens,
            lookback: cfg.lookback,
            dim: d,
            dropout: cfg.dropout,
            ifc: cfg.ifc,
        })
    }

    /// `E [n, T, d]` → `R [n, D, d]`, conv outputs stacked in order j = 1..K.
    pub fn representation(&self, s: &mut Session, e: Var) -> Result<Var> {
        let parts = self
            .convs
            .iter()
            .map(|c| c.forward(s, e))
            .collect::<Result<Vec<_>>>()?;
        s.tape.concat(&parts, 1)
    }

    /// The two pre-activation residual blocks. Returns `(output, attention)`.
    ///
    /// `features` is the channel count F that `r`'s leading axis interleaves
    /// (`n = batch * F`); the inter-feature variant requires it.
    pub fn middle_blocks(&self, s: &mut Session, r: Var, features: Option<usize>) -> Result<(Var, Var)> {
        let a = self.norm1.forward(s, r)?;
        let a = s.tape.gelu(a);
        let (a, weights) = self.attention.forward(s, a)?;
        let a = dropout(s, a, self.dropout)?;
        let r1 = s.tape.add(r, a)?;

        let b = self.norm2.forward(s, r1)?;
        let b = s.tape.gelu(b);
        let b = if self.ifc {
            let f = features.ok_or_else(|| contract_err!("the inter-feature block needs the feature count of its input"))?;
            self.mix_features(s, b, f)?
        } else {
            self.block2.forward(s, b)?
        };
        let b = dropout(s, b, self.dropout)?;
        Ok((s.tape.add(r1, b)?, weights))
    }

    /// Applies the `F*d` linear jointly across channels, row by row of `D`.
    fn mix_features(&self, s: &mut Session, x: Var, features: usize) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let (n, rows, d) = (shape[0], shape[1], shape[2]);
        if n % features != 0 || self.block2.in_dim != features * d {
            return Err(dim_err!(
                "inter-feature block built for width {} cannot mix {:?} as {} channels",
                self.block2.in_dim,
                shape,
                features
            ));
        }
        let b = n / features;
        let y = s.tape.reshape(x, &[b, features, rows, d])?;
        let y = s.tape.permute(y, &[0, 2, 1, 3])?;
        let y = s.tape.reshape(y, &[b, rows, features * d])?;
        let y = self.block2.forward(s, y)?;
        let y = s.tape.reshape(y, &[b, rows, features, d])?;
        let y = s.tape.permute(y, &[0, 2, 1, 3])?;
        s.tape.reshape(y, &[n, rows, d])
    }

    /// `R [n, D, d]` → `[n, T, d]`: split, invert each block, project `dK -> d`.
    pub fn merge(&self, s: &mut Session, r: Var) -> Result<Var> {
        let blocks = s.tape.split(r, &self.block_lens, 1)?;
        let restored = blocks
            .into_iter()
            .zip(&self.tconvs)
            .map(|(blk, tc)| tc.forward(s, blk, self.lookback))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.tape.concat(&restored, 2)?;
        self.merge_proj.forward(s, cat)
    }

    /// One full layer. `residual` is `None` for the first layer.
    pub fn forward(&self, s: &mut Session, e: Var, residual: Option<Var>, features: Option<usize>) -> Result<LayerOutput> {
        let shape = s.tape.shape(e);
        if shape.len() != 3 || shape[1] != self.lookback || shape[2] != self.dim {
            return Err(dim_err!("encoding layer expects [n, {}, {}], got {:?}", self.lookback, self.dim, shape));
        }
        let mut r = self.representation(s, e)?;
        if let Some(prev) = residual {
            r = s.tape.add(r, prev)?;
        }
        let (m, attention) = self.middle_blocks(s, r, features)?;
        let residual = match residual {
            Some(prev) => s.tape.add(m, prev)?,
            None => m,
        };
        let output = self.merge(s, residual)?;
        Ok(LayerOutput { output, residual, attention })
    }
}
