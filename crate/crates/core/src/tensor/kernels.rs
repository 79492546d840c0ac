//! Forward/backward kernels that are too involved to inline in the tape.

use super::Scalar;
use crate::error::{config_err, Result};

/// Window layout shared by a 1-D convolution and its transposed twin.
///
/// Sequences are stored `[len, channels]` (channels last), matching the
/// `[T x d]` orientation used throughout the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvGeometry {
    /// Number of input positions one window spans.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// `floor((len - dilation*(kernel-1) - 1) / stride + 1)`.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.dilation == 0 || self.stride == 0 {
            return Err(config_err!(
                "kernel size, dilation and stride must be positive (got s={}, dilation={}, stride={})",
                self.kernel,
                self.dilation,
                self.stride
            ));
        }
        if self.receptive_field() > len {
            return Err(config_err!(
                "receptive field {} of kernel s={} with dilation {} exceeds sequence length T={}",
                self.receptive_field(),
                self.kernel,
                self.dilation,
                len
            ));
        }
        Ok((len - self.receptive_field()) / self.stride + 1)
    }

    /// Natural length produced by the transposed convolution from `len` rows.
    pub fn transposed_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.receptive_field()
    }
}

/// Gathers windows of `x[n, len, cin]` into `cols[n*out_len, kernel*cin_g]`
/// for channel group `g`. Column order is `(tap, channel)`.
pub(crate) fn im2col(
    x: &[Scalar],
    n: usize,
    len: usize,
    cin: usize,
    geo: &ConvGeometry,
    out_len: usize,
    g: usize,
    cols: &mut [Scalar],
) {
    let cg = cin / geo.groups;
    let width = geo.kernel * cg;
    for b in 0..n {
        for i in 0..out_len {
            let row = &mut cols[(b * out_len + i) * width..][..width];
            for k in 0..geo.kernel {
                let t = i * geo.stride + k * geo.dilation;
                let src = &x[(b * len + t) * cin + g * cg..][..cg];
                row[k * cg..(k + 1) * cg].copy_from_slice(src);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `x[n, len, cin]`.
pub(crate) fn col2im(
    cols: &[Scalar],
    n: usize,
    len: usize,
    cin: usize,
    geo: &ConvGeometry,
    out_len: usize,
    g: usize,
    x: &mut [Scalar],
) {
    let cg = cin / geo.groups;
    let width = geo.kernel * cg;
    for b in 0..n {
        for i in 0..out_len {
            let row = &cols[(b * out_len + i) * width..][..width];
            for k in 0..geo.kernel {
                let t = i * geo.stride + k * geo.dilation;
                let dst = &mut x[(b * len + t) * cin + g * cg..][..cg];
                for (d, s) in dst.iter_mut().zip(&row[k * cg..(k + 1) * cg]) {
                    *d += s;
                }
            }
        }
    }
}

/// Conv weight `[cout, cin_g, kernel]` for group `g` rearranged to
/// `[kernel*cin_g, cout_g]` so that `cols · w` is the convolution.
pub(crate) fn conv_weight_matrix(w: &[Scalar], cout: usize, cg: usize, kernel: usize, groups: usize, g: usize) -> Vec<Scalar> {
    let og = cout / groups;
    let mut m = vec![0.0; kernel * cg * og];
    for o in 0..og {
        for c in 0..cg {
            for k in 0..kernel {
                m[(k * cg + c) * og + o] = w[((g * og + o) * cg + c) * kernel + k];
            }
        }
    }
    m
}

/// Inverse of [`conv_weight_matrix`], accumulating into `grad_w`.
pub(crate) fn conv_weight_matrix_back(m: &[Scalar], cout: usize, cg: usize, kernel: usize, groups: usize, g: usize, grad_w: &mut [Scalar]) {
    let og = cout / groups;
    for o in 0..og {
        for c in 0..cg {
            for k in 0..kernel {
                grad_w[((g * og + o) * cg + c) * kernel + k] += m[(k * cg + c) * og + o];
            }
        }
    }
}

/// Transposed-conv weight `[cin, cout_g, kernel]` for group `g` rearranged to
/// `[cin_g, kernel*cout_g]` so that `x · w` yields per-tap contributions.
pub(crate) fn tconv_weight_matrix(w: &[Scalar], cin: usize, og: usize, kernel: usize, groups: usize, g: usize) -> Vec<Scalar> {
    let cg = cin / groups;
    let mut m = vec![0.0; cg * kernel * og];
    for c in 0..cg {
        for o in 0..og {
            for k in 0..kernel {
                m[c * kernel * og + k * og + o] = w[((g * cg + c) * og + o) * kernel + k];
            }
        }
    }
    m
}

pub(crate) fn tconv_weight_matrix_back(m: &[Scalar], cin: usize, og: usize, kernel: usize, groups: usize, g: usize, grad_w: &mut [Scalar]) {
    let cg = cin / groups;
    for c in 0..cg {
        for o in 0..og {
            for k in 0..kernel {
                grad_w[((g * cg + c) * og + o) * kernel + k] += m[c * kernel * og + k * og + o];
            }
        }
    }
}

/// Numerically stable softmax of each contiguous row of length `n`.
pub(crate) fn softmax_rows(x: &[Scalar], n: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) fn softmax_rows_back(y: &[Scalar], gy: &[Scalar], n: usize, gx: &mut [Scalar]) {
    for ((yr, gr), dst) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

/// Exact 1.5-entmax of one logit vector via the sorted-threshold method.
///
/// Solves `p_i = [z_i/2 - tau]_+^2` with `sum p = 1`. Entries below the
/// threshold come out as exact zeros.
pub fn entmax15(z: &[Scalar]) -> Vec<Scalar> {
    let n = z.len();
    let max = z.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let x: Vec<Scalar> = z.iter().map(|&v| (v - max) / 2.0).collect();
    let mut sorted = x.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("entmax15 on NaN logits"));

    let mut cum = 0.0;
    let mut cum_sq = 0.0;
    let mut tau_star = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        let rho = (i + 1) as Scalar;
        cum += v;
        cum_sq += v * v;
        let mean = cum / rho;
        let mean_sq = cum_sq / rho;
        let ss = rho * (mean_sq - mean * mean);
        let delta = ((1.0 - ss) / rho).max(0.0);
        let tau = mean - delta.sqrt();
        if tau <= v {
            tau_star = tau;
        } else {
            break;
        }
    }
    let mut p: Vec<Scalar> = x
        .iter()
        .map(|&v| {
            let t = (v - tau_star).max(0.0);
            t * t
        })
        .collect();
    // The threshold is exact up to rounding; renormalize the last ulp away.
    let s: Scalar = p.iter().sum();
    if n > 0 && s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    }
    p
}

pub(crate) fn entmax15_rows(x: &[Scalar], n: usize) -> Vec<Scalar> {
    x.chunks(n).flat_map(entmax15).collect()
}

/// Entmax-1.5 VJP: with `s = sqrt(p)`, `gx = s*g - (sum(s*g)/sum(s)) * s`.
pub(crate) fn entmax15_rows_back(y: &[Scalar], gy: &[Scalar], n: usize, gx: &mut [Scalar]) {
    for ((yr, gr), dst) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&p, &g) in yr.iter().zip(gr) {
            let s = p.sqrt();
            num += s * g;
            den += s;
        }
        let q = num / den;
        for ((d, &p), &g) in dst.iter_mut().zip(yr).zip(gr) {
            let s = p.sqrt();
            *d += s * g - q * s;
        }
    }
}

pub(crate) const LAYER_NORM_EPS: Scalar = 1e-5;

/// Normalizes each row of length `d`; returns `(xhat, rstd)`.
pub(crate) fn layer_norm_rows(x: &[Scalar], d: usize) -> (Vec<Scalar>, Vec<Scalar>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for (r, (row, dst)) in x.chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
        let mean = row.iter().sum::<Scalar>() / d as Scalar;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Backward of `y = xhat*gamma + beta` through the normalization.
/// `gxhat` is the upstream gradient already multiplied by gamma.
pub(crate) fn layer_norm_rows_back(xhat: &[Scalar], rstd: &[Scalar], gxhat: &[Scalar], d: usize, gx: &mut [Scalar]) {
    let inv_d = 1.0 / d as Scalar;
    for (r, ((xh, g), dst)) in xhat.chunks(d).zip(gxhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
        let mean_g = g.iter().sum::<Scalar>() * inv_d;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<Scalar>() * inv_d;
        for ((o, &gi), &xi) in dst.iter_mut().zip(g).zip(xh) {
            *o += rstd[r] * (gi - mean_g - xi * mean_gx);
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: Scalar) -> Scalar {
    let xf = x as f64;
    (0.5 * xf * (1.0 + libm::erf(xf * FRAC_1_SQRT_2))) as Scalar
}

/// `d/dx [x * Phi(x)] = Phi(x) + x * phi(x)`.
pub(crate) fn gelu_grad(x: Scalar) -> Scalar {
    let xf = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(xf * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * xf * xf).exp();
    (cdf + xf * pdf) as Scalar
}

/// Permutes a row-major tensor's axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &[Scalar], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<Scalar>) {
    let rank = shape.len();
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        return (out_shape, x.to_vec());
    }
    // The innermost output axis is walked in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
