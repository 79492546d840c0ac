//! Forward definitions of every differentiable op.

use super::gemm::{gemm, Layout};
use super::kernels::{self, ConvGeometry};
use super::tape::{a_view, axis_split, b_view, MatmulDims, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    /// `a + b`; `b` may match `a` or broadcast as a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Division. A denominator that is exactly zero is a numeric error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by exact zero".into()));
        }
        self.binary(a, b, Binary::Div)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("cannot broadcast {:?} onto {:?}", sb, sa));
        }
        let nb = bv.numel();
        let bd = bv.data();
        let data: Vec<Scalar> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % nb];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: Scalar) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: Scalar) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Scalar::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_all();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as Scalar;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(dim_err!("axis {} out of range for shape {:?}", axis, shape));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let xd = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, v) in lane.iter_mut().enumerate() {
                    *v = xd[(o * len + l) * inner + i];
                }
                out[o * inner + i] = super::pairwise_sum(&lane);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(dim_err!("axis {} out of range for shape {:?}", axis, shape));
        }
        let n = shape[axis] as Scalar;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("{:?} is not a permutation of the axes of {:?}", perm, xv.shape()));
        }
        let (shape, data) = kernels::permute(xv.data(), xv.shape(), perm);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        if xs.len() == 1 {
            return Ok(*first);
        }
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("axis {} out of range for shape {:?}", axis, base));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat along axis {}: {:?} vs {:?}", axis, base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = self.value(*v);
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat { inputs: xs.to_vec(), axis }, xs))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow [{}, {}) on axis {} of {:?}", start, start + len, axis, shape));
        }
        let (outer, total, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xv.data()[(o * total + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(dim_err!("axis {} out of range for shape {:?}", axis, shape));
        }
        let total: usize = sizes.iter().sum();
        if total != shape[axis] {
            return Err(dim_err!("split sizes {:?} do not sum to axis length {} of {:?}", sizes, shape[axis], shape));
        }
        if sizes.len() == 1 {
            return Ok(vec![x]);
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(dim_err!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        self.matmul_t(a, b, false, false)
    }

    /// Batched product `op(a) · op(b)` where `op` optionally transposes the
    /// last two axes. `b` is either 2-D (shared) or has `a`'s batch axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        let mismatch = || dim_err!("matmul shape mismatch: {:?} (transposed={}) vs {:?} (transposed={})", sa, ta, sb, tb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        if sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let dims = MatmulDims::new(sa, sb, ta, tb);
        let kb = if tb { sb[sb.len() - 1] } else { sb[sb.len() - 2] };
        if kb != dims.k {
            return Err(mismatch());
        }
        let MatmulDims { batch, m, k, n, .. } = dims;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[bi * m * k..][..m * k],
                a_view(m, k, ta),
                dims.b_slice(bv.data(), bi),
                b_view(k, n, tb),
                0.0,
                &mut out[bi * m * n..][..m * n],
                Layout::row_major(n, false),
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// Affine map over the last axis: `x[.., a] · w[a, b] + bias[b]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(dim_err!("linear: input {:?} incompatible with weight {:?}", sx, sw));
        }
        let (fin, fout) = (sw[0], sw[1]);
        let rows = xv.numel() / fin;
        let mut out = vec![0.0; rows * fout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(dim_err!("linear: bias {:?} does not match weight {:?}", bv.shape(), sw));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, fin, fout, 1.0, xv.data(), Layout::row_major(fin, false), wv.data(), Layout::row_major(fout, false), 1.0, &mut out, Layout::row_major(fout, false));
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = fout;
        let out = Tensor::from_parts(shape, out);
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b: bias }, &inputs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax on a scalar");
        let out = Tensor::from_parts(xv.shape().to_vec(), kernels::softmax_rows(xv.data(), n));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// 1.5-entmax over the last axis.
    pub fn entmax15(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("entmax15 on a scalar");
        let out = Tensor::from_parts(xv.shape().to_vec(), kernels::entmax15_rows(xv.data(), n));
        self.push(out, Op::Entmax15(x), &[x])
    }

    /// Layer normalization over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!(
                "layer_norm: gamma {:?} / beta {:?} must have shape [{}]",
                self.shape(gamma),
                self.shape(beta),
                d
            ));
        }
        let (xhat, rstd) = kernels::layer_norm_rows(xv.data(), d);
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let data: Vec<Scalar> = xhat.iter().enumerate().map(|(i, &v)| v * gd[i % d] + bd[i % d]).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Cross-correlation of `x[n, len, cin]` with `w[cout, cin/groups, kernel]`,
    /// no padding. Output `[n, out_len, cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 3 || sw.len() != 3 || sw[2] != geo.kernel || sx[2] % geo.groups != 0 || sw[0] % geo.groups != 0 || sw[1] * geo.groups != sx[2] {
            return Err(dim_err!("conv1d: input {:?} incompatible with weight {:?} and {:?}", sx, sw, geo));
        }
        let (n, len, cin) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let out_len = geo.out_len(len)?;
        let cg = cin / geo.groups;
        let og = cout / geo.groups;
        let width = geo.kernel * cg;
        let rows = n * out_len;
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(dim_err!("conv1d: bias {:?} for {} output channels", bv.shape(), cout));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let mut cols = vec![0.0; rows * width];
        for g in 0..geo.groups {
            kernels::im2col(xv.data(), n, len, cin, &geo, out_len, g, &mut cols);
            let wm = kernels::conv_weight_matrix(wv.data(), cout, cg, geo.kernel, geo.groups, g);
            gemm(rows, width, og, 1.0, &cols, Layout::row_major(width, false), &wm, Layout::row_major(og, false), 1.0, &mut out[g * og..], Layout { rs: cout, cs: 1 });
        }
        let out = Tensor::from_parts(vec![n, out_len, cout], out);
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv1d { x, w, b: bias, geo }, &inputs))
    }

    /// Transposed convolution of `x[n, len, cin]` with `w[cin, cout/groups, kernel]`.
    ///
    /// The natural output length `(len-1)*stride + dilation*(kernel-1) + 1`
    /// must not exceed `target_len`; the remainder is zero-filled on the right.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: ConvGeometry, target_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 3 || sw.len() != 3 || sw[2] != geo.kernel || sx[2] != sw[0] || sx[2] % geo.groups != 0 {
            return Err(dim_err!("conv_transpose1d: input {:?} incompatible with weight {:?} and {:?}", sx, sw, geo));
        }
        let (n, dlen, cin) = (sx[0], sx[1], sx[2]);
        let og = sw[1];
        let cout = og * geo.groups;
        let natural_len = geo.transposed_len(dlen);
        if natural_len > target_len {
            return Err(Error::Config(format!(
                "transposed conv natural length {} (from {} rows, s={}, dilation={}, stride={}) exceeds target length {}",
                natural_len, dlen, geo.kernel, geo.dilation, geo.stride, target_len
            )));
        }
        let cg = cin / geo.groups;
        let width = geo.kernel * og;
        let rows = n * dlen;
        let mut out = vec![0.0; n * target_len * cout];
        let mut cols = vec![0.0; rows * width];
        for g in 0..geo.groups {
            let wm = kernels::tconv_weight_matrix(wv.data(), cin, og, geo.kernel, geo.groups, g);
            gemm(rows, cg, width, 1.0, &xv.data()[g * cg..], Layout { rs: cin, cs: 1 }, &wm, Layout::row_major(width, false), 0.0, &mut cols, Layout::row_major(width, false));
            kernels::col2im(&cols, n, target_len, cout, &geo, dlen, g, &mut out);
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(dim_err!("conv_transpose1d: bias {:?} for {} output channels", bv.shape(), cout));
            }
            for bi in 0..n {
                for t in 0..natural_len {
                    let row = &mut out[(bi * target_len + t) * cout..][..cout];
                    for (o, &bb) in row.iter_mut().zip(bv.data()) {
                        *o += bb;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, target_len, cout], out);
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        Ok(self.push(out, Op::ConvTranspose1d { x, w, b: bias, geo, natural_len }, &inputs))
    }
}
