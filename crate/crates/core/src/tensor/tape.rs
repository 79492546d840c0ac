use super::gemm::{gemm, Layout};
use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{contract_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, Scalar),
    Abs(Var),
    Square(Var),
    Gelu(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    Entmax15(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Scalar>, rstd: Vec<Scalar> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, geo: ConvGeometry, natural_len: usize },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Records one forward pass for a single reverse sweep.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape supports exactly one call to [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the leaves that required them, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(!finite_inputs, "non-finite output from finite inputs");
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs keep no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(contract_err!("backward called twice on the same tape"));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            ));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::from_parts(loss_node.value.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        // Interior grads were taken above; leaves keep theirs.
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| reduce_bcast_into(gb, gd, |g, _| g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| reduce_bcast_into(gb, gd, |g, _| -g));
            }
            Op::Mul(a, b) => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                let nb = bv.len();
                self.acc(grads, *a, |ga| {
                    for (i, (o, &gi)) in ga.iter_mut().zip(gd).enumerate() {
                        *o += gi * bv[i % nb];
                    }
                });
                self.acc(grads, *b, |gb| reduce_bcast_into(gb, gd, |gi, i| gi * av[i]));
            }
            Op::Div(a, b) => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                let nb = bv.len();
                self.acc(grads, *a, |ga| {
                    for (i, (o, &gi)) in ga.iter_mut().zip(gd).enumerate() {
                        *o += gi / bv[i % nb];
                    }
                });
                self.acc(grads, *b, |gb| {
                    reduce_bcast_into(gb, gd, |gi, i| {
                        let d = bv[i % nb];
                        -gi * av[i] / (d * d)
                    })
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, gd)),
            Op::MulScalar(x, c) => self.acc(grads, *x, |gx| {
                for (o, &gi) in gx.iter_mut().zip(gd) {
                    *o += gi * c;
                }
            }),
            Op::Abs(x) => {
                let xv = self.val(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gi * sign(v);
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.val(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += 2.0 * gi * v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gi * kernels::gelu_grad(v);
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.val(*x).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..][..inner];
                            add_into(dst, &gd[o * inner..][..inner]);
                        }
                    }
                });
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (_, back) = kernels::permute(gd, g.shape(), &inv);
                self.acc(grads, *x, |gx| add_into(gx, &back));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = g.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut off = 0;
                for v in inputs {
                    let len = self.val(*v).shape()[*axis];
                    self.acc(grads, *v, |gv| {
                        for o in 0..outer {
                            let src = &gd[(o * total + off) * inner..][..len * inner];
                            add_into(&mut gv[o * len * inner..][..len * inner], src);
                        }
                    });
                    off += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, total, inner) = axis_split(self.val(*x).shape(), *axis);
                let len = g.shape()[*axis];
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * total + start) * inner..][..len * inner];
                        add_into(dst, &gd[o * len * inner..][..len * inner]);
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => self.matmul_back(*a, *b, *ta, *tb, g, grads),
            Op::Linear { x, w, b } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let (fin, fout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / fin;
                self.acc(grads, *x, |gx| {
                    gemm(rows, fout, fin, 1.0, gd, Layout::row_major(fout, false), wv.data(), Layout::row_major(fout, true), 1.0, gx, Layout::row_major(fin, false));
                });
                self.acc(grads, *w, |gw| {
                    gemm(fin, rows, fout, 1.0, xv.data(), Layout::row_major(fin, true), gd, Layout::row_major(fout, false), 1.0, gw, Layout::row_major(fout, false));
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for row in gd.chunks(fout) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let n = *g.shape().last().unwrap();
                self.acc(grads, *x, |gx| kernels::softmax_rows_back(node.value.data(), gd, n, gx));
            }
            Op::Entmax15(x) => {
                let n = *g.shape().last().unwrap();
                self.acc(grads, *x, |gx| kernels::entmax15_rows_back(node.value.data(), gd, n, gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.val(*gamma).data();
                let d = gam.len();
                self.acc(grads, *x, |gx| {
                    let gxhat: Vec<Scalar> = gd.iter().enumerate().map(|(i, &gi)| gi * gam[i % d]).collect();
                    kernels::layer_norm_rows_back(xhat, rstd, &gxhat, d, gx);
                });
                self.acc(grads, *gamma, |gg| {
                    for (i, &gi) in gd.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for row in gd.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Conv1d { x, w, b, geo } => self.conv_back(*x, *w, *b, geo, g, grads),
            Op::ConvTranspose1d { x, w, b, geo, natural_len } => {
                self.tconv_back(*x, *w, *b, geo, *natural_len, g, grads)
            }
        }
    }

    /// Runs `f` on the (lazily zeroed) gradient buffer of `v` if it needs one.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [Scalar])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }

    fn matmul_back(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.val(a);
        let bv = self.val(b);
        let dims = MatmulDims::new(av.shape(), bv.shape(), ta, tb);
        let MatmulDims { batch, m, k, n, b_batched } = dims;
        let gd = g.data();
        self.acc(grads, a, |ga| {
            for bi in 0..batch {
                let gsl = &gd[bi * m * n..][..m * n];
                let bsl = dims.b_slice(bv.data(), bi);
                let gasl = &mut ga[bi * m * k..][..m * k];
                if !ta {
                    // dA = G · op(B)^T
                    gemm(m, n, k, 1.0, gsl, Layout::row_major(n, false), bsl, b_view_t(k, n, tb), 1.0, gasl, Layout::row_major(k, false));
                } else {
                    // stored A is k x m: dA_s = op(B) · G^T
                    gemm(k, n, m, 1.0, bsl, b_view(k, n, tb), gsl, Layout::row_major(n, true), 1.0, gasl, Layout::row_major(m, false));
                }
            }
        });
        self.acc(grads, b, |gb| {
            for bi in 0..batch {
                let gsl = &gd[bi * m * n..][..m * n];
                let asl = &av.data()[bi * m * k..][..m * k];
                let off = if b_batched { bi * k * n } else { 0 };
                let gbsl = &mut gb[off..][..k * n];
                if !tb {
                    // dB = op(A)^T · G
                    gemm(k, m, n, 1.0, asl, a_view_t(m, k, ta), gsl, Layout::row_major(n, false), 1.0, gbsl, Layout::row_major(n, false));
                } else {
                    // stored B is n x k: dB_s = G^T · op(A)
                    gemm(n, m, k, 1.0, gsl, Layout::row_major(n, true), asl, a_view(m, k, ta), 1.0, gbsl, Layout::row_major(k, false));
                }
            }
        });
    }

    fn conv_back(&self, x: Var, w: Var, b: Option<Var>, geo: &ConvGeometry, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.val(x);
        let wv = self.val(w);
        let (n, len, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let cout = wv.shape()[0];
        let out_len = g.shape()[1];
        let cg = cin / geo.groups;
        let og = cout / geo.groups;
        let width = geo.kernel * cg;
        let rows = n * out_len;
        let gd = g.data();
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        for grp in 0..geo.groups {
            let gy = &gd[grp * og..];
            let gy_layout = Layout { rs: cout, cs: 1 };
            if need_w {
                let mut cols = vec![0.0; rows * width];
                kernels::im2col(xv.data(), n, len, cin, geo, out_len, grp, &mut cols);
                let mut gwm = vec![0.0; width * og];
                gemm(width, rows, og, 1.0, &cols, Layout::row_major(width, true), gy, gy_layout, 0.0, &mut gwm, Layout::row_major(og, false));
                self.acc(grads, w, |gw| kernels::conv_weight_matrix_back(&gwm, cout, cg, geo.kernel, geo.groups, grp, gw));
            }
            if need_x {
                let wm = kernels::conv_weight_matrix(wv.data(), cout, cg, geo.kernel, geo.groups, grp);
                let mut gcols = vec![0.0; rows * width];
                gemm(rows, og, width, 1.0, gy, gy_layout, &wm, Layout::row_major(og, true), 0.0, &mut gcols, Layout::row_major(width, false));
                self.acc(grads, x, |gx| kernels::col2im(&gcols, n, len, cin, geo, out_len, grp, gx));
            }
        }
        if let Some(b) = b {
            self.acc(grads, b, |gb| {
                for row in gd.chunks(cout) {
                    add_into(gb, row);
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tconv_back(&self, x: Var, w: Var, b: Option<Var>, geo: &ConvGeometry, natural_len: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.val(x);
        let wv = self.val(w);
        let (n, dlen, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let og = wv.shape()[1];
        let cout = og * geo.groups;
        let tlen = g.shape()[1];
        let cg = cin / geo.groups;
        let width = geo.kernel * og;
        let rows = n * dlen;
        let gd = g.data();
        for grp in 0..geo.groups {
            let mut gcols = vec![0.0; rows * width];
            kernels::im2col(gd, n, tlen, cout, geo, dlen, grp, &mut gcols);
            let x_layout = Layout { rs: cin, cs: 1 };
            let xg = &xv.data()[grp * cg..];
            self.acc(grads, x, |gx| {
                let wm = kernels::tconv_weight_matrix(wv.data(), cin, og, geo.kernel, geo.groups, grp);
                gemm(rows, width, cg, 1.0, &gcols, Layout::row_major(width, false), &wm, Layout::row_major(width, true), 1.0, &mut gx[grp * cg..], x_layout);
            });
            self.acc(grads, w, |gw| {
                let mut gwm = vec![0.0; cg * width];
                gemm(cg, rows, width, 1.0, xg, Layout { rs: 1, cs: cin }, &gcols, Layout::row_major(width, false), 0.0, &mut gwm, Layout::row_major(width, false));
                kernels::tconv_weight_matrix_back(&gwm, cin, og, geo.kernel, geo.groups, grp, gw);
            });
        }
        if let Some(b) = b {
            self.acc(grads, b, |gb| {
                for bi in 0..n {
                    for t in 0..natural_len {
                        add_into(gb, &gd[(bi * tlen + t) * cout..][..cout]);
                    }
                }
            });
        }
    }
}

/// Resolved dimensions of a (possibly batched, possibly transposed) product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_batched: bool,
}

impl MatmulDims {
    /// Assumes shapes were validated by the forward op.
    pub fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Self {
        let ra = a.len();
        let rb = b.len();
        let (m, k) = if ta { (a[ra - 1], a[ra - 2]) } else { (a[ra - 2], a[ra - 1]) };
        let n = if tb { b[rb - 2] } else { b[rb - 1] };
        let batch = a[..ra - 2].iter().product();
        MatmulDims { batch, m, k, n, b_batched: rb > 2 }
    }

    pub fn b_slice<'a>(&self, b: &'a [Scalar], bi: usize) -> &'a [Scalar] {
        if self.b_batched {
            &b[bi * self.k * self.n..][..self.k * self.n]
        } else {
            b
        }
    }
}

/// View of op(A) (logical m x k) given stored A.
pub(crate) fn a_view(m: usize, k: usize, ta: bool) -> Layout {
    if ta {
        Layout::row_major(m, true)
    } else {
        Layout::row_major(k, false)
    }
}

/// View of op(A)^T (logical k x m).
fn a_view_t(m: usize, k: usize, ta: bool) -> Layout {
    if ta {
        Layout::row_major(m, false)
    } else {
        Layout::row_major(k, true)
    }
}

/// View of op(B) (logical k x n) given stored B.
pub(crate) fn b_view(k: usize, n: usize, tb: bool) -> Layout {
    if tb {
        Layout::row_major(k, true)
    } else {
        Layout::row_major(n, false)
    }
}

/// View of op(B)^T (logical n x k).
fn b_view_t(k: usize, n: usize, tb: bool) -> Layout {
    if tb {
        Layout::row_major(k, false)
    } else {
        Layout::row_major(n, true)
    }
}

fn sign(v: Scalar) -> Scalar {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [Scalar], src: &[Scalar]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Accumulates `f(g_i, i)` into a suffix-broadcast operand's gradient.
fn reduce_bcast_into(dst: &mut [Scalar], g: &[Scalar], f: impl Fn(Scalar, usize) -> Scalar) {
    let nb = dst.len();
    for (i, &gi) in g.iter().enumerate() {
        dst[i % nb] += f(gi, i);
    }
}

/// `(outer, axis_len, inner)` sizes around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
