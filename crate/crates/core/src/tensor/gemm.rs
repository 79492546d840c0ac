//! Strided GEMM over the global scalar type, backed by `matrixmultiply`.

use super::Scalar;

/// Row/column strides of a matrix operand stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows x cols`, optionally viewed transposed.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Layout { rs: 1, cs: cols }
        } else {
            Layout { rs: cols, cs: 1 }
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a·b + beta * c` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Scalar,
    a: &[Scalar],
    la: Layout,
    b: &[Scalar],
    lb: Layout,
    beta: Scalar,
    c: &mut [Scalar],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * lc.rs + j * lc.cs] *= beta;
            }
        }
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_offset(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: all three operands were bounds-checked above for the given
    // dimensions and strides, and `c` is exclusively borrowed.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as raw_gemm;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as raw_gemm;
