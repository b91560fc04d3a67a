//! Strided single-precision matrix multiply.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub row: usize,
    pub col: usize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub fn rows(cols: usize) -> Layout {
        Layout { row: cols, col: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Layout {
        Layout { row: 1, col: cols }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

/// `c = a @ b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` (row-major, contiguous).
///
/// Blocking is fixed by the problem size, so results are bitwise reproducible.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= la.span(m, k), "gemm: lhs too short");
    assert!(b.len() >= lb.span(k, n), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row as isize,
            la.col as isize,
            b.as_ptr(),
            lb.row as isize,
            lb.col as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
