//! Thin safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Row/column stride pair of a strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }
}

fn max_index(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// `c ← a·b + beta·c` where `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(a.len() >= max_index(m, k, sa), "gemm: lhs too short");
    assert!(b.len() >= max_index(k, n, sb), "gemm: rhs too short");
    assert!(c.len() >= max_index(m, n, sc), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.row + j * sc.col] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}
