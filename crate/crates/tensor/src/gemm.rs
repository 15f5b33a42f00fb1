use crate::Float;

/// Row and column strides of a dense matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major storage of a matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols as isize, cs: 1 }
    }

    /// Transposed view of row-major storage whose stored rows have `cols` entries.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols as isize }
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    la: Layout,
    b: &[Float],
    lb: Layout,
    beta: Float,
    c: &mut [Float],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(span(m, k, la) <= a.len(), "gemm: lhs buffer too small");
    assert!(span(k, n, lb) <= b.len(), "gemm: rhs buffer too small");
    assert!(span(m, n, lc) <= c.len(), "gemm: output buffer too small");
    // SAFETY: the asserts above bound every strided access within the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        kernel(m, k, n, 1.0, a.as_ptr(), la.rs, la.cs, b.as_ptr(), lb.rs, lb.cs, beta, c.as_mut_ptr(), lc.rs, lc.cs);
    }
}

fn span(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize + 1
}

#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as kernel;

#[cfg(feature = "f64")]
use matrixmultiply::dgemm as kernel;
