use crate::tensor::Real;

/// Strided view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [Real],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [Real], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [Real], rows: usize, cols: usize) -> Self {
        Mat { data, rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out = beta * out + a * b` with `out` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [Real], beta: Real) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    // SAFETY: every index touched by the kernel is bounded by the asserts above.
    unsafe {
        #[cfg(not(feature = "f32"))]
        let kernel = matrixmultiply::dgemm;
        #[cfg(feature = "f32")]
        let kernel = matrixmultiply::sgemm;
        kernel(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
