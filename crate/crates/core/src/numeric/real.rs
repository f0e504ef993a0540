use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Scalar type a [`Tape`](super::Tape) computes in.
///
/// Training runs in `f32`; gradient checking runs the same graph in `f64` so
/// that central differences are not swamped by rounding.
pub trait Real: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major or strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn of_f32(v: f32) -> Self {
        Self::of(v as f64)
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_extent(a.len(), m, k, a_strides);
        check_extent(b.len(), k, n, b_strides);
        assert!(c.len() >= m * n);
        // SAFETY: operand extents were checked above; c is dense row-major m×n.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_extent(a.len(), m, k, a_strides);
        check_extent(b.len(), k, n, b_strides);
        assert!(c.len() >= m * n);
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
