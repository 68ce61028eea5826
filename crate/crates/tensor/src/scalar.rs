use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of a [`Tensor`](crate::Tensor).
///
/// Training runs in `f32`; gradient and equivariance oracles rerun the same
/// graph in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0.unsigned_abs() + (cols - 1) * strides.1.unsigned_abs() + 1
}

fn check_extents<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    c: &[T],
    sc: (isize, isize),
) {
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0 && sc.0 >= 0 && sc.1 >= 0);
    assert!(span(m, k, sa) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, sc) <= c.len(), "gemm: output out of bounds");
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        sa: (isize, isize),
        b: &[f32],
        sb: (isize, isize),
        beta: f32,
        c: &mut [f32],
        sc: (isize, isize),
    ) {
        check_extents(m, k, n, a, sa, b, sb, c, sc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above, strides are non-negative.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                sc.0,
                sc.1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        beta: f64,
        c: &mut [f64],
        sc: (isize, isize),
    ) {
        check_extents(m, k, n, a, sa, b, sb, c, sc);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above, strides are non-negative.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                sc.0,
                sc.1,
            );
        }
    }
}
