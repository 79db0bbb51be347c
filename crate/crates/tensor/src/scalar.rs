use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = a · b + beta · c` for row/column strided matrices
    /// (`a` is m×k, `b` is k×n, `c` is m×n).
    ///
    /// # Safety
    /// Every strided index into `a`, `b` and `c` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView { rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Bounds-checked wrapper over [`Scalar::gemm_raw`]: `c = a·b + beta·c`.
pub fn gemm<T: Scalar>(a: &[T], av: MatView, b: &[T], bv: MatView, c: &mut [T], cv: MatView, beta: T) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!(av.rows, cv.rows, "gemm row dims");
    assert_eq!(bv.cols, cv.cols, "gemm col dims");
    assert!(av.max_index() <= a.len(), "gemm lhs out of bounds");
    assert!(bv.max_index() <= b.len(), "gemm rhs out of bounds");
    assert!(cv.max_index() <= c.len(), "gemm out out of bounds");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: strided extents checked against slice lengths above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
