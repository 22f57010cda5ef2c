//! Scalar abstraction and bounds-checked strided GEMM.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// # Safety
    /// Pointers and strides must describe in-bounds, non-overlapping
    /// (for `c`) matrices, as for `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes())
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes())
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    data: &'a [F],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Row-major `rows × cols` block starting at `off` with row stride `rs`.
    pub fn new(data: &'a [F], off: usize, rows: usize, cols: usize, rs: usize) -> Self {
        View {
            data,
            off,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn dense(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols)
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
}

impl<'a, F> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], off: usize, rows: usize, cols: usize, rs: usize) -> Self {
        ViewMut {
            data,
            off,
            rows,
            cols,
            rs,
        }
    }

    pub fn dense(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::new(data, 0, rows, cols, cols)
    }
}

/// `c ← alpha · a · b + beta · c`. With `beta == 0`, `c` is not read.
pub fn gemm<F: Real>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(c.rows, a.rows, "output rows differ");
    assert_eq!(c.cols, b.cols, "output cols differ");
    a.check();
    b.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let last = c.off + (c.rows - 1) * c.rs + (c.cols - 1);
    assert!(last < c.data.len(), "output view out of bounds");
    if a.cols == 0 {
        for r in 0..c.rows {
            for x in &mut c.data[c.off + r * c.rs..c.off + r * c.rs + c.cols] {
                *x = if beta == F::zero() { F::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above and `c` is uniquely borrowed.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            1,
        )
    }
}
