use std::fmt::{Debug, Display};

use num_traits::Float;

/// Scalar types a [`Tensor`](crate::Tensor) can hold.
///
/// `f32` is used for training and inference, `f64` for gradient checking.
pub trait Element: Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
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

    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
}

impl Element for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f64 {
        v
    }
}

/// Storage orientation of a row-major operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trans {
    No,
    Yes,
}

/// Safe row-major matrix product: `c (m x n) (+)= op(a) (m x k) * op(b) (k x n)`.
///
/// With `Trans::Yes` the operand is stored transposed (`k x m` for `a`,
/// `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the length was checked and the borrow checker rules out aliasing.
    unsafe { gemm_ptr(m, k, n, a, ta, b, tb, c.as_mut_ptr(), accumulate) }
}

/// # Safety
/// `c` must be valid for `m * n` writes (and reads when accumulating) and
/// must not alias `a` or `b`.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_ptr<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: *mut T,
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c, n as isize, 1);
}

/// [`gemm`] into a fresh `m x n` buffer, skipping the zero fill.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_new<T: Element>(m: usize, k: usize, n: usize, a: &[T], ta: Trans, b: &[T], tb: Trans) -> Vec<T> {
    if m == 0 || n == 0 || k == 0 {
        return vec![T::zero(); m * n];
    }
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 the product overwrites every element of C
    // without reading it, so the buffer is fully initialized afterwards.
    unsafe {
        gemm_ptr(m, k, n, a, ta, b, tb, c.as_mut_ptr(), false);
        c.set_len(m * n);
    }
    c
}

/// Sum with eight interleaved accumulators, which lets the compiler vectorize.
pub(crate) fn lane_sum<T: Element>(x: &[T]) -> T {
    lane_fold(x.len(), |i| x[i])
}

/// `sum_i a[i] * b[i]`, accumulated like [`lane_sum`].
pub(crate) fn lane_dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    lane_fold(a.len().min(b.len()), |i| a[i] * b[i])
}

#[inline(always)]
fn lane_fold<T: Element>(n: usize, term: impl Fn(usize) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let full = n / 8 * 8;
    for base in (0..full).step_by(8) {
        for (j, a) in acc.iter_mut().enumerate() {
            *a = *a + term(base + j);
        }
    }
    let tail = (full..n).fold(T::zero(), |s, i| s + term(i));
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}
