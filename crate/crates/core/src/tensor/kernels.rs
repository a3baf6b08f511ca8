//! Raw slice kernels shared by the tape's forward and backward passes.

/// Operand layout for [`gemm`]: `N` is stored as written, `T` is stored
/// transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    N,
    T,
}

/// `c = a · b (+ c if accumulate)` where `a` is logically `m×k` and `b` is
/// logically `k×n`, both row-major in their stored layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::N => (k as isize, 1),
        Layout::T => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::N => (n as isize, 1),
        Layout::T => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax of `row` restricted to the columns where `blocked` is false.
/// Blocked columns are written as exact zeros; a fully blocked row is all
/// zeros.
pub(crate) fn masked_softmax_row(row: &[f64], blocked: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (&v, &b) in row.iter().zip(blocked) {
        if !b && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, &v), &b) in out.iter_mut().zip(row).zip(blocked) {
        *o = if b { 0.0 } else { (v - max).exp() };
        total += *o;
    }
    let inv = 1.0 / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Lane count of [`dot`]. The summation order is fixed by this constant,
/// not by the SIMD width of the target, so results are identical on
/// every machine.
const LANES: usize = 8;

/// `Σ a[i] * b[i]` accumulated in [`LANES`] interleaved partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

/// `y += alpha * x`.
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

/// Row-major transpose of an `rows x cols` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Hidden activations `relu(x · w1 + b1)` of a block of rows; `x` is
/// `rows x d`, `w1` is `d x f` and `h` is `rows x f`.
pub(crate) fn ff_hidden_block(x: &[f64], w1: &[f64], b1: &[f64], h: &mut [f64]) {
    let f = b1.len();
    let d = w1.len() / f;
    let rows = x.len() / d;
    for row in h.chunks_mut(f) {
        row.copy_from_slice(b1);
    }
    gemm(rows, d, f, x, Layout::N, w1, Layout::N, h, true);
    for v in h.iter_mut() {
        *v = v.max(0.0);
    }
}
