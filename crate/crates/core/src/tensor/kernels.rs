//! Plain row-major f64 routines shared by the tape ops and the cache-based
//! inference paths.

/// `c (m×n) = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents and strides describe in-bounds views of the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c);
    c
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, 0.0, &mut c);
    c
}

/// `c += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, 1.0, c);
}

/// `c += a · b` where `a` is `m×k` and `b` is `k×n`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 1.0, c);
}

/// `c += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, 1.0, c);
}

/// `x · Wᵀ + bias` for a weight stored `out×in`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], bias: Option<&[f64]>, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = matmul_nt(x, w, rows, d_in, d_out);
    if let Some(b) = bias {
        for row in y.chunks_mut(d_out) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(softmax(row))` computed with max subtraction.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; row.len()];
    }
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Per-row mean and reciprocal standard deviation.
pub fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm_rows(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            o[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rotates consecutive pairs `(2i, 2i+1)` of every `head_dim`-wide block of
/// `row` by `pos * base^(-2i/head_dim)`; `sign = -1.0` applies the inverse.
pub fn rope_rotate_row(row: &mut [f64], pos: usize, head_dim: usize, base: f64, sign: f64) {
    if pos == 0 {
        return;
    }
    let half = head_dim / 2;
    for block in row.chunks_mut(head_dim) {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = (sign * pos as f64 * freq).sin_cos();
            let (x0, x1) = (block[2 * i], block[2 * i + 1]);
            block[2 * i] = x0 * c - x1 * s;
            block[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Strided gemm entry for callers that need views (e.g. convolution taps).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 1.0, c);
}
