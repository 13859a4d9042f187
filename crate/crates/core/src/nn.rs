//! Dense building blocks with hand-written backward passes.
//!
//! All matrices are row-major. A linear layer stores its weight as
//! `[fan_in, fan_out]` so that `y = x W + b`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `c = op(a) * op(b) + beta * c` on row-major buffers. `a` is `m x k` after
/// the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides address a dense m*k / k*n / m*n block.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
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

/// Strided view of a column band inside a row-major matrix.
#[derive(Clone, Copy, Debug)]
pub struct Band {
    pub offset: usize,
    pub row_stride: usize,
}

/// `c_band (m x n) = a_band (m x k) * b_band^T`, where `b_band` is `n x k`.
/// Used for per-head attention scores.
#[allow(clippy::too_many_arguments)]
pub fn matmul_band_nt<T: Real>(
    a: &[T],
    ab: Band,
    b: &[T],
    bb: Band,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    scale: T,
) {
    assert!(m == 0 || a.len() >= ab.offset + (m - 1) * ab.row_stride + k);
    assert!(n == 0 || b.len() >= bb.offset + (n - 1) * bb.row_stride + k);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            scale,
            a.as_ptr().add(ab.offset),
            ab.row_stride as isize,
            1,
            b.as_ptr().add(bb.offset),
            1,
            bb.row_stride as isize,
            T::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c_band (m x n) = beta * c_band + op(p) * b_band`, where `p` is a dense
/// `m x k` matrix (or `k x m` when `trans_p`) and `b_band` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_dense_band<T: Real>(
    p: &[T],
    trans_p: bool,
    b: &[T],
    bb: Band,
    c: &mut [T],
    cb: Band,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    assert!(p.len() >= m * k);
    assert!(k == 0 || b.len() >= bb.offset + (k - 1) * bb.row_stride + n);
    assert!(m == 0 || c.len() >= cb.offset + (m - 1) * cb.row_stride + n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsp, csp) = if trans_p { (1, m as isize) } else { (k as isize, 1) };
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            p.as_ptr(),
            rsp,
            csp,
            b.as_ptr().add(bb.offset),
            bb.row_stride as isize,
            1,
            beta,
            c.as_mut_ptr().add(cb.offset),
            cb.row_stride as isize,
            1,
        );
    }
}

/// `y = x W + b` for `rows` inputs.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], rows: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; rows * fan_out];
    for r in y.chunks_exact_mut(fan_out) {
        r.copy_from_slice(b);
    }
    matmul(x, false, w, false, &mut y, rows, fan_in, fan_out, T::ONE);
    y
}

/// Accumulates `dW += x^T dy`, `db += sum_rows dy` and returns `dx = dy W^T`
/// when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    want_dx: bool,
) -> Option<Vec<T>> {
    matmul(x, true, dy, false, dw, fan_in, rows, fan_out, T::ONE);
    for r in dy.chunks_exact(fan_out) {
        for (g, v) in db.iter_mut().zip(r) {
            *g += *v;
        }
    }
    if want_dx {
        let mut dx = vec![T::ZERO; rows * fan_in];
        matmul(dy, false, w, true, &mut dx, rows, fan_out, fan_in, T::ZERO);
        Some(dx)
    } else {
        None
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(u: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let th = (c * (u + k * u * u * u)).tanh();
    half * u * (T::ONE + th)
}

#[inline]
pub fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (c * (u + k * u * u * u)).tanh();
    half * (T::ONE + th) + half * u * (T::ONE - th * th) * c * (T::ONE + three * k * u * u)
}

#[inline]
pub fn sigmoid<T: Real>(u: T) -> T {
    T::ONE / (T::ONE + (-u).exp())
}

#[inline]
pub fn silu<T: Real>(u: T) -> T {
    u * sigmoid(u)
}

#[inline]
pub fn silu_grad<T: Real>(u: T) -> T {
    let s = sigmoid(u);
    s * (T::ONE + u * (T::ONE - s))
}

/// Parameter-free layer norm over the last axis. Returns `(xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &[T], dim: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let mut xhat = vec![T::ZERO; x.len()];
    let mut rstd = vec![T::ZERO; rows];
    let inv_d = T::ONE / T::from_f64(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mut mean = T::ZERO;
        for v in row {
            mean += *v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for v in row {
            let c = *v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (*v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Backward of [`layer_norm`] given the upstream gradient on `xhat`.
pub fn layer_norm_backward<T: Real>(xhat: &[T], rstd: &[T], dxhat: &[T], dim: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; xhat.len()];
    let inv_d = T::ONE / T::from_f64(dim as f64);
    for (r, rs) in rstd.iter().enumerate() {
        let xh = &xhat[r * dim..(r + 1) * dim];
        let dy = &dxhat[r * dim..(r + 1) * dim];
        let mut mean_dy = T::ZERO;
        let mut mean_dyx = T::ZERO;
        for (a, b) in dy.iter().zip(xh) {
            mean_dy += *a;
            mean_dyx += *a * *b;
        }
        mean_dy *= inv_d;
        mean_dyx *= inv_d;
        for ((o, a), b) in dx[r * dim..(r + 1) * dim].iter_mut().zip(dy).zip(xh) {
            *o = *rs * (*a - mean_dy - *b * mean_dyx);
        }
    }
    dx
}

/// Numerically stable softmax of a single row.
pub fn softmax_row<T: Real>(logits: &[T], out: &mut [T]) {
    let mut m = T::NEG_INFINITY;
    for v in logits {
        m = m.max(*v);
    }
    let mut s = T::ZERO;
    for (o, v) in out.iter_mut().zip(logits) {
        *o = (*v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for i in -30..30 {
            let u = i as f64 * 0.17;
            assert!((gelu_grad(u) - central(gelu, u)).abs() < 1e-8);
            assert!((silu_grad(u) - central(silu, u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let dim = 5;
        let x: Vec<f64> = (0..10).map(|i| ((i * 7 % 11) as f64 * 0.3).sin() * 2.0).collect();
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.91).cos()).collect();
        let loss = |x: &[f64]| {
            let (xh, _) = layer_norm(x, dim, 1e-6);
            xh.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (xh, rs) = layer_norm(&x, dim, 1e-6);
        let dx = layer_norm_backward(&xh, &rs, &w, dim);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn transposed_matmul_agrees_with_loops() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sqrt()).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, false, &b, false, &mut c, m, k, n, 0.0);
        // a^T stored k x m
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul(&at, true, &b, false, &mut c2, m, k, n, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
                assert!((c2[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
