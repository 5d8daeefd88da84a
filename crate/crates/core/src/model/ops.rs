//! Dense kernels on row-major slices. Matrices are stored `(in, out)`, so a
//! row vector times a matrix is `y = x W`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Scalar type of the model: `f32` for inference, `f64` for training.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {}

impl<T: Float + Sum + Default + Debug + Send + Sync + 'static> Real for T {}

#[inline]
pub fn lit<F: Real>(x: f64) -> F {
    F::from(x).unwrap()
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `y += x W` for one row.
pub fn vec_mat_acc<F: Real>(x: &[F], w: &[F], y: &mut [F]) {
    let out = y.len();
    debug_assert_eq!(w.len(), x.len() * out);
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let row = &w[i * out..(i + 1) * out];
        for (yo, &wo) in y.iter_mut().zip(row) {
            *yo = *yo + xi * wo;
        }
    }
}

/// `y = x W` for one row.
pub fn vec_mat<F: Real>(x: &[F], w: &[F], y: &mut [F]) {
    y.iter_mut().for_each(|v| *v = F::zero());
    vec_mat_acc(x, w, y);
}

/// `dx += W dy` (the transpose product) for one row.
pub fn mat_vec_acc<F: Real>(w: &[F], dy: &[F], dx: &mut [F]) {
    let out = dy.len();
    debug_assert_eq!(w.len(), dx.len() * out);
    for (i, d) in dx.iter_mut().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        let mut s = F::zero();
        for (&wo, &g) in row.iter().zip(dy) {
            s = s + wo * g;
        }
        *d = *d + s;
    }
}

/// `gw += x dyᵀ` (outer product) for one row.
pub fn outer_acc<F: Real>(x: &[F], dy: &[F], gw: &mut [F]) {
    let out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        let row = &mut gw[i * out..(i + 1) * out];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g = *g + xi * d;
        }
    }
}

/// `Y = X W` for `rows` rows.
pub fn matmul<F: Real>(x: &[F], w: &[F], din: usize, dout: usize, y: &mut [F]) {
    let rows = x.len() / din;
    for t in 0..rows {
        vec_mat(&x[t * din..(t + 1) * din], w, &mut y[t * dout..(t + 1) * dout]);
    }
}

/// `DX += DY Wᵀ`.
pub fn matmul_bt_acc<F: Real>(dy: &[F], w: &[F], din: usize, dout: usize, dx: &mut [F]) {
    let rows = dy.len() / dout;
    for t in 0..rows {
        mat_vec_acc(w, &dy[t * dout..(t + 1) * dout], &mut dx[t * din..(t + 1) * din]);
    }
}

/// `GW += Xᵀ DY`.
pub fn matmul_at_acc<F: Real>(x: &[F], dy: &[F], din: usize, dout: usize, gw: &mut [F]) {
    let rows = x.len() / din;
    for t in 0..rows {
        outer_acc(&x[t * din..(t + 1) * din], &dy[t * dout..(t + 1) * dout], gw);
    }
}

/// Normalizes `x` to zero mean and unit variance; returns `1/sqrt(var+eps)`.
pub fn normalize<F: Real>(x: &[F], eps: F, xn: &mut [F]) -> F {
    let n = lit::<F>(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + eps).sqrt();
    for (o, &v) in xn.iter_mut().zip(x) {
        *o = (v - mean) * rstd;
    }
    rstd
}

/// Backward of [`normalize`]: `dx += rstd (dxn - mean(dxn) - xn mean(dxn xn))`.
pub fn normalize_backward<F: Real>(xn: &[F], rstd: F, dxn: &[F], dx: &mut [F]) {
    let n = lit::<F>(xn.len() as f64);
    let m1 = dxn.iter().copied().sum::<F>() / n;
    let m2 = dxn.iter().zip(xn).map(|(&a, &b)| a * b).sum::<F>() / n;
    for ((d, &g), &v) in dx.iter_mut().zip(dxn).zip(xn) {
        *d = *d + rstd * (g - m1 - v * m2);
    }
}

pub const LN_EPS: f64 = 1e-5;
pub const GN_EPS: f64 = 64e-5;

/// LayerNorm with affine weights; returns `rstd` and leaves the normalized
/// input in `xn`.
pub fn layer_norm<F: Real>(x: &[F], g: &[F], b: &[F], xn: &mut [F], y: &mut [F]) -> F {
    let rstd = normalize(x, lit(LN_EPS), xn);
    for i in 0..x.len() {
        y[i] = xn[i] * g[i] + b[i];
    }
    rstd
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Real>(
    xn: &[F],
    rstd: F,
    g: &[F],
    dy: &[F],
    dx: &mut [F],
    dg: Option<&mut [F]>,
    db: Option<&mut [F]>,
    scratch: &mut [F],
) {
    for i in 0..xn.len() {
        scratch[i] = dy[i] * g[i];
    }
    if let Some(dg) = dg {
        for i in 0..xn.len() {
            dg[i] = dg[i] + dy[i] * xn[i];
        }
    }
    if let Some(db) = db {
        for i in 0..xn.len() {
            db[i] = db[i] + dy[i];
        }
    }
    normalize_backward(xn, rstd, scratch, dx);
}

/// Numerically stable log-softmax cross-entropy against `target`; writes
/// `softmax - onehot` scaled by `scale` into `dlogits` when given.
pub fn cross_entropy<F: Real>(logits: &[F], target: usize, scale: F, dlogits: Option<&mut [F]>) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some(d) = dlogits {
        for (i, (o, &l)) in d.iter_mut().zip(logits).enumerate() {
            let p = (l - lse).exp();
            *o = scale * if i == target { p - F::one() } else { p };
        }
    }
    lse - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes() {
        // x = [1, 2], W = [[1, 2, 3], [4, 5, 6]]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = [0.0; 3];
        vec_mat(&[1.0, 2.0], &w, &mut y);
        assert_eq!(y, [9.0, 12.0, 15.0]);
        let mut dx = [0.0; 2];
        mat_vec_acc(&w, &[1.0, 0.0, 1.0], &mut dx);
        assert_eq!(dx, [4.0, 10.0]);
    }

    #[test]
    fn normalize_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let dy = [0.5, -0.25, 1.0, 0.1];
        let f = |x: &[f64]| {
            let mut xn = [0.0; 4];
            normalize(x, 1e-5, &mut xn);
            xn.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut xn = [0.0; 4];
        let rstd = normalize(&x, 1e-5, &mut xn);
        let mut dx = [0.0; 4];
        normalize_backward(&xn, rstd, &dy, &mut dx);
        for i in 0..4 {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-6, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let l = [0.25f64; 30];
        assert!((cross_entropy(&l, 3, 1.0, None) - (30f64).ln()).abs() < 1e-12);
    }
}
