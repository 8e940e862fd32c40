//! Hot numeric kernels shared by the plain ops and the tape.
//!
//! Every kernel accumulates with a fixed evaluation order so results are
//! bitwise reproducible run to run, and each output row is computed
//! independently of the others (so batching rows never changes bits).

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let a0 = arow[kk];
            let a1 = arow[kk + 1];
            let a2 = arow[kk + 2];
            let a3 = arow[kk + 3];
            let b0 = &b[kk * n..kk * n + n];
            let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
            let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
            let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
            for j in 0..n {
                orow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
            kk += 1;
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ  (row-by-row dot products)
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            orow[j] += dot(arow, brow);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn matmul_ta_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Dot product with a fixed 4-way split reduction tree.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let mut t = 0;
    while t + 4 <= n {
        acc[0] += a[t] * b[t];
        acc[1] += a[t + 1] * b[t + 1];
        acc[2] += a[t + 2] * b[t + 2];
        acc[3] += a[t + 3] * b[t + 3];
        t += 4;
    }
    let mut tail = 0.0;
    while t < n {
        tail += a[t] * b[t];
        t += 1;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044_715;

/// GELU, tanh approximation: 0.5·x·(1 + tanh(c0·(x + c1·x³)))
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Row-wise softmax with per-row max subtraction, written into `out`.
pub fn softmax_rows(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let oi = &mut out[r * cols..(r + 1) * cols];
        let max = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in oi.iter_mut().zip(xi) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in oi.iter_mut() {
            *o *= inv;
        }
    }
}

/// Per-row mean and reciprocal standard deviation (population variance + eps).
pub fn row_stats(x: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<(f64, f64)> {
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let mean = xi.iter().sum::<f64>() / cols as f64;
        let var = xi.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        stats.push((mean, 1.0 / (var + eps).sqrt()));
    }
    stats
}

/// Numerically stable softplus: ln(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let m = 7;
        let k = 5;
        let n = 9;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[i * k + t] * b[t * n + j];
                }
                assert!((out[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bt_and_ta_agree_with_explicit_transpose() {
        let m = 4;
        let k = 6;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 7.0).collect();
        let b: Vec<f64> = (0..n * k).map(|i| 0.5 * i as f64).collect();
        // a @ b^T via explicit transpose of b
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for t in 0..k {
                bt[t * n + j] = b[j * k + t];
            }
        }
        let mut want = vec![0.0; m * n];
        matmul_acc(&a, &bt, &mut want, m, k, n);
        let mut got = vec![0.0; m * n];
        matmul_bt_acc(&a, &b, &mut got, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // a^T @ c via explicit transpose of a
        let c: Vec<f64> = (0..m * n).map(|i| (i as f64).sqrt()).collect();
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a[i * k + t];
            }
        }
        let mut want2 = vec![0.0; k * n];
        matmul_acc(&at, &c, &mut want2, k, m, n);
        let mut got2 = vec![0.0; k * n];
        matmul_ta_acc(&a, &c, &mut got2, m, k, n);
        for (g, w) in got2.iter().zip(&want2) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-40.0) < 1e-15);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
    }
}
