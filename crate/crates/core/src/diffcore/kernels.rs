//! Dense loops shared by forward and backward rules.

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ b` for `a: [m, k]`, `b: [m, n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a bᵀ` for `a: [m, n]`, `b: [k, n]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = arow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Pairwise (cascade) summation; bounds rounding drift on long reductions.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Row maxima of an `[m, n]` matrix.
fn row_max(z: &[f64], r: usize, n: usize) -> f64 {
    z[r * n..(r + 1) * n]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Row-wise softmax of `z − rowmax(z)` clamped below at `−clamp`.
pub(crate) fn softmax_rows(z: &[f64], m: usize, n: usize, clamp: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let max = row_max(z, r, n);
        let o = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for (x, &v) in o.iter_mut().zip(&z[r * n..(r + 1) * n]) {
            *x = (v - max).max(-clamp).exp();
            total += *x;
        }
        for x in o.iter_mut() {
            *x /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(z: &[f64], m: usize, n: usize, clamp: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let max = row_max(z, r, n);
        let row = &z[r * n..(r + 1) * n];
        let lse = row
            .iter()
            .map(|v| (v - max).max(-clamp).exp())
            .sum::<f64>()
            .ln();
        for (x, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *x = (v - max).max(-clamp) - lse;
        }
    }
    out
}

/// 1 where a logit lies within `clamp` of its row maximum, 0 where it saturates.
pub(crate) fn logit_mask(z: &[f64], m: usize, n: usize, clamp: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let max = row_max(z, r, n);
        for c in r * n..(r + 1) * n {
            out[c] = if z[c] - max >= -clamp { 1.0 } else { 0.0 };
        }
    }
    out
}

/// 1 where `|z| <= clamp`, 0 where the clamp saturates.
pub(crate) fn clamp_mask(z: &[f64], clamp: f64) -> Vec<f64> {
    z.iter()
        .map(|v| if v.abs() <= clamp { 1.0 } else { 0.0 })
        .collect()
}
