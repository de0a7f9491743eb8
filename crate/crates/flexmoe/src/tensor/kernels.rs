//! Shared numeric kernels used by both the tape operations and the
//! forward-only convenience functions, so the two routes cannot drift apart.

/// out = a·b for row-major a [n,k] and b [k,m]; out is overwritten.
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(0.0);
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av != 0.0 {
                let brow = &b[l * m..(l + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out += g·bᵀ for g [n,m] and b [k,m]; accumulates into out [n,k].
pub fn matmul_nt_acc(g: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(g.len(), n * m);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * k);
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for l in 0..k {
            let brow = &b[l * m..(l + 1) * m];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + l] += acc;
        }
    }
}

/// out += aᵀ·g for a [n,k] and g [n,m]; accumulates into out [k,m].
pub fn matmul_tn_acc(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(g.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av != 0.0 {
                let orow = &mut out[l * m..(l + 1) * m];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log Σ exp over one row, max-subtracted for stability.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Column indices of the k largest entries of `row`, ordered by descending
/// value with ties broken toward the lowest index. The single source of
/// truth for top-k selection: both the differentiable mask and the router
/// call this, so they cannot disagree on ties.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= row.len());
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).expect("finite values").then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
