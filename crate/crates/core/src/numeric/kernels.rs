//! Raw f64 slice math shared by the eager tensor ops and the tape.
//!
//! Everything here is deterministic: plain sequential loops, no threading,
//! no fast-math. Repeated calls on identical inputs are bit-identical.

/// out += a[m×k] · b[k×n]
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// out += a[m×k] · b[n×k]ᵀ
pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

/// out += a[k×m]ᵀ · b[k×n]
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += a_pi * b_row[j];
            }
        }
    }
}

/// Row-wise softmax with max subtraction. `out` may alias nothing.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// Softmax VJP per row: dx = p ∘ (dy − ⟨dy, p⟩).
pub fn softmax_rows_backward(p: &[f64], dy: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let base = r * cols;
        let mut dot = 0.0;
        for c in 0..cols {
            dot += dy[base + c] * p[base + c];
        }
        for c in 0..cols {
            dx[base + c] += p[base + c] * (dy[base + c] - dot);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Row-wise layer normalization without affine terms: (x − μ) / sqrt(σ² + ε).
pub fn layer_norm_rows(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            *o = (v - mean) * inv;
        }
    }
}

/// Layer-norm VJP. `y` is the normalized output of the forward pass.
pub fn layer_norm_rows_backward(
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
    dx: &mut [f64],
) {
    let n = cols as f64;
    for r in 0..rows {
        let base = r * cols;
        let row = &x[base..base + cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let mut mean_dy = 0.0;
        let mut mean_dy_y = 0.0;
        for c in 0..cols {
            mean_dy += dy[base + c];
            mean_dy_y += dy[base + c] * y[base + c];
        }
        mean_dy /= n;
        mean_dy_y /= n;
        for c in 0..cols {
            dx[base + c] += inv * (dy[base + c] - mean_dy - y[base + c] * mean_dy_y);
        }
    }
}

/// Row-wise L2 normalization: x / max(‖x‖₂, ε).
pub fn l2_normalize_rows(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            *o = v / denom;
        }
    }
}

/// L2-normalize VJP. Below the ε floor the map is linear (x / ε).
pub fn l2_normalize_rows_backward(
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
    dx: &mut [f64],
) {
    for r in 0..rows {
        let base = r * cols;
        let norm = x[base..base + cols].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > eps {
            let mut dot = 0.0;
            for c in 0..cols {
                dot += dy[base + c] * y[base + c];
            }
            for c in 0..cols {
                dx[base + c] += (dy[base + c] - y[base + c] * dot) / norm;
            }
        } else {
            for c in 0..cols {
                dx[base + c] += dy[base + c] / eps;
            }
        }
    }
}

/// Rotate dimension pairs (2i, 2i+1) of a [batch×heads×seq×head_dim] block by
/// pos · base^(−2i/head_dim). `sign` is +1 for forward, −1 for the VJP.
pub fn rope_rotate(
    x: &[f64],
    batch: usize,
    heads: usize,
    seq: usize,
    head_dim: usize,
    positions: &[f64],
    base: f64,
    sign: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(head_dim % 2, 0);
    debug_assert_eq!(positions.len(), seq);
    let half = head_dim / 2;
    // Per-pair inverse frequencies, shared across batch and heads.
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                let off = ((b * heads + h) * seq + s) * head_dim;
                let pos = positions[s];
                for i in 0..half {
                    let theta = sign * pos * inv_freq[i];
                    let (sin, cos) = theta.sin_cos();
                    let a = x[off + 2 * i];
                    let bb = x[off + 2 * i + 1];
                    out[off + 2 * i] = a * cos - bb * sin;
                    out[off + 2 * i + 1] = a * sin + bb * cos;
                }
            }
        }
    }
}

/// Copy `x` permuting its axes: out[idx_perm] = x[idx].
pub fn permute_copy(x: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64]) {
    let rank = shape.len();
    debug_assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Strides of the input in element units.
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_strides_src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate().take(total) {
        let mut src = 0usize;
        for d in 0..rank {
            src += idx[d] * out_strides_src[d];
        }
        *slot = x[src];
        let _ = o;
        // Odometer increment over the output shape.
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Stable per-row value of logsumexp(z) − z[diag], where `diag` is the row
/// index itself. Exact for tiny losses: the term at the row max contributes
/// through ln_1p instead of being absorbed into 1.0.
pub fn contrastive_row_loss(z: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert!(cols >= rows);
    for r in 0..rows {
        let row = &z[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        let mut jmax = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                jmax = j;
            }
        }
        let mut rest = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if j != jmax {
                rest += (v - max).exp();
            }
        }
        out[r] = (max - row[r]) + rest.ln_1p();
    }
}
