//! Pure matrix kernels and the analytic derivatives the graph uses.

use super::{KernelError, Matrix};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, KernelError> {
    if a.cols() != b.rows() {
        return Err(KernelError::Shape { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(orow, aik, b.row(k));
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `a × bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, KernelError> {
    if a.cols() != b.cols() {
        return Err(KernelError::Shape { op: "matmul_nt", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `aᵀ × b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, KernelError> {
    if a.rows() != b.rows() {
        return Err(KernelError::Shape { op: "matmul_tn", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for k in 0..a.rows() {
        let br = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki != 0.0 {
                axpy(&mut out[i * n..(i + 1) * n], aki, br);
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

fn softmax_in_place(row: &mut [f64]) {
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

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax where row `i` only sees columns `0..=i + offset`; masked entries
/// come out exactly zero.
pub fn softmax_rows_causal(x: &Matrix, offset: usize) -> Matrix {
    let mut out = x.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        let visible = (r + offset + 1).min(cols);
        let row = out.row_mut(r);
        softmax_in_place(&mut row[..visible]);
        for v in &mut row[visible..] {
            *v = 0.0;
        }
    }
    out
}

/// `dx = y ⊙ (dy − rowsum(dy ⊙ y))` for `y = softmax(x)`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let s = dot(yr, dyr);
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - s);
        }
    }
    dx
}

/// Scaled dot-product attention, `softmax(q kᵀ / √d) v`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix, KernelError> {
    attention_masked(q, k, v, None)
}

/// Attention with an optional causal offset (see [`softmax_rows_causal`]).
pub fn attention_masked(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal_offset: Option<usize>,
) -> Result<Matrix, KernelError> {
    if k.rows() != v.rows() {
        return Err(KernelError::Shape { op: "attention", left: k.shape(), right: v.shape() });
    }
    let scores = matmul_nt(q, k)?.scale(1.0 / (q.cols() as f64).sqrt());
    let weights = match causal_offset {
        Some(off) => softmax_rows_causal(&scores, off),
        None => softmax_rows(&scores),
    };
    matmul(&weights, v)
}

/// `x W + b` with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix, KernelError> {
    let mut out = matmul(x, w)?;
    out.add_row_in_place(b)?;
    Ok(out)
}

/// Cached statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix, KernelError> {
    Ok(layer_norm_cached(x, gain, bias, eps)?.0)
}

pub fn layer_norm_cached(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache), KernelError> {
    let n = x.cols();
    if gain.len() != n || bias.len() != n {
        return Err(KernelError::Shape { op: "layer_norm", left: x.shape(), right: (gain.len(), bias.len()) });
    }
    let mut xhat = Matrix::zeros(x.rows(), n);
    let mut out = Matrix::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for (((o, h), g), b) in out.row_mut(r).iter_mut().zip(&xh).zip(gain).zip(bias) {
            *o = h * g + b;
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &[f64], dy: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let n = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), n);
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..n {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dot(&dxhat, xh);
        let scale = cache.inv_std[r] / n as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = scale * (n as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

/// Mean negative log-likelihood of `targets[r]` under `softmax(logits[r])`,
/// together with the probabilities (kept for the fused gradient).
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix), KernelError> {
    if targets.len() != logits.rows() {
        return Err(KernelError::Shape {
            op: "cross_entropy",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    if targets.is_empty() {
        return Err(KernelError::EmptyShape { rows: 0, cols: logits.cols() });
    }
    let probs = softmax_rows(logits);
    let mut nll = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(KernelError::IndexOutOfRange { index: t, bound: logits.cols() });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - row[t];
    }
    Ok((nll / targets.len() as f64, probs))
}

/// Gradient of [`cross_entropy`] w.r.t. the logits: `(probs − onehot) / R`.
pub fn cross_entropy_backward(probs: &Matrix, targets: &[usize], upstream: f64) -> Matrix {
    let scale = upstream / targets.len() as f64;
    let mut g = probs.scale(scale);
    for (r, &t) in targets.iter().enumerate() {
        let v = g.get(r, t);
        g.set(r, t, v - scale);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let col = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &col).unwrap(), m(&[&[2.0], &[4.0]]));
        assert_eq!(matmul(&Matrix::zeros(2, 2), &b).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(KernelError::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]);
        let b = m(&[&[0.5, 1.0, -1.0], &[2.0, 0.0, 1.0]]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose()).unwrap());
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&a.transpose(), &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.0, 700.0] {
            let s = softmax_rows(&m(&[&[c, c, c, c]]));
            assert_eq!(s.row(0), &[0.25; 4]);
        }
        let s = softmax_rows(&m(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]]));
        for (got, want) in s.row(0).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let s = softmax_rows_causal(&m(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]), 0);
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(s.get(1, 2), 0.0);
        assert_abs_diff_eq!(s.row(1).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn attention_identical_keys_averages_values() {
        let q = m(&[&[1.0, -3.0], &[0.2, 0.7]]);
        let k = m(&[&[0.3, 0.3], &[0.3, 0.3], &[0.3, 0.3]]);
        let v = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            assert_abs_diff_eq!(out.get(r, 0), 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(out.get(r, 1), 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = m(&[&[1.0, 2.0], &[-4.0, 0.1], &[0.0, 0.0]]);
        let k = m(&[&[0.7, -0.2]]);
        let v = m(&[&[2.5, -1.5]]);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn attention_two_by_two_hand_case() {
        // d = 2, scale 1/sqrt(2). q0·k = (sqrt2, 0) → logits (1, 0).
        let s2 = 2f64.sqrt();
        let q = m(&[&[s2, 0.0], &[0.0, 0.0]]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = attention(&q, &k, &v).unwrap();
        let w0 = 1f64.exp() / (1f64.exp() + 1.0);
        assert_abs_diff_eq!(out.get(0, 0), w0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.get(0, 1), 1.0 - w0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.get(1, 0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn linear_examples() {
        let x = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(linear(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap(), x);
        let z = linear(&Matrix::zeros(3, 2), &m(&[&[1.0, 2.0], &[3.0, 4.0]]), &[0.5, -1.0]).unwrap();
        for r in 0..3 {
            assert_eq!(z.row(r), &[0.5, -1.0]);
        }
        let y = linear(&m(&[&[1.0, 2.0]]), &m(&[&[1.0, 2.0], &[3.0, 4.0]]), &[0.0, 1.0]).unwrap();
        assert_eq!(y.row(0), &[7.0, 11.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let z = layer_norm(&m(&[&[3.0, 3.0, 3.0]]), &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(z.row(0), &[0.0, 0.0, 0.0]);
        let y = layer_norm(&m(&[&[-1.0, 1.0]]), &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert_abs_diff_eq!(y.get(0, 0), -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.get(0, 1), 1.0, epsilon = 1e-9);
        // mean 2, variance 8/3.
        let y = layer_norm(&m(&[&[0.0, 2.0, 4.0]]), &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        let s = (8.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(y.get(0, 0), -2.0 / s, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(0, 1), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(0, 2), 2.0 / s, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let logits = m(&[&[0.2, -1.0, 0.7]]);
        let (_, probs) = cross_entropy(&logits, &[2]).unwrap();
        let g = cross_entropy_backward(&probs, &[2], 1.0);
        assert_abs_diff_eq!(g.get(0, 0), probs.get(0, 0), epsilon = 1e-15);
        assert_abs_diff_eq!(g.get(0, 2), probs.get(0, 2) - 1.0, epsilon = 1e-15);
        // Central differences on the scalar loss.
        let h = 1e-5;
        for j in 0..3 {
            let mut p = logits.clone();
            p.set(0, j, p.get(0, j) + h);
            let mut n = logits.clone();
            n.set(0, j, n.get(0, j) - h);
            let fd = (cross_entropy(&p, &[2]).unwrap().0 - cross_entropy(&n, &[2]).unwrap().0) / (2.0 * h);
            assert_abs_diff_eq!(fd, g.get(0, j), epsilon = 1e-8);
        }
    }
}
