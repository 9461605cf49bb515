//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here operates on plain [`Tensor`] values; the tape in
//! [`super::tape`] records which kernel produced which node and replays
//! the matching `*_vjp` during the backward sweep.
//!
//! Shape rules are enforced with panics that carry both shapes: a
//! mismatched call is a programming error in model code, not a
//! recoverable condition.

use super::tensor::Tensor;

/// Row-major GEMM: `c[m x n] (+)= alpha * a . b` where `a` and `b` are
/// addressed through explicit row/column strides so transposed reads
/// need no copy.
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
    debug_assert!(c.len() >= m * n);
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

/// Plain row-major matrix product `a[m x k] . b[k x n]` into `c`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}

/// `c[m x n] += a[m x k] . b[n x k]^T`.
fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, 1.0, c);
}

/// `c[m x n] += a[k x m]^T . b[k x n]`.
fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, 1.0, c);
}

/// Splits a matmul operand into (batch, m, k) treating all leading
/// dimensions as batch.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(
        shape.len() >= 2,
        "matmul operand must have >= 2 dims, got {shape:?}"
    );
    let k = shape[shape.len() - 1];
    let m = shape[shape.len() - 2];
    let batch = shape[..shape.len() - 2].iter().product();
    (batch, m, k)
}

/// Batched matrix product. Leading dimensions of `a` are batch
/// dimensions; `b` either carries the same batch dimensions or is a
/// plain matrix shared across the batch.
pub fn matmul_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    let (ab, m, k) = mat_dims(a.shape());
    let (bb, bk, n) = mat_dims(b.shape());
    let b_shared = b.ndim() == 2;
    assert!(
        bk == k && (b_shared || (bb == ab && a.shape()[..a.ndim() - 2] == b.shape()[..b.ndim() - 2])),
        "matmul shape mismatch: {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let mut out_shape: Vec<usize> = a.shape()[..a.ndim() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; ab * m * n];
    for i in 0..ab {
        let a_sl = &a.data()[i * m * k..(i + 1) * m * k];
        let b_sl = if b_shared {
            b.data()
        } else {
            &b.data()[i * k * n..(i + 1) * k * n]
        };
        gemm_nn(m, k, n, a_sl, b_sl, &mut out[i * m * n..(i + 1) * m * n]);
    }
    Tensor::new(out_shape, out)
}

/// Gradients of [`matmul_fwd`]: `da = g . b^T`, `db = a^T . g`,
/// summing `db` over the batch when `b` was shared.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (ab, m, k) = mat_dims(a.shape());
    let (_, _, n) = mat_dims(b.shape());
    let b_shared = b.ndim() == 2;
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    for i in 0..ab {
        let g_sl = &g.data()[i * m * n..(i + 1) * m * n];
        let a_sl = &a.data()[i * m * k..(i + 1) * m * k];
        let b_sl = if b_shared {
            b.data()
        } else {
            &b.data()[i * k * n..(i + 1) * k * n]
        };
        gemm_nt_acc(m, n, k, g_sl, b_sl, &mut da[i * m * k..(i + 1) * m * k]);
        let db_sl = if b_shared {
            &mut db[..]
        } else {
            &mut db[i * k * n..(i + 1) * k * n]
        };
        gemm_tn_acc(k, m, n, a_sl, g_sl, db_sl);
    }
    (
        Tensor::new(a.shape().to_vec(), da),
        Tensor::new(b.shape().to_vec(), db),
    )
}

/// Broadcast contract shared by add/sub/mul: `b` must be a scalar, have
/// exactly `a`'s shape, or match a suffix of `a`'s shape (so a bias of
/// shape `[d]` broadcasts over all leading dimensions of `[.., d]`).
fn check_suffix_broadcast(a: &Tensor, b: &Tensor, op: &str) {
    let ok = b.is_scalar()
        || (b.ndim() <= a.ndim() && a.shape()[a.ndim() - b.ndim()..] == *b.shape());
    assert!(
        ok,
        "{op} shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if b.is_scalar() {
        let s = b.data()[0];
        return a.map(|x| f(x, s));
    }
    let bl = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % bl]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sums `g` down to `shape`, the reduction matching suffix broadcasting.
pub fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if n == g.len() {
        return g.reshape(shape.to_vec());
    }
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = g.data().iter().sum();
    } else {
        for (i, &v) in g.data().iter().enumerate() {
            out[i % n] += v;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub fn add_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    check_suffix_broadcast(a, b, "add");
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn sub_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    check_suffix_broadcast(a, b, "sub");
    zip_broadcast(a, b, |x, y| x - y)
}

pub fn mul_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    check_suffix_broadcast(a, b, "mul");
    zip_broadcast(a, b, |x, y| x * y)
}

/// `da` for elementwise mul: `g * b` broadcast back over `a`.
pub fn mul_vjp_a(b: &Tensor, g: &Tensor) -> Tensor {
    zip_broadcast(g, b, |gv, bv| gv * bv)
}

/// `db` for elementwise mul: `g * a` reduced to `b`'s shape.
pub fn mul_vjp_b(a: &Tensor, b: &Tensor, g: &Tensor) -> Tensor {
    let prod = Tensor::new(
        g.shape().to_vec(),
        g.data()
            .iter()
            .zip(a.data())
            .map(|(&gv, &av)| gv * av)
            .collect(),
    );
    reduce_to(&prod, b.shape())
}

pub fn relu_fwd(a: &Tensor) -> Tensor {
    a.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_vjp(a: &Tensor, g: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(g.data())
            .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
            .collect(),
    )
}

pub fn sigmoid_fwd(a: &Tensor) -> Tensor {
    a.map(|x| 1.0 / (1.0 + (-x).exp()))
}

pub fn tanh_fwd(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

/// Numerically stable softmax over the last dimension. With the
/// additive large-negative masking convention, masked entries come out
/// as exactly 0 because `exp` underflows.
pub fn softmax_fwd(a: &Tensor) -> Tensor {
    let cols = a.last_dim();
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(cols) {
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
    Tensor::new(a.shape().to_vec(), data)
}

/// `dx = y * (g - sum(g * y))` per row, where `y` is the softmax output.
pub fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let cols = y.last_dim();
    let mut out = vec![0.0; y.len()];
    for r in 0..y.rows() {
        let ys = &y.data()[r * cols..(r + 1) * cols];
        let gs = &g.data()[r * cols..(r + 1) * cols];
        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
        for c in 0..cols {
            out[r * cols + c] = ys[c] * (gs[c] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes the last dimension to zero mean / unit variance
/// (population convention) and applies the learned affine `gamma`,
/// `beta` of shape `[d]`. Returns `(output, normalized, inv_std)`;
/// the latter two are cached for the backward pass.
pub fn layer_norm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let d = x.last_dim();
    assert!(
        gamma.shape() == [d] && beta.shape() == [d],
        "layer_norm affine shape mismatch: input {:?}, gamma {:?}, beta {:?}",
        x.shape(),
        gamma.shape(),
        beta.shape()
    );
    let rows = x.rows();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let n = (xs[c] - mean) * is;
            normalized[r * d + c] = n;
            out[r * d + c] = n * gamma.data()[c] + beta.data()[c];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), out),
        Tensor::new(x.shape().to_vec(), normalized),
        inv_std,
    )
}

/// Gradients of layer norm w.r.t. input, gamma and beta.
pub fn layer_norm_vjp(
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = normalized.last_dim();
    let rows = normalized.rows();
    let mut dx = vec![0.0; normalized.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for r in 0..rows {
        let ns = &normalized.data()[r * d..(r + 1) * d];
        let gs = &g.data()[r * d..(r + 1) * d];
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for c in 0..d {
            let dn = gs[c] * gamma.data()[c];
            sum_dn += dn;
            sum_dn_n += dn * ns[c];
            dgamma[c] += gs[c] * ns[c];
            dbeta[c] += gs[c];
        }
        let inv_d = 1.0 / d as f64;
        for c in 0..d {
            let dn = gs[c] * gamma.data()[c];
            dx[r * d + c] = inv_std[r] * (dn - inv_d * sum_dn - ns[c] * inv_d * sum_dn_n);
        }
    }
    (
        Tensor::new(normalized.shape().to_vec(), dx),
        Tensor::new(vec![d], dgamma),
        Tensor::new(vec![d], dbeta),
    )
}

/// Concatenates along the last dimension; all leading dims must agree.
pub fn concat_fwd(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let lead = &parts[0].shape()[..parts[0].ndim() - 1];
    let rows = parts[0].rows();
    let mut total = 0;
    for p in parts {
        assert!(
            &p.shape()[..p.ndim() - 1] == lead,
            "concat leading-dim mismatch: {:?} vs {:?}",
            parts[0].shape(),
            p.shape()
        );
        total += p.last_dim();
    }
    let mut out_shape = lead.to_vec();
    out_shape.push(total);
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let w = p.last_dim();
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Tensor::new(out_shape, data)
}

/// Splits a concat gradient back into per-part gradients.
pub fn concat_vjp(parts: &[&Tensor], g: &Tensor) -> Vec<Tensor> {
    let rows = parts[0].rows();
    let total = g.last_dim();
    let mut out: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(p.len())).collect();
    for r in 0..rows {
        let mut off = 0;
        for (i, p) in parts.iter().enumerate() {
            let w = p.last_dim();
            out[i].extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
            off += w;
        }
    }
    parts
        .iter()
        .zip(out)
        .map(|(p, d)| Tensor::new(p.shape().to_vec(), d))
        .collect()
}

/// Contiguous range `[start, start + len)` along `axis`.
pub fn slice_fwd(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    assert!(
        axis < a.ndim() && start + len <= a.shape()[axis] && len >= 1,
        "slice [{start}, {start}+{len}) on axis {axis} out of bounds for shape {:?}",
        a.shape()
    );
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let outer: usize = a.shape()[..axis].iter().product();
    let axis_len = a.shape()[axis];
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * axis_len * inner + start * inner;
        data.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    Tensor::new(shape, data)
}

/// Scatters a slice gradient back into a zero tensor of the input shape.
pub fn slice_vjp(in_shape: &[usize], axis: usize, start: usize, g: &Tensor) -> Tensor {
    let inner: usize = in_shape[axis + 1..].iter().product();
    let outer: usize = in_shape[..axis].iter().product();
    let axis_len = in_shape[axis];
    let len = g.shape()[axis];
    let mut data = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let dst = o * axis_len * inner + start * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(in_shape.to_vec(), data)
}

/// Reorders dimensions: output dim `i` is input dim `perm[i]`.
pub fn permute_fwd(a: &Tensor, perm: &[usize]) -> Tensor {
    assert!(
        perm.len() == a.ndim() && {
            let mut seen = vec![false; perm.len()];
            perm.iter().all(|&p| {
                p < perm.len() && !std::mem::replace(&mut seen[p], true)
            })
        },
        "invalid permutation {perm:?} for shape {:?}",
        a.shape()
    );
    let nd = a.ndim();
    let in_shape = a.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = vec![0.0; a.len()];
    let mut idx = vec![0usize; nd];
    let src = a.data();
    for slot in data.iter_mut() {
        let mut off = 0;
        for d in 0..nd {
            off += idx[d] * gather[d];
        }
        *slot = src[off];
        // advance the row-major multi-index over out_shape
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Inverse permutation, used to route the gradient back.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Swaps the last two dimensions.
pub fn transpose_last_perm(ndim: usize) -> Vec<usize> {
    assert!(ndim >= 2, "transpose needs >= 2 dims");
    let mut perm: Vec<usize> = (0..ndim).collect();
    perm.swap(ndim - 2, ndim - 1);
    perm
}

/// Mean squared error between two same-shape tensors, as a scalar.
pub fn mse_fwd(pred: &Tensor, target: &Tensor) -> Tensor {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "mse_loss shape mismatch: {:?} vs {:?}",
        pred.shape(),
        target.shape()
    );
    let n = pred.len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Tensor::scalar(sum / n)
}

/// `(d_pred, d_target) = (2(p - t)/n, -2(p - t)/n)` scaled by `g`.
pub fn mse_vjp(pred: &Tensor, target: &Tensor, g: f64) -> (Tensor, Tensor) {
    let n = pred.len() as f64;
    let dp: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| g * 2.0 * (p - t) / n)
        .collect();
    let dt: Vec<f64> = dp.iter().map(|&v| -v).collect();
    (
        Tensor::new(pred.shape().to_vec(), dp),
        Tensor::new(target.shape().to_vec(), dt),
    )
}
