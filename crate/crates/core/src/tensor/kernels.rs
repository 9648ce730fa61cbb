//! Forward kernels. Every function here is pure and checks its shapes.
//!
//! Matrices are 2-D row-major tensors. Functions that accept `[*, d]` inputs
//! flatten the leading axes into rows.

use super::{Result, Tensor, TensorError};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::Contract {
            op,
            msg: format!("expected a matrix, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Plain `C = A·B` on row-major slices. Reduction order over `k` is fixed.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `C += Aᵀ·B` where A is `[k, m]` and B is `[k, n]`.
pub(crate) fn gemm_at_b_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `C += A·Bᵀ` where A is `[m, k]` and B is `[n, k]`.
pub(crate) fn gemm_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Adds `b[d]` to every row of `x[*, d]`.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, d) = x.as_matrix_dims();
    if b.shape() != [d] {
        return Err(TensorError::Shape {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(out)
}

/// Affine map over the last axis: `x[*, d_in]·w[d_in, d_out] + b[d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, d_in) = x.as_matrix_dims();
    let (w_in, d_out) = require_matrix("linear", w)?;
    if w_in != d_in || b.shape() != [d_out] {
        return Err(TensorError::Shape {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut y = gemm(x.data(), w.data(), rows, d_in, d_out);
    for row in y.chunks_mut(d_out) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, y)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (_, n) = x.as_matrix_dims();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

/// Row-stochastic attention weights `softmax(q·kᵀ / √d_h)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (lq, dh) = require_matrix("attention", q)?;
    let (lk, dk) = require_matrix("attention", k)?;
    if dh != dk {
        return Err(TensorError::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let mut s = vec![0.0; lq * lk];
    gemm_a_bt_acc(q.data(), k.data(), lq, dh, lk, &mut s);
    let scale = 1.0 / (dh as f64).sqrt();
    for row in s.chunks_mut(lk) {
        for v in row.iter_mut() {
            *v *= scale;
        }
        softmax_in_place(row);
    }
    Tensor::new(vec![lq, lk], s)
}

/// Single-head scaled dot-product attention.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (lk, _) = require_matrix("attention", k)?;
    let (lv, _) = require_matrix("attention", v)?;
    if lk != lv {
        return Err(TensorError::Shape {
            op: "attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let p = attention_weights(q, k)?;
    matmul(&p, v)
}

/// Geometry of a batched multi-head attention call.
///
/// Queries are `[batch·len_q, heads·d_head]`, keys `[batch·len_k, heads·d_head]`,
/// values `[batch·len_k, heads·d_v]`. Sample `b` owns the contiguous row block
/// `b·len .. (b+1)·len` and head `h` owns the column block `h·d .. (h+1)·d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub heads: usize,
    pub len_q: usize,
    pub len_k: usize,
    pub d_head: usize,
    pub d_v: usize,
}

impl AttentionGeometry {
    pub fn infer(q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, heads: usize) -> Result<Self> {
        let (rq, cq) = require_matrix("attention", q)?;
        let (rk, ck) = require_matrix("attention", k)?;
        let (rv, cv) = require_matrix("attention", v)?;
        let mismatch = |l: &Tensor, r: &Tensor| TensorError::Shape {
            op: "attention",
            left: l.shape().to_vec(),
            right: r.shape().to_vec(),
        };
        if batch == 0 || heads == 0 {
            return Err(TensorError::Contract {
                op: "attention",
                msg: format!("batch ({batch}) and heads ({heads}) must be positive"),
            });
        }
        if cq != ck {
            return Err(mismatch(q, k));
        }
        if rk != rv {
            return Err(mismatch(k, v));
        }
        if rq % batch != 0 || rk % batch != 0 || cq % heads != 0 || cv % heads != 0 {
            return Err(TensorError::Contract {
                op: "attention",
                msg: format!(
                    "shapes {:?}/{:?}/{:?} do not split into {batch} samples x {heads} heads",
                    q.shape(),
                    k.shape(),
                    v.shape()
                ),
            });
        }
        Ok(Self {
            batch,
            heads,
            len_q: rq / batch,
            len_k: rk / batch,
            d_head: cq / heads,
            d_v: cv / heads,
        })
    }
}

/// Batched multi-head attention core (no projections). Returns the
/// concatenated head outputs and the attention weights laid out as
/// `[batch][head][len_q][len_k]`.
pub fn attention_heads(q: &Tensor, k: &Tensor, v: &Tensor, g: &AttentionGeometry) -> (Vec<f64>, Vec<f64>) {
    let AttentionGeometry {
        batch,
        heads,
        len_q,
        len_k,
        d_head,
        d_v,
    } = *g;
    let qc = heads * d_head;
    let vc = heads * d_v;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0; batch * len_q * vc];
    let mut probs = vec![0.0; batch * heads * len_q * len_k];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * len_q * len_k;
            for i in 0..len_q {
                let qrow = &qd[(b * len_q + i) * qc + h * d_head..][..d_head];
                let prow = &mut probs[pbase + i * len_k..pbase + (i + 1) * len_k];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &kd[(b * len_k + j) * qc + h * d_head..][..d_head];
                    *p = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(b * len_q + i) * vc + h * d_v..][..d_v];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &vd[(b * len_k + j) * vc + h * d_v..][..d_v];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Per-feature batch statistics: mean and biased variance of `x[B, d]`.
pub fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, d) = x.as_matrix_dims();
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= b as f64);
    (mean, var)
}

/// `gamma·(x − mean)/√(var + ε) + beta` per feature column.
pub fn batchnorm_apply(x: &Tensor, mean: &[f64], var: &[f64], gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, d) = x.as_matrix_dims();
    if gamma.shape() != [d] || beta.shape() != [d] || mean.len() != d || var.len() != d {
        return Err(TensorError::Shape {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for j in 0..d {
            let inv = 1.0 / (var[j] + BATCHNORM_EPS).sqrt();
            row[j] = gamma.data()[j] * (row[j] - mean[j]) * inv + beta.data()[j];
        }
    }
    Ok(out)
}

/// Means over consecutive row groups: `[B·g, d] → [B, d]`.
pub fn group_mean_rows(x: &Tensor, group: usize) -> Result<Tensor> {
    let (rows, d) = x.as_matrix_dims();
    if group == 0 || rows % group != 0 {
        return Err(TensorError::Contract {
            op: "group_mean_rows",
            msg: format!("{rows} rows do not split into groups of {group}"),
        });
    }
    let b = rows / group;
    let mut out = vec![0.0; b * d];
    for (r, row) in x.data().chunks(d).enumerate() {
        let o = &mut out[(r / group) * d..(r / group + 1) * d];
        for (ov, v) in o.iter_mut().zip(row) {
            *ov += v;
        }
    }
    let inv = 1.0 / group as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![b, d], out)
}

/// `[B, d] → [B, d + 1]` with a trailing constant-one column.
pub fn append_one(x: &Tensor) -> Tensor {
    let (b, d) = x.as_matrix_dims();
    let mut out = Vec::with_capacity(b * (d + 1));
    for row in x.data().chunks(d) {
        out.extend_from_slice(row);
        out.push(1.0);
    }
    Tensor::new(vec![b, d + 1], out).expect("positive extents")
}

/// Row-wise three-way outer product flattened in `(i, j, k)` order with `k`
/// fastest: `out[r, (i·nb + j)·nc + k] = a[r,i]·b[r,j]·c[r,k]`.
pub fn outer3(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (ra, na) = a.as_matrix_dims();
    let (rb, nb) = b.as_matrix_dims();
    let (rc, nc) = c.as_matrix_dims();
    if ra != rb || rb != rc {
        return Err(TensorError::Shape {
            op: "outer3",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let width = na * nb * nc;
    let mut out = vec![0.0; ra * width];
    for r in 0..ra {
        let (ar, br, cr) = (a.row(r), b.row(r), c.row(r));
        let o = &mut out[r * width..(r + 1) * width];
        for i in 0..na {
            for j in 0..nb {
                let ab = ar[i] * br[j];
                let base = (i * nb + j) * nc;
                for k in 0..nc {
                    o[base + k] = ab * cr[k];
                }
            }
        }
    }
    Tensor::new(vec![ra, width], out)
}
