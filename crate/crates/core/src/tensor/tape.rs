use super::kernels::{self, AttentionGeometry, BATCHNORM_EPS};
use super::{Precision, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Inputs are earlier nodes on the same tape.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    GroupMeanRows(Var, usize),
    AppendOne(Var),
    Outer3(Var, Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Bce {
        p: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Single-threaded gradient tape. One training step owns one tape.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node that requires grad, after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        if self.precision == Precision::Single {
            let p = self.precision;
            value.data_mut().iter_mut().for_each(|x| *x = p.round(*x));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", value, Op::Leaf, &[])?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// A tensor whose gradient is tracked (a parameter or a checked input).
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        self.push("linear", out, Op::Linear(x, w, b), &[x, w, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = kernels::relu(self.value(a));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = kernels::sigmoid(self.value(a));
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a));
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(a))?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Contract {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).shape().len() != 2 || self.value(p).rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let out = kernels::group_mean_rows(self.value(a), group)?;
        self.push("group_mean_rows", out, Op::GroupMeanRows(a, group), &[a])
    }

    pub fn append_one(&mut self, a: Var) -> Result<Var> {
        let out = kernels::append_one(self.value(a));
        self.push("append_one", out, Op::AppendOne(a), &[a])
    }

    pub fn outer3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let out = kernels::outer3(self.value(a), self.value(b), self.value(c))?;
        self.push("outer3", out, Op::Outer3(a, b, c), &[a, b, c])
    }

    /// Batched multi-head scaled dot-product attention over pre-projected
    /// `q`, `k`, `v` (see [`AttentionGeometry`] for the layout).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let geom = AttentionGeometry::infer(self.value(q), self.value(k), self.value(v), batch, heads)?;
        let (out, probs) = kernels::attention_heads(self.value(q), self.value(k), self.value(v), &geom);
        let out = Tensor::new(vec![geom.batch * geom.len_q, geom.heads * geom.d_v], out)?;
        self.push("attention", out, Op::Attention { q, k, v, geom, probs }, &[q, k, v])
    }

    /// Attention weights recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionGeometry, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { geom, probs, .. } => Some((geom, probs)),
            _ => None,
        }
    }

    /// Batch normalization. With `stats = None` the batch statistics are used
    /// (train mode, needs at least two rows) and returned so the caller can
    /// update its running averages; with `Some((mean, var))` the given
    /// statistics are treated as constants (eval mode).
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(TensorError::Contract {
                op: "batchnorm",
                msg: format!("expected [B, d], got {:?}", xv.shape()),
            });
        }
        let (b, d) = xv.as_matrix_dims();
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                if b < 2 {
                    return Err(TensorError::BatchSize(b));
                }
                kernels::batch_moments(xv)
            }
        };
        let out = kernels::batchnorm_apply(xv, &mean, &var, self.value(gamma), self.value(beta))?;
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + BATCHNORM_EPS).sqrt()).collect();
        let mut x_hat = xv.data().to_vec();
        for row in x_hat.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let v = self.push(
            "batchnorm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    /// Mean binary cross-entropy of probabilities `p[B]` against 0/1 labels.
    /// Probabilities are clamped to `[eps, 1 − eps]` before the logarithms.
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(TensorError::Shape {
                op: "bce",
                left: pv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Contract {
                op: "bce",
                msg: format!("label {bad} outside {{0, 1}}"),
            });
        }
        let n = labels.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
            })
            .sum();
        self.push(
            "bce",
            Tensor::scalar(-total / n),
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
            &[p],
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// node that requires grad until [`Tape::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if !node.requires_grad {
                continue;
            }
            let local = grads[i].take();
            let gshape = node.value.shape().to_vec();
            let dst = node.grad.get_or_insert_with(|| Tensor::zeros(&gshape));
            if let Some(local) = local {
                for (d, s) in dst.data_mut().iter_mut().zip(local) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    kernels::gemm_a_bt_acc(g, bv.data(), m, n, k, acc(&mut grads[a.0], m * k));
                }
                if self.wants(*b) {
                    kernels::gemm_at_b_acc(av.data(), g, m, k, n, acc(&mut grads[b.0], k * n));
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, d_in) = xv.as_matrix_dims();
                let d_out = wv.shape()[1];
                if self.wants(*x) {
                    kernels::gemm_a_bt_acc(g, wv.data(), rows, d_out, d_in, acc(&mut grads[x.0], rows * d_in));
                }
                if self.wants(*w) {
                    kernels::gemm_at_b_acc(xv.data(), g, rows, d_in, d_out, acc(&mut grads[w.0], d_in * d_out));
                }
                if self.wants(*b) {
                    let gb = acc(&mut grads[b.0], d_out);
                    for row in g.chunks(d_out) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let dst = acc(&mut grads[v.0], g.len());
                        dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let dst = acc(&mut grads[a.0], g.len());
                    for ((d, s), o) in dst.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                if self.wants(*b) {
                    let dst = acc(&mut grads[b.0], g.len());
                    for ((d, s), o) in dst.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                let dst = acc(&mut grads[a.0], g.len());
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let dst = acc(&mut grads[a.0], g.len());
                for ((d, s), xv) in dst.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let dst = acc(&mut grads[a.0], g.len());
                for ((d, s), yv) in dst.iter_mut().zip(g).zip(y) {
                    *d += s * yv * (1.0 - yv);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let dst = acc(&mut grads[a.0], g.len());
                for ((drow, grow), yrow) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let dst = acc(&mut grads[a.0], g.len());
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] += g[i * n + j];
                    }
                }
            }
            Op::Reshape(a) => {
                let dst = acc(&mut grads[a.0], g.len());
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                let dst = acc(&mut grads[a.0], len);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.wants(*p) {
                        let dst = acc(&mut grads[p.0], rows * c);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            dst[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += c;
                }
            }
            Op::GroupMeanRows(a, group) => {
                let d = node.value.cols();
                let rows = self.value(*a).rows();
                let inv = 1.0 / *group as f64;
                let dst = acc(&mut grads[a.0], rows * d);
                for r in 0..rows {
                    let src = &g[(r / group) * d..(r / group + 1) * d];
                    dst[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, s)| *x += s * inv);
                }
            }
            Op::AppendOne(a) => {
                let d = self.value(*a).cols();
                let rows = self.value(*a).rows();
                let dst = acc(&mut grads[a.0], rows * d);
                for r in 0..rows {
                    let src = &g[r * (d + 1)..r * (d + 1) + d];
                    dst[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(x, s)| *x += s);
                }
            }
            Op::Outer3(a, b, c) => {
                let (av, bv, cv) = (self.value(*a), self.value(*b), self.value(*c));
                let (rows, na) = av.as_matrix_dims();
                let (nb, nc) = (bv.cols(), cv.cols());
                let width = na * nb * nc;
                let mut ga = vec![0.0; rows * na];
                let mut gb = vec![0.0; rows * nb];
                let mut gc = vec![0.0; rows * nc];
                for r in 0..rows {
                    let (ar, br, cr) = (av.row(r), bv.row(r), cv.row(r));
                    let gr = &g[r * width..(r + 1) * width];
                    for i in 0..na {
                        for j in 0..nb {
                            let base = (i * nb + j) * nc;
                            let ab = ar[i] * br[j];
                            let mut dot_c = 0.0;
                            for k in 0..nc {
                                let gv = gr[base + k];
                                dot_c += gv * cr[k];
                                gc[r * nc + k] += gv * ab;
                            }
                            ga[r * na + i] += dot_c * br[j];
                            gb[r * nb + j] += dot_c * ar[i];
                        }
                    }
                }
                for (v, local) in [(a, ga), (b, gb), (c, gc)] {
                    if self.wants(*v) {
                        let dst = acc(&mut grads[v.0], local.len());
                        dst.iter_mut().zip(local).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => self.attention_backward(*q, *k, *v, geom, probs, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let d = node.value.cols();
                let b = node.value.rows();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let dst = acc(&mut grads[gamma.0], d);
                    for (grow, xrow) in g.chunks(d).zip(x_hat.chunks(d)) {
                        for j in 0..d {
                            dst[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let dst = acc(&mut grads[beta.0], d);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            dst[j] += grow[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let dst = acc(&mut grads[x.0], b * d);
                    if *batch_stats {
                        let bf = b as f64;
                        for j in 0..d {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for r in 0..b {
                                let dxh = g[r * d + j] * gam[j];
                                sum_g += dxh;
                                sum_gx += dxh * x_hat[r * d + j];
                            }
                            for r in 0..b {
                                let dxh = g[r * d + j] * gam[j];
                                dst[r * d + j] += inv_std[j] / bf * (bf * dxh - sum_g - x_hat[r * d + j] * sum_gx);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..d {
                                dst[r * d + j] += g[r * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Bce { p, labels, eps } => {
                let pv = self.value(*p).data();
                let n = labels.len() as f64;
                let dst = acc(&mut grads[p.0], pv.len());
                for ((d, &pi), &y) in dst.iter_mut().zip(pv).zip(labels) {
                    // clamped region has zero slope
                    if pi < *eps || pi > 1.0 - *eps {
                        continue;
                    }
                    *d += -g[0] * (y / pi - (1.0 - y) / (1.0 - pi)) / n;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttentionGeometry,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionGeometry {
            batch,
            heads,
            len_q,
            len_k,
            d_head,
            d_v,
        } = *geom;
        let qc = heads * d_head;
        let vc = heads * d_v;
        let scale = 1.0 / (d_head as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; len_k];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * len_q * len_k;
                for i in 0..len_q {
                    let prow = &probs[pbase + i * len_k..pbase + (i + 1) * len_k];
                    let grow = &g[(b * len_q + i) * vc + h * d_v..][..d_v];
                    for j in 0..len_k {
                        let voff = (b * len_k + j) * vc + h * d_v;
                        let vrow = &vd[voff..voff + d_v];
                        dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        for (t, gval) in grow.iter().enumerate() {
                            gv[voff + t] += prow[j] * gval;
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(x, y)| x * y).sum();
                    let qoff = (b * len_q + i) * qc + h * d_head;
                    for j in 0..len_k {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * len_k + j) * qc + h * d_head;
                        for t in 0..d_head {
                            gq[qoff + t] += ds * kd[koff + t];
                            gk[koff + t] += ds * qd[qoff + t];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                let dst = acc(&mut grads[var.0], local.len());
                dst.iter_mut().zip(local).for_each(|(d, s)| *d += s);
            }
        }
    }
}
