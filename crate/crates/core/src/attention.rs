//! Scaled dot-product and multi-head attention.
//!
//! A head projects the query source with `W_Q` and the key/value source with
//! `W_K`, `W_V`, attends with weights `softmax(Q·Kᵀ/√d_h)`, and the heads are
//! concatenated and mixed by `W_O`. Self-attention passes the same tensor as
//! query and key/value source; cross-attention takes keys and values from
//! another channel, so the output length always follows the query.

use crate::nn::{glorot, Bindings, ParamId, ParamStore};
use crate::tensor::{Result, Tape, TensorError, Var};

/// Weight set `{W_Q, W_K, W_V, W_O}` of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
    /// Per-head query/key width; also the `√d_h` scale.
    pub d_head: usize,
    pub d_v: usize,
}

impl AttentionParams {
    /// Glorot-initialized block with `d_h = d_v = d_model / n_heads`.
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(TensorError::Contract {
                op: "multi_head",
                msg: format!("d_model {d_model} is not divisible into {n_heads} heads"),
            });
        }
        let d_head = d_model / n_heads;
        let inner = n_heads * d_head;
        let mut mk = |suffix: &str, rows: usize, cols: usize| {
            let n = format!("{name}.{suffix}");
            let t = glorot(seed, &n, rows, cols);
            store.add(n, t)
        };
        Ok(Self {
            w_q: mk("w_q", d_model, inner),
            w_k: mk("w_k", d_model, inner),
            w_v: mk("w_v", d_model, inner),
            w_o: mk("w_o", inner, d_model),
            n_heads,
            d_model,
            d_head,
            d_v: d_head,
        })
    }

    /// Checks the stored weight extents against the declared geometry.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let expect = [
            (self.w_q, [self.d_model, self.n_heads * self.d_head]),
            (self.w_k, [self.d_model, self.n_heads * self.d_head]),
            (self.w_v, [self.d_model, self.n_heads * self.d_v]),
            (self.w_o, [self.n_heads * self.d_v, self.d_model]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape {
                return Err(TensorError::Shape {
                    op: "multi_head",
                    left: store.get(id).shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        let inner_qk = self.n_heads * self.d_head;
        let inner_v = self.n_heads * self.d_v;
        self.d_model * inner_qk * 2 + self.d_model * inner_v * 2
    }
}

/// Output of a multi-head call, with the attention node kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadOut {
    pub output: Var,
    pub attention: Var,
}

/// Multi-head attention over `batch` samples stacked row-wise.
///
/// `query_src` is `[batch·L_q, d_model]`, `kv_src` is `[batch·L_k, d_model]`;
/// the result is `[batch·L_q, d_model]`.
pub fn multi_head(
    tape: &mut Tape,
    vars: &Bindings,
    params: &AttentionParams,
    query_src: Var,
    kv_src: Var,
    batch: usize,
) -> Result<MultiHeadOut> {
    for src in [query_src, kv_src] {
        let s = tape.shape(src);
        if s.len() != 2 || s[1] != params.d_model {
            return Err(TensorError::Shape {
                op: "multi_head",
                left: s.to_vec(),
                right: vec![params.d_model],
            });
        }
    }
    let q = tape.matmul(query_src, vars.var(params.w_q))?;
    let k = tape.matmul(kv_src, vars.var(params.w_k))?;
    let v = tape.matmul(kv_src, vars.var(params.w_v))?;
    let attention = tape.attention(q, k, v, batch, params.n_heads)?;
    let output = tape.matmul(attention, vars.var(params.w_o))?;
    Ok(MultiHeadOut { output, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kernels, Precision, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cols(t: &Tensor, start: usize, width: usize) -> Tensor {
        let data = (0..t.rows())
            .flat_map(|r| t.row(r)[start..start + width].to_vec())
            .collect();
        Tensor::new(vec![t.rows(), width], data).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, 1, "a", 6, 4).is_err());
    }

    #[test]
    fn single_head_identity_output_is_plain_attention() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 3, "a", 4, 1).unwrap();
        *store.get_mut(p.w_o) = Tensor::eye(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let y = rand_tensor(&mut rng, &[5, 4]);
        let mut tape = Tape::new(Precision::Double);
        let vars = store.bind(&mut tape).unwrap();
        let (xv, yv) = (tape.constant(x.clone()).unwrap(), tape.constant(y.clone()).unwrap());
        let out = multi_head(&mut tape, &vars, &p, xv, yv, 1).unwrap();
        let q = kernels::matmul(&x, store.get(p.w_q)).unwrap();
        let k = kernels::matmul(&y, store.get(p.w_k)).unwrap();
        let v = kernels::matmul(&y, store.get(p.w_v)).unwrap();
        let expect = kernels::scaled_attention(&q, &k, &v).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn zero_output_projection_annihilates() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 3, "a", 4, 2).unwrap();
        *store.get_mut(p.w_o) = Tensor::zeros(&[4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new(Precision::Double);
        let vars = store.bind(&mut tape).unwrap();
        let x = tape.constant(rand_tensor(&mut rng, &[2, 4])).unwrap();
        let out = multi_head(&mut tape, &vars, &p, x, x, 1).unwrap();
        assert!(tape.value(out.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_heads_match_independent_heads_concatenated() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 5, "a", 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let y = rand_tensor(&mut rng, &[2, 4]);
        let mut tape = Tape::new(Precision::Double);
        let vars = store.bind(&mut tape).unwrap();
        let (xv, yv) = (tape.constant(x.clone()).unwrap(), tape.constant(y.clone()).unwrap());
        let out = multi_head(&mut tape, &vars, &p, xv, yv, 1).unwrap();

        let mut heads = Vec::new();
        for h in 0..2 {
            let wq = cols(store.get(p.w_q), h * 2, 2);
            let wk = cols(store.get(p.w_k), h * 2, 2);
            let wv = cols(store.get(p.w_v), h * 2, 2);
            let q = kernels::matmul(&x, &wq).unwrap();
            let k = kernels::matmul(&y, &wk).unwrap();
            let v = kernels::matmul(&y, &wv).unwrap();
            heads.push(kernels::scaled_attention(&q, &k, &v).unwrap());
        }
        let concat: Vec<f64> = (0..3)
            .flat_map(|r| [heads[0].row(r), heads[1].row(r)].concat())
            .collect();
        let concat = Tensor::new(vec![3, 4], concat).unwrap();
        let expect = kernels::matmul(&concat, store.get(p.w_o)).unwrap();
        assert!(tape.value(out.output).max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn batched_call_equals_per_sample_calls() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, 9, "a", 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = [rand_tensor(&mut rng, &[2, 4]), rand_tensor(&mut rng, &[2, 4])];
        let ys = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        let stack =
            |a: &Tensor, b: &Tensor| Tensor::new(vec![a.rows() + b.rows(), 4], [a.data(), b.data()].concat()).unwrap();
        let mut tape = Tape::new(Precision::Double);
        let vars = store.bind(&mut tape).unwrap();
        let x = tape.constant(stack(&xs[0], &xs[1])).unwrap();
        let y = tape.constant(stack(&ys[0], &ys[1])).unwrap();
        let both = multi_head(&mut tape, &vars, &p, x, y, 2).unwrap();
        for s in 0..2 {
            let x = tape.constant(xs[s].clone()).unwrap();
            let y = tape.constant(ys[s].clone()).unwrap();
            let one = multi_head(&mut tape, &vars, &p, x, y, 1).unwrap();
            let got = &tape.value(both.output).data()[s * 8..(s + 1) * 8];
            let diff = got
                .iter()
                .zip(tape.value(one.output).data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }
}
