use super::params::{Bound, Init, Linear, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Var};

/// Multi-head scaled dot-product attention with separate query and
/// key/value token sources. Self-attention passes the same tokens twice.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::param(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        let mut lin = |n: &str| Linear::new(params, &format!("{name}.{n}"), dim, dim, true, Init::DEFAULT, rng);
        Ok(MultiHeadAttention {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            out: lin("out"),
            heads,
            dim,
        })
    }

    pub fn num_scalars(dim: usize) -> usize {
        4 * Linear::num_scalars(dim, dim, true)
    }

    /// `[B, N, d] -> [B, H, N, d/H]`
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// `q_tokens: [B, Nq, d]`, `kv_tokens: [B, Nk, d]` → `[B, Nq, d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, q_tokens: Var, kv_tokens: Var) -> Result<Var> {
        let (qs, ks) = (tape.shape(q_tokens).to_vec(), tape.shape(kv_tokens).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(Error::dim(format!(
                "attention over queries {qs:?} and keys {ks:?} with width {}",
                self.dim
            )));
        }
        let head_dim = self.dim / self.heads;
        let q = self.q.forward(tape, bound, q_tokens)?;
        let k = self.k.forward(tape, bound, kv_tokens)?;
        let v = self.v.forward(tape, bound, kv_tokens)?;
        let (q, k, v) = (
            self.split_heads(tape, q)?,
            self.split_heads(tape, k)?,
            self.split_heads(tape, v)?,
        );
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let weights = tape.softmax(scores)?;
        let ctx = tape.bmm(weights, v, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[qs[0], qs[1], self.dim])?;
        self.out.forward(tape, bound, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_relative_error, DEFAULT_STEP};
    use crate::tensor::Tensor;

    fn setup(dim: usize, heads: usize) -> (ParamSet, MultiHeadAttention) {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(11);
        let attn = MultiHeadAttention::new(&mut ps, "a", dim, heads, &mut rng).unwrap();
        // non-zero biases so the bias paths are exercised
        for t in ps.tensors_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
            }
        }
        (ps, attn)
    }

    #[test]
    fn head_divisibility_enforced() {
        let mut ps = ParamSet::new();
        let err = MultiHeadAttention::new(&mut ps, "a", 10, 3, &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn single_key_broadcasts_value() {
        let (ps, attn) = setup(8, 2);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let q = tape.constant(Tensor::randn(&mut Rng::new(2), &[1, 5, 8]));
        let kv = tape.constant(Tensor::randn(&mut Rng::new(3), &[1, 1, 8]));
        let out = attn.forward(&mut tape, &bound, q, kv).unwrap();
        // expected: out_proj(value(kv)) for every query token
        let v = attn.v.forward(&mut tape, &bound, kv).unwrap();
        let expect = attn.out.forward(&mut tape, &bound, v).unwrap();
        let e = tape.value(expect).data().to_vec();
        for row in tape.value(out).data().chunks(8) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_order_does_not_matter() {
        let (ps, attn) = setup(8, 2);
        let kv = Tensor::randn(&mut Rng::new(4), &[1, 3, 8]);
        let perm = kv.permute(&[0, 1, 2]).unwrap();
        // reverse token order
        let mut rev = perm.data().to_vec();
        for i in 0..3 {
            rev[i * 8..(i + 1) * 8].copy_from_slice(&kv.data()[(2 - i) * 8..(3 - i) * 8]);
        }
        let rev = Tensor::new(&[1, 3, 8], rev).unwrap();
        let q = Tensor::randn(&mut Rng::new(5), &[1, 4, 8]);
        let run = |kv: &Tensor| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let qv = tape.constant(q.clone());
            let kvv = tape.constant(kv.clone());
            let o = attn.forward(&mut tape, &bound, qv, kvv).unwrap();
            tape.value(o).clone()
        };
        assert!(run(&kv).max_abs_diff(&run(&rev)).unwrap() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ps, attn) = setup(4, 2);
        let mut inputs: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::randn(&mut Rng::new(6), &[1, 3, 4]));
        let n = ps.len();
        let err = max_relative_error(
            |tape, v| {
                let bound = Bound(v[..n].to_vec());
                let x = v[n];
                let y = attn.forward(tape, &bound, x, x)?;
                let w = tape.constant(Tensor::randn(&mut Rng::new(7), &[1, 3, 4]));
                let p = tape.mul(y, w)?;
                Ok(tape.sum(p))
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
