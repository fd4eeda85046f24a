use super::attention::MultiHeadAttention;
use super::params::{Bound, Init, Linear, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Var};

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const FFN_RATIO: usize = 4;

/// `x * (1 + scale) + shift`, with `scale`/`shift` of shape `[B, d]` broadcast
/// over the token axis of `x: [B, N, d]`.
pub(crate) fn modulate(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let scale = tape.expand(scale, 1, n)?;
    let scale = tape.add_scalar(scale, 1.0);
    let shift = tape.expand(shift, 1, n)?;
    let y = tape.mul(x, scale)?;
    tape.add(y, shift)
}

/// `x + gate ⊙ branch` with `gate: [B, d]`.
fn gated_residual(tape: &mut Tape, x: Var, gate: Var, branch: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let gate = tape.expand(gate, 1, n)?;
    let g = tape.mul(gate, branch)?;
    tape.add(x, g)
}

/// Self-attention, cross-attention and FFN, each wrapped in an AdaLN-Zero
/// modulated residual.
#[derive(Clone, Debug)]
pub struct DiTBlock {
    pub ada: Linear,
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
}

impl DiTBlock {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let ada = Linear::new(params, &format!("{name}.ada"), dim, 9 * dim, true, Init::Zero, rng);
        let self_attn = MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?;
        let cross_attn = MultiHeadAttention::new(params, &format!("{name}.cross"), dim, heads, rng)?;
        let hidden = FFN_RATIO * dim;
        let fc1 = Linear::new(params, &format!("{name}.fc1"), dim, hidden, true, Init::DEFAULT, rng);
        let fc2 = Linear::new(params, &format!("{name}.fc2"), hidden, dim, true, Init::DEFAULT, rng);
        Ok(DiTBlock {
            ada,
            self_attn,
            cross_attn,
            fc1,
            fc2,
            dim,
        })
    }

    pub fn num_scalars(dim: usize) -> usize {
        Linear::num_scalars(dim, 9 * dim, true)
            + 2 * MultiHeadAttention::num_scalars(dim)
            + Linear::num_scalars(dim, FFN_RATIO * dim, true)
            + Linear::num_scalars(FFN_RATIO * dim, dim, true)
    }

    /// `x: [B, N, d]`, `c_act: [B, d]` (conditioning after SiLU), `kv: [B, 1, d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, c_act: Var, kv: Var) -> Result<Var> {
        let (xs, cs) = (tape.shape(x).to_vec(), tape.shape(c_act).to_vec());
        if xs.len() != 3 || xs[2] != self.dim || cs != [xs[0], self.dim] {
            return Err(Error::dim(format!(
                "block of width {} given tokens {xs:?} and conditioning {cs:?}",
                self.dim
            )));
        }
        let m = self.ada.forward(tape, bound, c_act)?;
        let m = tape.chunk_last(m, self.dim)?;

        let h = tape.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(tape, h, m[0], m[1])?;
        let h = self.self_attn.forward(tape, bound, h, h)?;
        let x = gated_residual(tape, x, m[2], h)?;

        let h = tape.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(tape, h, m[3], m[4])?;
        let h = self.cross_attn.forward(tape, bound, h, kv)?;
        let x = gated_residual(tape, x, m[5], h)?;

        let h = tape.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(tape, h, m[6], m[7])?;
        let h = self.fc1.forward(tape, bound, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, bound, h)?;
        gated_residual(tape, x, m[8], h)
    }
}
