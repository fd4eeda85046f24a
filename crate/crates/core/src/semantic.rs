//! Frozen random-feature image encoder standing in for a pretrained
//! vision-language image tower.

use crate::error::{Error, Result};
use crate::model::embed::patchify;
use crate::model::{bind_frozen, Bound, Init, Linear, ParamSet};
use crate::tensor::kernels::gelu;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Seed of the encoder weights. Changing it changes every embedding.
pub const SEMANTIC_SEED: u64 = 0x5e3a_71c0_de0c_0001;

const NORM_EPS: f64 = 1e-30;

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    params: ParamSet,
    patch_proj: Linear,
    out_proj: Linear,
    /// `gelu(patch bias)`: the feature of a blank patch, removed after pooling.
    blank: Tensor,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl SemanticEncoder {
    pub const DEFAULT_EMBED_DIM: usize = 64;

    pub fn new(embed_dim: usize) -> Result<Self> {
        Self::with_dims(4, 256, embed_dim)
    }

    pub fn with_dims(patch_size: usize, hidden_dim: usize, embed_dim: usize) -> Result<Self> {
        if patch_size == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(Error::param("semantic encoder dims must be positive"));
        }
        let mut rng = Rng::new(SEMANTIC_SEED);
        let mut params = ParamSet::new();
        let pd = 3 * patch_size * patch_size;
        let patch_proj = Linear::new(&mut params, "sem.patch", pd, hidden_dim, true, Init::DEFAULT, &mut rng);
        let out_proj = Linear::new(&mut params, "sem.out", hidden_dim, embed_dim, true, Init::DEFAULT, &mut rng);
        // blank patches are centered to zero features; the tiny output bias
        // gives a blank page a fixed unit embedding that any ink outweighs
        for (lin, amp) in [(patch_proj, 0.05), (out_proj, 1e-3)] {
            let t = params.get_mut(lin.b.expect("biased"));
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-amp, amp));
        }
        let blank = params.get(patch_proj.b.expect("biased")).map(gelu);
        params.set_trainable(false);
        Ok(SemanticEncoder {
            params,
            patch_proj,
            out_proj,
            blank,
            patch_size,
            hidden_dim,
            embed_dim,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Weights enter the tape as constants; call once per tape.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        bind_frozen(&self.params, tape)
    }

    /// `images: [B, 3, S, S]` → unit-norm `[B, embed_dim]`. Gradients flow
    /// to `images` when it tracks them.
    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("semantic encoder expects [B, 3, S, S], got {s:?}")));
        }
        // ink density: white paper is 0, black is 1
        let ink = tape.affine(images, -0.5, 0.5);
        let tok = patchify(tape, ink, self.patch_size)?;
        let h = self.patch_proj.forward(tape, bound, tok)?;
        let h = tape.gelu(h);
        let pooled = tape.mean_axis(h, 1)?;
        let blank = tape.constant(self.blank.clone());
        let blank = tape.expand(blank, 0, s[0])?;
        let pooled = tape.sub(pooled, blank)?;
        let e = self.out_proj.forward(tape, bound, pooled)?;
        tape.l2_normalize(e, NORM_EPS)
    }

    /// `[3, S, S]` → `[embed_dim]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("semantic encoder expects [3, S, S], got {s:?}")));
        }
        let batch = image.reshape(&[1, s[0], s[1], s[2]])?;
        self.encode_batch(&batch)?.reshape(&[self.embed_dim])
    }

    /// `[B, 3, S, S]` → `[B, embed_dim]`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(images.clone());
        let e = self.encode_var(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }
}

/// `a·b / (|a| |b|)`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "cosine_similarity")?;
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_conventions() {
        let a = Tensor::from_vec(vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![0.0, 2.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &a.scale(-3.0)).unwrap(), -1.0);
        let z = Tensor::zeros(&[2]);
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_indivisible_size() {
        let enc = SemanticEncoder::new(16).unwrap();
        let err = enc.encode(&Tensor::zeros(&[3, 10, 10])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
