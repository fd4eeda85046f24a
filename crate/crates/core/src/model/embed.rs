//! Patch tokenization and fixed sinusoidal embeddings.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn check_patch_grid(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    let &[b, c, h, w] = shape else {
        return Err(Error::dim(format!("patchify expects [B, C, H, W], got {shape:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!(
            "patch size {p} does not divide spatial dims {h}x{w}"
        )));
    }
    Ok((b, c, h, w))
}

/// `[B, C, H, W] -> [B, (H/P)·(W/P), C·P·P]`, patches in row-major order,
/// each token the flattened `C x P x P` block.
pub fn patchify(tape: &mut Tape, z: Var, p: usize) -> Result<Var> {
    let (b, c, h, w) = check_patch_grid(tape.shape(z), p)?;
    let (gh, gw) = (h / p, w / p);
    let x = tape.reshape(z, &[b, c, gh, p, gw, p])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b, gh * gw, c * p * p])
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tape: &mut Tape, tokens: Var, p: usize, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let &[b, n, len] = shape.as_slice() else {
        return Err(Error::dim(format!("unpatchify expects [B, N, D], got {shape:?}")));
    };
    if p == 0 || h % p != 0 || w % p != 0 || n != (h / p) * (w / p) || len % (p * p) != 0 {
        return Err(Error::dim(format!(
            "{n} tokens of width {len} do not tile a {h}x{w} grid with patch {p}"
        )));
    }
    let c = len / (p * p);
    let (gh, gw) = (h / p, w / p);
    let x = tape.reshape(tokens, &[b, gh, gw, c, p, p])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[b, c, h, w])
}

/// Tensor-level [`patchify`].
pub fn patchify_tensor(z: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = check_patch_grid(z.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    z.reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, gh * gw, c * p * p])
}

/// Tensor-level [`unpatchify`].
pub fn unpatchify_tensor(tokens: &Tensor, p: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(tokens.clone());
    let out = unpatchify(&mut tape, v, p, h, w)?;
    Ok(tape.value(out).clone())
}

/// `[B, C, H, W] -> [B, C·f·f, H/f, W/f]`: each `f x f` pixel block is stacked
/// into channels (channel-major, then row, then column within the block).
pub fn space_to_depth(tape: &mut Tape, x: Var, f: usize) -> Result<Var> {
    let (b, c, h, w) = check_patch_grid(tape.shape(x), f)?;
    let y = tape.reshape(x, &[b, c, h / f, f, w / f, f])?;
    let y = tape.permute(y, &[0, 1, 3, 5, 2, 4])?;
    tape.reshape(y, &[b, c * f * f, h / f, w / f])
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(tape: &mut Tape, z: Var, f: usize) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    let &[b, cz, hh, ww] = shape.as_slice() else {
        return Err(Error::dim(format!("depth_to_space expects [B, C, H, W], got {shape:?}")));
    };
    if f == 0 || cz % (f * f) != 0 {
        return Err(Error::dim(format!("{cz} channels not divisible by {f}²")));
    }
    let c = cz / (f * f);
    let y = tape.reshape(z, &[b, c, f, f, hh, ww])?;
    let y = tape.permute(y, &[0, 1, 4, 2, 5, 3])?;
    tape.reshape(y, &[b, c, hh * f, ww * f])
}

/// Sinusoidal timestep features `[sin(t·ω_k) .., cos(t·ω_k) ..]` with
/// `ω_k = max_period^(-k / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize, max_period: f64) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!("timestep embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(max_period.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(Tensor::from_vec(out))
}

/// Stacked timestep features for a batch: `[B, dim]`.
pub fn timestep_embedding_batch(ts: &[usize], dim: usize, max_period: f64) -> Result<Tensor> {
    let rows = ts
        .iter()
        .map(|&t| timestep_embedding(t, dim, max_period))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let quarter = dim / 2;
    for k in 0..quarter {
        let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
        out[k] = (pos * omega).sin();
        out[quarter + k] = (pos * omega).cos();
    }
}

/// Fixed 2-D sin/cos position table `[gh·gw, dim]`; the first half of each
/// row encodes the patch row, the second half the patch column.
pub fn pos_embed_2d(dim: usize, gh: usize, gw: usize) -> Result<Tensor> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::param(format!(
            "2-D positional embedding needs dim divisible by 4, got {dim}"
        )));
    }
    let mut data = vec![0.0; gh * gw * dim];
    for i in 0..gh {
        for j in 0..gw {
            let row = &mut data[(i * gw + j) * dim..(i * gw + j + 1) * dim];
            let (a, b) = row.split_at_mut(dim / 2);
            sincos_1d(dim / 2, i as f64, a);
            sincos_1d(dim / 2, j as f64, b);
        }
    }
    Tensor::new(&[gh * gw, dim], data)
}
