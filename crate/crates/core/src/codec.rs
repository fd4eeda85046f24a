//! Pixel ↔ latent codecs: an exact space-to-depth rearrangement and a small
//! linear autoencoder over `f x f` pixel blocks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::embed::{depth_to_space, space_to_depth};
use crate::model::{bind_frozen, Bound, DiTConfig, Init, Linear, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    TinyAe,
}

impl CodecKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CodecKind::Identity => "identity",
            CodecKind::TinyAe => "tiny-ae",
        }
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "identity-space2depth" => Ok(CodecKind::Identity),
            "tiny-ae" => Ok(CodecKind::TinyAe),
            other => Err(Error::param(format!("unknown codec '{other}' (identity, tiny-ae)"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AeLayers {
    enc: Linear,
    dec: Linear,
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    kind: CodecKind,
    factor: usize,
    latent_channels: usize,
    params: ParamSet,
    ae: Option<AeLayers>,
}

/// Linear map over the channel axis of `[B, C, H, W]`.
fn channel_linear(tape: &mut Tape, bound: &Bound, lin: &Linear, x: Var) -> Result<Var> {
    let y = tape.permute(x, &[0, 2, 3, 1])?;
    let y = lin.forward(tape, bound, y)?;
    tape.permute(y, &[0, 3, 1, 2])
}

impl LatentCodec {
    pub const DEFAULT_FACTOR: usize = 2;
    pub const DEFAULT_AE_CHANNELS: usize = 4;

    pub fn identity(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::param("codec factor must be positive"));
        }
        Ok(LatentCodec {
            kind: CodecKind::Identity,
            factor,
            latent_channels: 3 * factor * factor,
            params: ParamSet::new(),
            ae: None,
        })
    }

    /// Untrained autoencoder; see [`pretrain_tiny_ae`].
    pub fn tiny_ae(factor: usize, latent_channels: usize, rng: &mut Rng) -> Result<Self> {
        if factor == 0 || latent_channels == 0 {
            return Err(Error::param("codec factor and channels must be positive"));
        }
        let block = 3 * factor * factor;
        let mut params = ParamSet::new();
        let enc = Linear::new(&mut params, "codec.enc", block, latent_channels, true, Init::DEFAULT, rng);
        let dec = Linear::new(&mut params, "codec.dec", latent_channels, block, true, Init::DEFAULT, rng);
        params.set_trainable(false);
        Ok(LatentCodec {
            kind: CodecKind::TinyAe,
            factor,
            latent_channels,
            params,
            ae: Some(AeLayers { enc, dec }),
        })
    }

    /// Codec of `kind` with default sizes; tiny-ae weights are untrained.
    pub fn build(kind: CodecKind, rng: &mut Rng) -> Result<Self> {
        match kind {
            CodecKind::Identity => Self::identity(Self::DEFAULT_FACTOR),
            CodecKind::TinyAe => Self::tiny_ae(Self::DEFAULT_FACTOR, Self::DEFAULT_AE_CHANNELS, rng),
        }
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Latent side length for images of side `s`.
    pub fn latent_size(&self, s: usize) -> Result<usize> {
        if s == 0 || s % self.factor != 0 {
            return Err(Error::dim(format!(
                "image size {s} is not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok(s / self.factor)
    }

    /// Fail fast when the denoiser's latent grid does not match this codec.
    pub fn check_model(&self, model: &DiTConfig, image_size: usize) -> Result<()> {
        let side = self.latent_size(image_size)?;
        if model.input_size != side || model.in_channels != self.latent_channels {
            return Err(Error::dim(format!(
                "codec produces {}x{side}x{side} latents, model expects {}x{}x{}",
                self.latent_channels, model.in_channels, model.input_size, model.input_size
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        bind_frozen(&self.params, tape)
    }

    /// `[B, 3, S, S]` → `[B, Cz, S/f, S/f]`.
    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("codec expects [B, 3, S, S] images, got {s:?}")));
        }
        let blocks = space_to_depth(tape, x, self.factor)?;
        match &self.ae {
            None => Ok(blocks),
            Some(ae) => channel_linear(tape, bound, &ae.enc, blocks),
        }
    }

    /// `[B, Cz, h, w]` → `[B, 3, h·f, w·f]`. `clamp` limits the autoencoder
    /// output to `[-1, 1]`; the identity codec is exact either way.
    pub fn decode_var(&self, tape: &mut Tape, bound: &Bound, z: Var, clamp: bool) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(Error::dim(format!(
                "codec expects [B, {}, h, w] latents, got {s:?}",
                self.latent_channels
            )));
        }
        match &self.ae {
            None => depth_to_space(tape, z, self.factor),
            Some(ae) => {
                let blocks = channel_linear(tape, bound, &ae.dec, z)?;
                let x = depth_to_space(tape, blocks, self.factor)?;
                Ok(if clamp { tape.clamp(x, -1.0, 1.0) } else { x })
            }
        }
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = tape.constant(x.clone());
        let z = self.encode_var(&mut tape, &bound, v)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = tape.constant(z.clone());
        let x = self.decode_var(&mut tape, &bound, v, true)?;
        Ok(tape.value(x).clone())
    }

    /// `[3, S, S]` → `[Cz, S/f, S/f]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("codec expects [3, S, S], got {s:?}")));
        }
        let z = self.encode_batch(&image.reshape(&[1, s[0], s[1], s[2]])?)?;
        let zs = z.shape()[1..].to_vec();
        z.reshape(&zs)
    }

    /// `[Cz, h, w]` → `[3, h·f, w·f]`, clamped for the autoencoder.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("codec expects [Cz, h, w], got {s:?}")));
        }
        let x = self.decode_batch(&z.reshape(&[1, s[0], s[1], s[2]])?)?;
        let xs = x.shape()[1..].to_vec();
        x.reshape(&xs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AePretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub factor: usize,
    pub latent_channels: usize,
}

impl Default for AePretrainConfig {
    fn default() -> Self {
        AePretrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 1e-2,
            factor: LatentCodec::DEFAULT_FACTOR,
            latent_channels: LatentCodec::DEFAULT_AE_CHANNELS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AePretrainReport {
    /// Reconstruction MSE of each step's batch, before that step's update.
    pub trace: Vec<f64>,
    /// MSE over the whole training set after the last update.
    pub final_mse: f64,
}

fn reconstruction_mse(codec: &LatentCodec, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
    let z = codec.encode_var(tape, bound, x)?;
    let y = codec.decode_var(tape, bound, z, false)?;
    let d = tape.sub(y, x)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean per-pixel squared error of `decode(encode(x))` (decoder clamped).
pub fn reconstruction_error(codec: &LatentCodec, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::param("no images to measure"));
    }
    let batch = Tensor::stack(images)?;
    let z = codec.encode_batch(&batch)?;
    let y = codec.decode_batch(&z)?;
    Ok(y.sub(&batch)?.map(|v| v * v).mean())
}

/// Fit the autoencoder by plain L2 reconstruction with Adam, then freeze it.
pub fn pretrain_tiny_ae(images: &[Tensor], cfg: &AePretrainConfig, rng: &Rng) -> Result<(LatentCodec, AePretrainReport)> {
    if images.is_empty() {
        return Err(Error::param("autoencoder pretraining needs a non-empty dataset"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::param("pretraining steps and batch size must be positive"));
    }
    let mut codec = LatentCodec::tiny_ae(cfg.factor, cfg.latent_channels, &mut rng.split("init"))?;
    codec.params.set_trainable(true);
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, &codec.params);
    let batches = rng.split("batch");
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut brng = batches.split_index(step as u64);
        let picks: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| images[brng.below(images.len())].clone())
            .collect();
        let mut tape = Tape::new();
        let bound = codec.params.bind(&mut tape);
        let x = tape.constant(Tensor::stack(&picks)?);
        let loss = reconstruction_mse(&codec, &mut tape, &bound, x)?;
        trace.push(tape.value(loss).item()?);
        let grads = tape.backward(loss)?;
        codec.params.clear_grads();
        codec.params.absorb_grads(&bound, &grads)?;
        opt.step(&mut codec.params)?;
    }
    codec.params.clear_grads();
    codec.params.set_trainable(false);
    let final_mse = reconstruction_error(&codec, images)?;
    Ok((codec, AePretrainReport { trace, final_mse }))
}
