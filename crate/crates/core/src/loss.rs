//! Training objectives: ε-prediction MSE plus reconstruction, perceptual
//! and semantic terms on the one-step clean estimate.

use crate::codec::LatentCodec;
use crate::error::{Error, Result, ResultExt};
use crate::model::embed::patchify;
use crate::model::{bind_frozen, Bound, Init, Linear, NoisePredictor, ParamSet};
use crate::schedule::NoiseSchedule;
use crate::semantic::SemanticEncoder;
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const PERCEPTUAL_SEED: u64 = 0x1b1b_5eed_0000_0008;
const FEATURE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub eps: f64,
    pub rec: f64,
    pub lpips: f64,
    pub clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eps: 1.0,
            rec: 1.0,
            lpips: 0.5,
            clip: 0.1,
        }
    }
}

impl LossWeights {
    pub fn eps_only() -> Self {
        LossWeights {
            eps: 1.0,
            rec: 0.0,
            lpips: 0.0,
            clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.eps, self.rec, self.lpips, self.clip];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::param("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// `λ_eps·eps + λ_rec·rec + λ_lpips·lpips + λ_clip·clip`, skipping zero weights.
    pub fn combine(&self, eps: f64, rec: f64, lpips: f64, clip: f64) -> f64 {
        [(self.eps, eps), (self.rec, rec), (self.lpips, lpips), (self.clip, clip)]
            .iter()
            .filter(|(w, _)| *w != 0.0)
            .map(|(w, v)| w * v)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub eps_mse: f64,
    pub rec: f64,
    pub lpips: f64,
    pub clip: f64,
}

impl LossBreakdown {
    /// |total − weighted sum of components|.
    pub fn identity_gap(&self, w: &LossWeights) -> f64 {
        (self.total - w.combine(self.eps_mse, self.rec, self.lpips, self.clip)).abs()
    }
}

/// Frozen random two-scale patch features standing in for a learned
/// perceptual network.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    params: ParamSet,
    stages: Vec<(usize, Linear)>,
    pub channels: usize,
}

impl PerceptualExtractor {
    pub const PATCH_SIZES: [usize; 2] = [4, 8];
    pub const DEFAULT_CHANNELS: usize = 32;

    pub fn new() -> Self {
        Self::with_channels(Self::DEFAULT_CHANNELS)
    }

    pub fn with_channels(channels: usize) -> Self {
        let mut rng = Rng::new(PERCEPTUAL_SEED);
        let mut params = ParamSet::new();
        let stages = Self::PATCH_SIZES
            .iter()
            .map(|&p| {
                let lin = Linear::new(&mut params, &format!("lpips.{p}"), 3 * p * p, channels, true, Init::DEFAULT, &mut rng);
                if let Some(b) = lin.b {
                    let t = params.get_mut(b);
                    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
                }
                (p, lin)
            })
            .collect();
        params.set_trainable(false);
        PerceptualExtractor {
            params,
            stages,
            channels,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        bind_frozen(&self.params, tape)
    }

    /// Per-stage features `[B, N_stage, channels]`, unit norm per location.
    pub fn features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        self.stages
            .iter()
            .map(|(p, lin)| {
                let tok = patchify(tape, x, *p)?;
                let h = lin.forward(tape, bound, tok)?;
                let h = tape.gelu(h);
                tape.l2_normalize(h, FEATURE_EPS)
            })
            .collect()
    }
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new()
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

pub fn eps_mse(tape: &mut Tape, eps_hat: Var, eps: Var) -> Result<Var> {
    check_pair(tape, eps_hat, eps, "eps_mse")?;
    let d = tape.sub(eps_hat, eps)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean absolute difference.
pub fn l1_rec(tape: &mut Tape, x_hat: Var, target: Var) -> Result<Var> {
    check_pair(tape, x_hat, target, "l1_rec")?;
    let d = tape.sub(x_hat, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Sum over stages of the mean squared feature difference.
pub fn perceptual_loss(tape: &mut Tape, pe: &PerceptualExtractor, bound: &Bound, x_hat: Var, target: Var) -> Result<Var> {
    check_pair(tape, x_hat, target, "perceptual_loss")?;
    let fa = pe.features(tape, bound, x_hat)?;
    let fb = pe.features(tape, bound, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let d = tape.sub(a, b)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::contract("perceptual extractor has no stages"))
}

/// `1 − cos(enc(x_hat), enc(source))`, averaged over the batch.
pub fn semantic_loss(tape: &mut Tape, enc: &SemanticEncoder, bound: &Bound, x_hat: Var, source: Var) -> Result<Var> {
    check_pair(tape, x_hat, source, "semantic_loss")?;
    let a = enc.encode_var(tape, bound, x_hat)?;
    let b = enc.encode_var(tape, bound, source)?;
    let prod = tape.mul(a, b)?;
    let cos = tape.sum_axis(prod, 1)?;
    let mean_cos = tape.mean(cos);
    Ok(tape.affine(mean_cos, -1.0, 1.0))
}

fn eval_pair(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, va, vb)?;
    tape.value(out).item()
}

pub fn eps_mse_value(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    eval_pair(eps_hat, eps, eps_mse)
}

pub fn l1_rec_value(x_hat: &Tensor, target: &Tensor) -> Result<f64> {
    eval_pair(x_hat, target, l1_rec)
}

/// Accepts `[3, S, S]` or `[B, 3, S, S]`.
pub fn perceptual_value(pe: &PerceptualExtractor, x_hat: &Tensor, target: &Tensor) -> Result<f64> {
    let (a, b) = (as_batch(x_hat)?, as_batch(target)?);
    eval_pair(&a, &b, |tape, x, y| {
        let bound = pe.bind(tape);
        perceptual_loss(tape, pe, &bound, x, y)
    })
}

/// Accepts `[3, S, S]` or `[B, 3, S, S]`.
pub fn semantic_value(enc: &SemanticEncoder, x_hat: &Tensor, source: &Tensor) -> Result<f64> {
    let (a, b) = (as_batch(x_hat)?, as_batch(source)?);
    eval_pair(&a, &b, |tape, x, y| {
        let bound = enc.bind(tape);
        semantic_loss(tape, enc, &bound, x, y)
    })
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[c, h, w] => x.reshape(&[1, c, h, w]),
        _ => Ok(x.clone()),
    }
}

/// Frozen networks and constants shared by every loss evaluation.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub codec: &'a LatentCodec,
    pub encoder: &'a SemanticEncoder,
    pub perceptual: &'a PerceptualExtractor,
    pub schedule: &'a NoiseSchedule,
    pub weights: LossWeights,
}

/// Paired images stacked along the batch axis, `[B, 3, S, S]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sources: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random quantities of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    /// Standard normal, latent-shaped `[B, Cz, h, w]`.
    pub eps: Tensor,
}

impl NoiseDraw {
    /// Timesteps uniform on `[0, T)` then noise, both from `rng`.
    pub fn sample(batch: usize, latent_shape: &[usize], timesteps: usize, rng: &mut Rng) -> Self {
        let ts = (0..batch).map(|_| rng.below(timesteps)).collect();
        let mut shape = vec![batch];
        shape.extend_from_slice(latent_shape);
        NoiseDraw {
            ts,
            eps: Tensor::randn(rng, &shape),
        }
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub eps_mse: Var,
    pub rec: Var,
    pub lpips: Var,
    pub clip: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            total: tape.value(self.total).item()?,
            eps_mse: tape.value(self.eps_mse).item()?,
            rec: tape.value(self.rec).item()?,
            lpips: tape.value(self.lpips).item()?,
            clip: tape.value(self.clip).item()?,
        })
    }
}

/// Record the full objective on `tape` for a fixed noise draw.
pub fn build_total_loss<M: NoisePredictor + ?Sized>(
    tape: &mut Tape,
    model: &M,
    model_bound: &Bound,
    ctx: &LossContext<'_>,
    batch: &Batch,
    draw: &NoiseDraw,
) -> Result<LossVars> {
    let b = batch.len();
    if batch.targets.shape() != batch.sources.shape() || draw.ts.len() != b {
        return Err(Error::dim(format!(
            "batch of sources {:?}, targets {:?}, {} timesteps",
            batch.sources.shape(),
            batch.targets.shape(),
            draw.ts.len()
        )));
    }
    let sched = ctx.schedule;
    let z0 = ctx.codec.encode_batch(&batch.targets)?;
    let mut zt = Vec::with_capacity(z0.numel());
    let per = z0.numel() / b;
    for (i, &t) in draw.ts.iter().enumerate() {
        let x = z0.index_outer(i)?;
        let e = draw.eps.index_outer(i).context(|| "noise draw".into())?;
        zt.extend(sched.q_sample(&x, t, &e)?.into_data());
    }
    debug_assert_eq!(zt.len(), per * b);
    let zt = Tensor::new(z0.shape(), zt)?;
    let cond = ctx.encoder.encode_batch(&batch.sources)?;

    let zt_v = tape.constant(zt.clone());
    let cond_v = tape.constant(cond);
    let eps_hat = model.predict_eps(tape, model_bound, zt_v, &draw.ts, cond_v)?;
    let eps_v = tape.constant(draw.eps.clone());
    let l_eps = eps_mse(tape, eps_hat, eps_v).context(|| "eps_mse".into())?;

    // x̂0 = z_t/√ᾱ − (√(1−ᾱ)/√ᾱ)·ε̂, unclamped
    let inv: Vec<f64> = draw.ts.iter().map(|&t| 1.0 / sched.sqrt_alpha_bar[t]).collect();
    let ratio: Vec<f64> = draw
        .ts
        .iter()
        .map(|&t| -sched.sqrt_one_minus_alpha_bar[t] / sched.sqrt_alpha_bar[t])
        .collect();
    let mut scaled = zt.into_data();
    for (chunk, c) in scaled.chunks_mut(per).zip(&inv) {
        chunk.iter_mut().for_each(|v| *v *= c);
    }
    let base = tape.constant(Tensor::new(z0.shape(), scaled)?);
    let corr = tape.scale_outer(eps_hat, &ratio)?;
    let z0_hat = tape.add(base, corr)?;
    let codec_bound = ctx.codec.bind(tape);
    let x_hat = ctx.codec.decode_var(tape, &codec_bound, z0_hat, false)?;

    let targets = tape.constant(batch.targets.clone());
    let sources = tape.constant(batch.sources.clone());
    let rec = l1_rec(tape, x_hat, targets).context(|| "rec".into())?;
    let pe_bound = ctx.perceptual.bind(tape);
    let lpips = perceptual_loss(tape, ctx.perceptual, &pe_bound, x_hat, targets).context(|| "lpips".into())?;
    let enc_bound = ctx.encoder.bind(tape);
    let clip = semantic_loss(tape, ctx.encoder, &enc_bound, x_hat, sources).context(|| "clip".into())?;

    let w = ctx.weights;
    let mut total: Option<Var> = None;
    for (weight, term) in [(w.eps, l_eps), (w.rec, rec), (w.lpips, lpips), (w.clip, clip)] {
        if weight == 0.0 {
            continue;
        }
        let t = tape.scale(term, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    let total = total.ok_or_else(|| Error::param("all loss weights are zero"))?;
    Ok(LossVars {
        total,
        eps_mse: l_eps,
        rec,
        lpips,
        clip,
    })
}

/// Evaluate the objective once, drawing timesteps and noise from `rng`.
pub fn total_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    ctx: &LossContext<'_>,
    batch: &Batch,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let side = ctx.codec.latent_size(batch.targets.shape()[2])?;
    let latent = [ctx.codec.latent_channels(), side, side];
    let draw = NoiseDraw::sample(batch.len(), &latent, ctx.schedule.timesteps(), rng);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let vars = build_total_loss(&mut tape, model, &bound, ctx, batch, &draw)?;
    vars.breakdown(&tape)
}
