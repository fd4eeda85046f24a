//! Ancestral generation (from pure noise or from a noised source), metrics
//! and comparison grids.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::codec::LatentCodec;
use crate::data::{encode_ppm, PairedSample};
use crate::error::{Error, Result};
use crate::model::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::semantic::{cosine_similarity, SemanticEncoder};
use crate::tensor::{Rng, Tape, Tensor};

/// PSNR reported for an exact match.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Peak-to-peak range of `[-1, 1]` images.
pub const PSNR_PEAK: f64 = 2.0;
pub const GRID_GAP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Start from standard normal latents at `t = T-1`.
    Full,
    /// Start from the source latent noised to `t_start`.
    Partial { t_start: usize },
}

impl SampleMode {
    /// Partial mode with the default start `3T/4`.
    pub fn partial_default(timesteps: usize) -> Self {
        SampleMode::Partial {
            t_start: 3 * timesteps / 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Full => "full",
            SampleMode::Partial { .. } => "partial",
        }
    }
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mode names without parameters; partial gets its `t_start` separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeName {
    Full,
    Partial,
}

impl FromStr for ModeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModeName::Full),
            "partial" => Ok(ModeName::Partial),
            other => Err(Error::param(format!("unknown sampling mode '{other}' (full, partial)"))),
        }
    }
}

/// Frozen pieces needed at inference.
#[derive(Clone, Copy)]
pub struct Sampler<'a, M: NoisePredictor + ?Sized> {
    pub model: &'a M,
    pub codec: &'a LatentCodec,
    pub encoder: &'a SemanticEncoder,
    pub schedule: &'a NoiseSchedule,
}

/// Rng of one sample: a function of the run seed and the sample id only.
pub fn sample_rng(seed: u64, sample_id: u64) -> Rng {
    Rng::new(seed).split("sample").split_index(sample_id)
}

impl<'a, M: NoisePredictor + ?Sized> Sampler<'a, M> {
    fn check_mode(&self, mode: SampleMode) -> Result<usize> {
        let t_max = self.schedule.timesteps();
        match mode {
            SampleMode::Full => Ok(t_max - 1),
            SampleMode::Partial { t_start } if t_start > 0 && t_start < t_max => Ok(t_start),
            SampleMode::Partial { t_start } => Err(Error::param(format!(
                "t_start {t_start} outside 0 < t_start < {t_max}"
            ))),
        }
    }

    /// Generate one output per source. `cond_images` supply the semantic
    /// condition (normally the sources themselves); `ids` select each
    /// sample's rng stream via [`sample_rng`].
    pub fn generate(
        &self,
        sources: &Tensor,
        cond_images: &Tensor,
        mode: SampleMode,
        ids: &[u64],
        seed: u64,
    ) -> Result<Tensor> {
        let rngs = ids.iter().map(|&id| sample_rng(seed, id)).collect();
        self.generate_with(sources, cond_images, mode, rngs)
    }

    /// As [`Sampler::generate`] with one explicit rng per sample.
    pub fn generate_with(
        &self,
        sources: &Tensor,
        cond_images: &Tensor,
        mode: SampleMode,
        rngs: Vec<Rng>,
    ) -> Result<Tensor> {
        let t_from = self.check_mode(mode)?;
        let s = sources.shape();
        if s.len() != 4 || cond_images.shape() != s || rngs.len() != s[0] {
            return Err(Error::dim(format!(
                "sources {:?}, conditions {:?}, {} rng streams",
                s,
                cond_images.shape(),
                rngs.len()
            )));
        }
        let cond = self.encoder.encode_batch(cond_images)?;
        let z = self.initial_latents(sources, mode, &rngs)?;
        let mut steps: Vec<Rng> = rngs.iter().map(|r| r.split("steps")).collect();
        let z = self.denoise(z, t_from, &cond, &mut steps)?;
        self.codec.decode_batch(&z).map(|x| x.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Starting latents: standard normal (full) or the encoded source noised
    /// to `t_start` (partial), drawn from each rng's "init" stream.
    pub fn initial_latents(&self, sources: &Tensor, mode: SampleMode, rngs: &[Rng]) -> Result<Vec<Tensor>> {
        self.check_mode(mode)?;
        let s = sources.shape();
        if s.len() != 4 || rngs.len() != s[0] {
            return Err(Error::dim(format!("sources {s:?} with {} rng streams", rngs.len())));
        }
        let side = self.codec.latent_size(s[2])?;
        let latent = [self.codec.latent_channels(), side, side];
        match mode {
            SampleMode::Full => Ok(rngs
                .iter()
                .map(|r| Tensor::randn(&mut r.split("init"), &latent))
                .collect()),
            SampleMode::Partial { t_start } => {
                let z0 = self.codec.encode_batch(sources)?;
                rngs.iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let eps = Tensor::randn(&mut r.split("init"), &latent);
                        self.schedule.q_sample(&z0.index_outer(i)?, t_start, &eps)
                    })
                    .collect()
            }
        }
    }

    /// The reverse chain `t_from, ..., 0` shared by both modes.
    fn denoise(&self, mut z: Vec<Tensor>, t_from: usize, cond: &Tensor, rngs: &mut [Rng]) -> Result<Tensor> {
        for t in (0..=t_from).rev() {
            let batch = Tensor::stack(&z)?;
            let ts = vec![t; z.len()];
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let zv = tape.constant(batch);
            let cv = tape.constant(cond.clone());
            let eps = self.model.predict_eps(&mut tape, &bound, zv, &ts, cv)?;
            let eps = tape.value(eps).clone();
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = self.schedule.ancestral_step(zi, t, &eps.index_outer(i)?, &mut rngs[i])?;
            }
        }
        Tensor::stack(&z)
    }

    fn single(&self, source: &Tensor, mode: SampleMode, rng: &Rng) -> Result<Tensor> {
        let s = source.shape();
        if s.len() != 3 {
            return Err(Error::dim(format!("expected a [3, S, S] source, got {s:?}")));
        }
        let b = source.reshape(&[1, s[0], s[1], s[2]])?;
        self.generate_with(&b, &b, mode, vec![rng.clone()])?.reshape(s)
    }

    /// Generate from pure noise conditioned on `source`.
    pub fn sample_full(&self, source: &Tensor, rng: &Rng) -> Result<Tensor> {
        self.single(source, SampleMode::Full, rng)
    }

    /// Noise `source` to `t_start`, then denoise.
    pub fn sample_partial(&self, source: &Tensor, t_start: usize, rng: &Rng) -> Result<Tensor> {
        self.single(source, SampleMode::Partial { t_start }, rng)
    }
}

/// `20·log10(2/√MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(output: &Tensor, target: &Tensor) -> Result<f64> {
    let mse = output.sub(target)?.map(|v| v * v).mean();
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (PSNR_PEAK / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

pub fn mean_abs_error(output: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(output.sub(target)?.map(f64::abs).mean())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub sample_id: u64,
    pub psnr_db: f64,
    pub l1: f64,
    pub cos_src: f64,
    pub cos_tgt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SampleScore>,
    pub mean_psnr_db: f64,
    pub mean_l1: f64,
    pub mean_cos_src: f64,
    pub mean_cos_tgt: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<SampleScore>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::param("no samples to report"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&SampleScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            mean_psnr_db: mean(|r| r.psnr_db),
            mean_l1: mean(|r| r.l1),
            mean_cos_src: mean(|r| r.cos_src),
            mean_cos_tgt: mean(|r| r.cos_tgt),
            rows,
        })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,psnr_db,l1,cos_src,cos_tgt\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.sample_id, r.psnr_db, r.l1, r.cos_src, r.cos_tgt));
        }
        out.push_str(&format!(
            "MEAN,{},{},{},{}\n",
            self.mean_psnr_db, self.mean_l1, self.mean_cos_src, self.mean_cos_tgt
        ));
        out
    }
}

/// Score one output against its pair.
pub fn score(enc: &SemanticEncoder, pair: &PairedSample, output: &Tensor) -> Result<SampleScore> {
    let e = enc.encode(output)?;
    Ok(SampleScore {
        sample_id: pair.sample_id,
        psnr_db: psnr(output, &pair.target)?,
        l1: mean_abs_error(output, &pair.target)?,
        cos_src: cosine_similarity(&e, &enc.encode(&pair.source)?)?,
        cos_tgt: cosine_similarity(&e, &enc.encode(&pair.target)?)?,
    })
}

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 8;

/// One output per pair (rng stream chosen by sample id), with scores.
pub fn evaluate<M: NoisePredictor + ?Sized>(
    sampler: &Sampler<'_, M>,
    pairs: &[PairedSample],
    mode: SampleMode,
    seed: u64,
) -> Result<(EvalReport, Vec<Tensor>)> {
    if pairs.is_empty() {
        return Err(Error::param("evaluation set is empty"));
    }
    let mut outputs = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let src: Vec<Tensor> = chunk.iter().map(|p| p.source.clone()).collect();
        let src = Tensor::stack(&src)?;
        let ids: Vec<u64> = chunk.iter().map(|p| p.sample_id).collect();
        let out = sampler.generate(&src, &src, mode, &ids, seed)?;
        for i in 0..chunk.len() {
            outputs.push(out.index_outer(i)?);
        }
    }
    let rows = pairs
        .iter()
        .zip(&outputs)
        .map(|(p, o)| score(sampler.encoder, p, o))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_rows(rows)?, outputs))
}

/// Tile `[source | output | target]` rows with white 2-pixel gaps.
pub fn grid(rows: &[(Tensor, Tensor, Tensor)]) -> Result<Tensor> {
    let first = rows.first().ok_or_else(|| Error::param("grid needs at least one row"))?;
    let shape = first.0.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dim(format!("grid expects [3, H, W] images, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    for (a, b, c) in rows {
        for img in [a, b, c] {
            if img.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "grid image {:?} differs from {shape:?}",
                    img.shape()
                )));
            }
        }
    }
    let gw = 3 * w + 2 * GRID_GAP;
    let gh = rows.len() * h + (rows.len() - 1) * GRID_GAP;
    let mut data = vec![1.0; 3 * gh * gw];
    for (r, (a, b, c)) in rows.iter().enumerate() {
        let y0 = r * (h + GRID_GAP);
        for (k, img) in [a, b, c].into_iter().enumerate() {
            let x0 = k * (w + GRID_GAP);
            let d = img.data();
            for ch in 0..3 {
                for y in 0..h {
                    let src = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let at = (ch * gh + y0 + y) * gw + x0;
                    data[at..at + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(&[3, gh, gw], data)
}

pub fn emit_grid(rows: &[(Tensor, Tensor, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode_ppm(&grid(rows)?)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}
