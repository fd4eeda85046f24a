//! Training loop, checkpoint state and metrics log.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::codec::LatentCodec;
use crate::data::PairedSample;
use crate::error::{Error, Result, ResultExt};
use crate::loss::{build_total_loss, Batch, LossBreakdown, LossContext, NoiseDraw, PerceptualExtractor};
use crate::model::{DiTModel, NoisePredictor};
use crate::optim::AdamW;
use crate::schedule::NoiseSchedule;
use crate::semantic::SemanticEncoder;
use crate::tensor::{Rng, Tape, Tensor};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use metrics::MetricsRow;

/// Largest tolerated |total − weighted sum| on any step.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Everything a training run mutates, plus the frozen networks it needs.
pub struct Trainer {
    config: TrainConfig,
    model: DiTModel,
    codec: LatentCodec,
    encoder: SemanticEncoder,
    perceptual: PerceptualExtractor,
    schedule: NoiseSchedule,
    opt: AdamW,
    rng: Rng,
    step: u64,
}

impl Trainer {
    /// Fresh run. `codec` must match `config.codec` (pretrained for tiny-ae).
    pub fn new(config: TrainConfig, codec: LatentCodec) -> Result<Self> {
        config.validate()?;
        if codec.kind() != config.codec {
            return Err(Error::param(format!(
                "config selects codec {}, got {}",
                config.codec,
                codec.kind()
            )));
        }
        codec.check_model(&config.model, config.image_size)?;
        let model = DiTModel::new(config.model.clone(), config.seed)?;
        let opt = AdamW::new(config.optim, model.params());
        Ok(Trainer {
            encoder: SemanticEncoder::new(config.model.cond_dim)?,
            perceptual: PerceptualExtractor::new(),
            schedule: config.schedule.build()?,
            rng: Rng::new(config.seed).split("train"),
            step: 0,
            model,
            codec,
            opt,
            config,
        })
    }

    /// Restore a run. With `config`, every model/optimizer/data key must
    /// match the snapshot; run-length keys are taken from `config`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<&TrainConfig>) -> Result<Self> {
        let saved = TrainConfig::from_text(&ckpt.config).context(|| "checkpoint config".into())?;
        let cfg = match config {
            None => saved,
            Some(c) => {
                let diff = c.diff_model_keys(&saved);
                if !diff.is_empty() {
                    return Err(Error::Version(format!(
                        "configuration differs from checkpoint in: {}",
                        diff.join(", ")
                    )));
                }
                c.clone()
            }
        };
        let mut codec = LatentCodec::build(cfg.codec, &mut Rng::new(0))?;
        codec
            .params_mut()
            .load_from(&checkpoint::param_set(&ckpt.codec))
            .context(|| "codec parameters".into())?;
        let mut t = Trainer::new(cfg, codec)?;
        t.model
            .params_mut()
            .load_from(&checkpoint::param_set(&ckpt.model))
            .context(|| "model parameters".into())?;
        let n = t.model.params().len();
        if ckpt.adam_m.len() != n || ckpt.adam_v.len() != n {
            return Err(Error::Version(format!(
                "optimizer state has {}/{} tensors, model has {n}",
                ckpt.adam_m.len(),
                ckpt.adam_v.len()
            )));
        }
        for (i, (name, p)) in t.model.params().iter().enumerate() {
            for (label, table) in [("adam_m", &ckpt.adam_m), ("adam_v", &ckpt.adam_v)] {
                let (mname, m) = &table[i];
                if mname != name || m.shape() != p.shape() {
                    return Err(Error::dim(format!(
                        "{label} entry '{mname}' {:?} does not match parameter '{name}' {:?}",
                        m.shape(),
                        p.shape()
                    )));
                }
            }
        }
        t.opt.m = ckpt.adam_m.iter().map(|(_, m)| m.data().to_vec()).collect();
        t.opt.v = ckpt.adam_v.iter().map(|(_, v)| v.data().to_vec()).collect();
        t.opt.step = ckpt.adam_step;
        t.rng = Rng::from_state(ckpt.rng_state.0, ckpt.rng_state.1);
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DiTModel {
        &self.model
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn encoder(&self) -> &SemanticEncoder {
        &self.encoder
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.iterations as u64
    }

    fn context(&self) -> LossContext<'_> {
        LossContext {
            codec: &self.codec,
            encoder: &self.encoder,
            perceptual: &self.perceptual,
            schedule: &self.schedule,
            weights: self.config.weights,
        }
    }

    /// Batch and noise of step `step`: a pure function of the run rng.
    pub fn draw(&self, data: &[PairedSample], step: u64) -> Result<(Batch, NoiseDraw)> {
        if data.is_empty() {
            return Err(Error::param("training set is empty"));
        }
        let s = self.config.image_size;
        if let Some(bad) = data.iter().find(|p| p.source.shape() != [3, s, s] || p.target.shape() != [3, s, s]) {
            return Err(Error::dim(format!("sample {} is not 3x{s}x{s}", bad.sample_id)));
        }
        let r = self.rng.split_index(step);
        let mut pick = r.split("batch");
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| pick.below(data.len())).collect();
        let src: Vec<Tensor> = idx.iter().map(|&i| data[i].source.clone()).collect();
        let tgt: Vec<Tensor> = idx.iter().map(|&i| data[i].target.clone()).collect();
        let batch = Batch {
            sources: Tensor::stack(&src)?,
            targets: Tensor::stack(&tgt)?,
        };
        let side = self.codec.latent_size(s)?;
        let latent = [self.codec.latent_channels(), side, side];
        let draw = NoiseDraw::sample(idx.len(), &latent, self.schedule.timesteps(), &mut r.split("noise"));
        Ok((batch, draw))
    }

    /// One optimizer step; returns the loss measured before the update.
    pub fn train_step(&mut self, data: &[PairedSample]) -> Result<LossBreakdown> {
        let (batch, draw) = self.draw(data, self.step)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let vars = build_total_loss(&mut tape, &self.model, &bound, &self.context(), &batch, &draw)?;
        let br = vars.breakdown(&tape)?;
        let gap = br.identity_gap(&self.config.weights);
        if !(gap <= IDENTITY_TOL) {
            return Err(Error::contract(format!(
                "loss breakdown off by {gap:e} at step {}",
                self.step + 1
            )));
        }
        let grads = tape.backward(vars.total)?;
        drop(tape);
        let params = self.model.params_mut();
        params.clear_grads();
        params.absorb_grads(&bound, &grads)?;
        drop(grads);
        self.opt.step(params)?;
        params.clear_grads();
        self.step += 1;
        Ok(br)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self.model.params();
        Ok(Checkpoint {
            step: self.step,
            rng_state: self.rng.state(),
            config: self.config.to_text(),
            model: checkpoint::table_of(params),
            codec: checkpoint::table_of(self.codec.params()),
            adam_step: self.opt.step,
            adam_m: checkpoint::moment_table(params, &self.opt.m)?,
            adam_v: checkpoint::moment_table(params, &self.opt.v)?,
        })
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        RunPaths {
            checkpoint: dir.join("checkpoint.bin"),
            metrics: dir.join("metrics.csv"),
        }
    }
}

/// Train until `config.iterations`, checkpointing at the interval and at the
/// end. Metric rows already in the CSV past the trainer's step are dropped,
/// so a resumed run continues the file. `on_row` sees every new row.
pub fn run(
    trainer: &mut Trainer,
    data: &[PairedSample],
    paths: Option<&RunPaths>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let mut log = match paths {
        Some(p) => metrics::MetricsLog::open(&p.metrics, trainer.step())?,
        None => metrics::MetricsLog::memory(),
    };
    let offset = log.last_wall();
    let start = Instant::now();
    let mut rows = Vec::new();
    let every = trainer.config().checkpoint_every as u64;
    while !trainer.is_done() {
        let br = trainer.train_step(data)?;
        let row = MetricsRow {
            step: trainer.step(),
            loss: br,
            wall_seconds: offset + start.elapsed().as_secs_f64(),
        };
        log.push(&row)?;
        on_row(&row);
        rows.push(row);
        if let Some(p) = paths {
            if every > 0 && trainer.step() % every == 0 && !trainer.is_done() {
                trainer.checkpoint()?.save(&p.checkpoint)?;
            }
        }
    }
    if let Some(p) = paths {
        trainer.checkpoint()?.save(&p.checkpoint)?;
    }
    Ok(rows)
}
