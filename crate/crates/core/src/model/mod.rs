//! The diffusion transformer denoiser.

mod attention;
mod block;
pub mod embed;
pub mod params;

pub use attention::MultiHeadAttention;
pub use block::DiTBlock;
pub use params::{bind_frozen, Bound, Init, Linear, ParamId, ParamSet};

use crate::error::{Error, Result, ResultExt};
use crate::tensor::{Rng, Tape, Tensor, Var};
use block::{modulate, LN_EPS};
use embed::{patchify, pos_embed_2d, timestep_embedding_batch, unpatchify};

pub const MAX_PERIOD: f64 = 10000.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiTConfig {
    /// Side length of the (square) latent grid.
    pub input_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub hidden_size: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
}

impl DiTConfig {
    pub fn desk() -> Self {
        DiTConfig {
            input_size: 16,
            in_channels: 4,
            patch_size: 2,
            hidden_size: 128,
            depth: 4,
            num_heads: 4,
            cond_dim: 64,
            time_embed_dim: 64,
        }
    }

    /// Smallest config used by the gradient tests.
    pub fn tiny() -> Self {
        DiTConfig {
            input_size: 4,
            in_channels: 2,
            patch_size: 2,
            hidden_size: 8,
            depth: 2,
            num_heads: 2,
            cond_dim: 4,
            time_embed_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_size", self.input_size),
            ("in_channels", self.in_channels),
            ("patch_size", self.patch_size),
            ("hidden_size", self.hidden_size),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("cond_dim", self.cond_dim),
            ("time_embed_dim", self.time_embed_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be positive")));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::param(format!(
                "patch size {} does not divide input size {}",
                self.patch_size, self.input_size
            )));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::param(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.hidden_size % 4 != 0 {
            return Err(Error::param(format!(
                "hidden size {} must be divisible by 4 for the 2-D position table",
                self.hidden_size
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::param("time_embed_dim must be even"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// `N = H·W / P²`.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Number of scalar parameters a model with this config holds.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_size;
        let stem = Linear::num_scalars(self.patch_dim(), d, true)
            + Linear::num_scalars(self.time_embed_dim, d, true)
            + Linear::num_scalars(d, d, true)
            + Linear::num_scalars(self.cond_dim, d, true);
        let head = Linear::num_scalars(d, 2 * d, true) + Linear::num_scalars(d, self.patch_dim(), true);
        stem + self.depth * DiTBlock::num_scalars(d) + head
    }
}

/// A named architecture preset. `printed_hidden_size` keeps the table value
/// when it differs from the instantiated one.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPreset {
    pub name: &'static str,
    pub printed_hidden_size: usize,
    pub config: DiTConfig,
    pub note: Option<&'static str>,
}

impl ModelPreset {
    pub fn dit_xl_256() -> Self {
        ModelPreset {
            name: "dit-xl-256",
            printed_hidden_size: 1156,
            config: DiTConfig {
                input_size: 32,
                in_channels: 4,
                patch_size: 2,
                hidden_size: 1152,
                depth: 28,
                num_heads: 16,
                cond_dim: 768,
                time_embed_dim: 256,
            },
            note: Some("printed hidden size 1156 is not divisible by 16 heads; instantiated as 1152"),
        }
    }
}

/// Anything that maps `(z_t, t, cond)` to a noise estimate on a tape.
pub trait NoisePredictor {
    /// Place the predictor's parameters on `tape`.
    fn bind(&self, tape: &mut Tape) -> Bound;

    /// `z_t: [B, C, H, W]`, `ts`: one timestep per batch element,
    /// `cond: [B, cond_dim]`; returns `[B, C, H, W]`.
    fn predict_eps(&self, tape: &mut Tape, bound: &Bound, z_t: Var, ts: &[usize], cond: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
struct Stem {
    patch_proj: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    cond_proj: Linear,
}

impl Stem {
    fn new(params: &mut ParamSet, cfg: &DiTConfig, rng: &mut Rng) -> Self {
        let d = cfg.hidden_size;
        Stem {
            patch_proj: Linear::new(params, "patch_proj", cfg.patch_dim(), d, true, Init::DEFAULT, rng),
            time_fc1: Linear::new(params, "time_mlp.0", cfg.time_embed_dim, d, true, Init::DEFAULT, rng),
            time_fc2: Linear::new(params, "time_mlp.1", d, d, true, Init::DEFAULT, rng),
            cond_proj: Linear::new(params, "cond_proj", cfg.cond_dim, d, true, Init::DEFAULT, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    ada: Linear,
    proj: Linear,
}

impl Head {
    fn new(params: &mut ParamSet, cfg: &DiTConfig, rng: &mut Rng) -> Self {
        let d = cfg.hidden_size;
        Head {
            ada: Linear::new(params, "final.ada", d, 2 * d, true, Init::Zero, rng),
            proj: Linear::new(params, "final.proj", d, cfg.patch_dim(), true, Init::Zero, rng),
        }
    }
}

/// Tape handles produced by the embedding stage.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// Patch tokens plus positions, `[B, N, d]`.
    pub tokens: Var,
    /// Conditioning vector `c`, `[B, d]`.
    pub c: Var,
    /// Cross-attention key/value token, `[B, 1, d]`.
    pub kv: Var,
}

fn block_rng(root: &Rng, i: usize) -> Rng {
    root.split("blocks").split_index(i as u64)
}

#[derive(Clone, Debug)]
pub struct DiTModel {
    config: DiTConfig,
    params: ParamSet,
    pos_embed: Tensor,
    stem: Stem,
    blocks: Vec<DiTBlock>,
    head: Head,
}

impl DiTModel {
    pub fn new(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed).split("dit");
        let mut params = ParamSet::new();
        let stem = Stem::new(&mut params, &config, &mut root.split("stem"));
        let blocks = (0..config.depth)
            .map(|i| {
                DiTBlock::new(
                    &mut params,
                    &format!("blocks.{i}"),
                    config.hidden_size,
                    config.num_heads,
                    &mut block_rng(&root, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(&mut params, &config, &mut root.split("head"));
        let pos_embed = pos_embed_2d(config.hidden_size, config.grid(), config.grid())?;
        Ok(DiTModel {
            config,
            params,
            pos_embed,
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[DiTBlock] {
        &self.blocks
    }

    /// Ids of every AdaLN-Zero output layer parameter and of the final projection.
    pub fn zero_init_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        let mut push = |l: &Linear| {
            out.push(l.w);
            out.extend(l.b);
        };
        self.blocks.iter().for_each(|b| push(&b.ada));
        push(&self.head.ada);
        push(&self.head.proj);
        out
    }

    /// `c = time_mlp(sinusoid(t)) + cond_proj(cond)`; also returns
    /// `cond_proj(cond)` alone, which becomes the cross-attention token.
    pub fn conditioning(&self, tape: &mut Tape, bound: &Bound, ts: &[usize], cond: Var) -> Result<(Var, Var)> {
        conditioning(&self.stem, &self.config, tape, bound, ts, cond)
    }

    pub fn embed(&self, tape: &mut Tape, bound: &Bound, z_t: Var, ts: &[usize], cond: Var) -> Result<Embedded> {
        embed(&self.stem, &self.pos_embed, &self.config, tape, bound, z_t, ts, cond)
    }

    /// Run the final modulation and projection and fold tokens back to a latent.
    pub fn head(&self, tape: &mut Tape, bound: &Bound, tokens: Var, c: Var) -> Result<Var> {
        head(&self.head, &self.config, tape, bound, tokens, c)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let e = self.embed(tape, bound, z_t, ts, cond)?;
        let c_act = tape.silu(e.c);
        let mut x = e.tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block
                .forward(tape, bound, x, c_act, e.kv)
                .context(|| format!("block {i}"))?;
        }
        self.head(tape, bound, x, e.c)
    }

    /// Convenience forward without gradient tracking.
    pub fn predict(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = bind_frozen(&self.params, &mut tape);
        let z = tape.constant(z_t.clone());
        let c = tape.constant(cond.clone());
        let out = self.forward(&mut tape, &bound, z, ts, c)?;
        Ok(tape.value(out).clone())
    }
}

impl NoisePredictor for DiTModel {
    fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    fn predict_eps(&self, tape: &mut Tape, bound: &Bound, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        self.forward(tape, bound, z_t, ts, cond)
    }
}

fn conditioning(
    stem: &Stem,
    cfg: &DiTConfig,
    tape: &mut Tape,
    bound: &Bound,
    ts: &[usize],
    cond: Var,
) -> Result<(Var, Var)> {
    let cs = tape.shape(cond).to_vec();
    if cs != [ts.len(), cfg.cond_dim] {
        return Err(Error::dim(format!(
            "conditioning {cs:?} for {} timesteps, expected width {}",
            ts.len(),
            cfg.cond_dim
        )));
    }
    let temb = tape.constant(timestep_embedding_batch(ts, cfg.time_embed_dim, MAX_PERIOD)?);
    let h = stem.time_fc1.forward(tape, bound, temb)?;
    let h = tape.silu(h);
    let h = stem.time_fc2.forward(tape, bound, h)?;
    let k = stem.cond_proj.forward(tape, bound, cond)?;
    Ok((tape.add(h, k)?, k))
}

#[allow(clippy::too_many_arguments)]
fn embed(
    stem: &Stem,
    pos_embed: &Tensor,
    cfg: &DiTConfig,
    tape: &mut Tape,
    bound: &Bound,
    z_t: Var,
    ts: &[usize],
    cond: Var,
) -> Result<Embedded> {
    let zs = tape.shape(z_t).to_vec();
    let s = cfg.input_size;
    if zs.len() != 4 || zs[1..] != [cfg.in_channels, s, s] || zs[0] != ts.len() {
        return Err(Error::dim(format!(
            "latent {zs:?} with {} timesteps does not match [B, {}, {s}, {s}]",
            ts.len(),
            cfg.in_channels
        )));
    }
    let (c, k) = conditioning(stem, cfg, tape, bound, ts, cond)?;
    let tok = patchify(tape, z_t, cfg.patch_size)?;
    let tok = stem.patch_proj.forward(tape, bound, tok)?;
    let pos = tape.constant(pos_embed.clone());
    let pos = tape.expand(pos, 0, zs[0])?;
    let tokens = tape.add(tok, pos)?;
    let kv = tape.reshape(k, &[zs[0], 1, cfg.hidden_size])?;
    Ok(Embedded { tokens, c, kv })
}

fn head(h: &Head, cfg: &DiTConfig, tape: &mut Tape, bound: &Bound, tokens: Var, c: Var) -> Result<Var> {
    let c_act = tape.silu(c);
    let m = h.ada.forward(tape, bound, c_act)?;
    let m = tape.chunk_last(m, cfg.hidden_size)?;
    let x = tape.layer_norm(tokens, None, None, LN_EPS)?;
    let x = modulate(tape, x, m[0], m[1])?;
    let x = h.proj.forward(tape, bound, x)?;
    unpatchify(tape, x, cfg.patch_size, cfg.input_size, cfg.input_size)
}

/// Forward pass that materializes one block's parameters at a time, for
/// configs whose full parameter set does not fit in memory. Parameters are
/// identical to those of `DiTModel::new(config, seed)`; `adjust` sees every
/// parameter by name right after it is created.
pub fn forward_streamed(
    config: &DiTConfig,
    seed: u64,
    z_t: &Tensor,
    ts: &[usize],
    cond: &Tensor,
    mut adjust: impl FnMut(&str, &mut Tensor),
) -> Result<Tensor> {
    let mut finish = |ps: &mut ParamSet| {
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.name(id).to_string();
            adjust(&name, ps.get_mut(id));
        }
    };
    config.validate()?;
    let root = Rng::new(seed).split("dit");
    let pos_embed = pos_embed_2d(config.hidden_size, config.grid(), config.grid())?;

    let (mut x, c, kv) = {
        let mut ps = ParamSet::new();
        let stem = Stem::new(&mut ps, config, &mut root.split("stem"));
        finish(&mut ps);
        let mut tape = Tape::new();
        let bound = bind_frozen(&ps, &mut tape);
        let z = tape.constant(z_t.clone());
        let cv = tape.constant(cond.clone());
        let e = embed(&stem, &pos_embed, config, &mut tape, &bound, z, ts, cv)?;
        (tape.value(e.tokens).clone(), tape.value(e.c).clone(), tape.value(e.kv).clone())
    };

    for i in 0..config.depth {
        let mut ps = ParamSet::new();
        let block = DiTBlock::new(
            &mut ps,
            &format!("blocks.{i}"),
            config.hidden_size,
            config.num_heads,
            &mut block_rng(&root, i),
        )?;
        finish(&mut ps);
        let mut tape = Tape::new();
        let bound = bind_frozen(&ps, &mut tape);
        let xv = tape.constant(x);
        let cv = tape.constant(c.clone());
        let c_act = tape.silu(cv);
        let kvv = tape.constant(kv.clone());
        let y = block
            .forward(&mut tape, &bound, xv, c_act, kvv)
            .context(|| format!("block {i}"))?;
        x = tape.value(y).clone();
    }

    let mut ps = ParamSet::new();
    let h = Head::new(&mut ps, config, &mut root.split("head"));
    finish(&mut ps);
    let mut tape = Tape::new();
    let bound = bind_frozen(&ps, &mut tape);
    let xv = tape.constant(x);
    let cv = tape.constant(c);
    let out = head(&h, config, &mut tape, &bound, xv, cv)?;
    Ok(tape.value(out).clone())
}
