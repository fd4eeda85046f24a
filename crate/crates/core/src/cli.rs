//! `dit` command line: dataset generation, codec pretraining, training,
//! sampling and evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codec::{pretrain_tiny_ae, AePretrainConfig, CodecKind, LatentCodec};
use crate::data::{generate_dataset, load_dataset, PairedSample};
use crate::error::{Error, Result};
use crate::sample::{emit_grid, evaluate, ModeName, SampleMode, Sampler};
use crate::tensor::Rng;
use crate::train::checkpoint::{self, Checkpoint};
use crate::train::config::parse_kv;
use crate::train::{run, RunPaths, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const RESOLVED_CONFIG: &str = "resolved-config";

#[derive(Parser, Debug)]
#[command(name = "dit", version, about = "Image-conditioned diffusion transformer for paired image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic outline → filled-shape dataset.
    GenData(GenDataArgs),
    /// Fit the tiny autoencoder codec on a training manifest.
    PretrainCodec(PretrainArgs),
    /// Train the denoiser.
    Train(TrainArgs),
    /// Sample outputs for the first pairs of a manifest and write a grid.
    Sample(SampleArgs),
    /// Score one sample per pair of a test manifest.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file (flags take precedence).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_n: Option<usize>,
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output codec file (checkpoint format).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, metrics and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    codec: Option<String>,
    /// Pretrained codec (required for tiny-ae on a fresh run).
    #[arg(long)]
    codec_file: Option<PathBuf>,
    /// Resolve and write the configuration without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct SamplingFlags {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    /// Start timestep for partial mode (default 3T/4).
    #[arg(long)]
    t_start: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    flags: SamplingFlags,
    /// Grid PPM to write.
    #[arg(long)]
    out: PathBuf,
    /// Number of leading pairs to sample.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    flags: SamplingFlags,
    /// Output directory for eval.csv, grid.ppm and resolved config.
    #[arg(long)]
    out: PathBuf,
}

/// Usage problems exit with 2, everything else with 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

/// Every configurable value of every command.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub train_n: usize,
    pub test_n: usize,
    pub mode: ModeName,
    /// `None` means 3T/4.
    pub t_start: Option<usize>,
    pub count: usize,
    pub ae: AePretrainConfig,
}

impl CliConfig {
    pub const EXTRA_KEYS: [&'static str; 8] =
        ["train_n", "test_n", "mode", "t_start", "count", "ae_steps", "ae_batch", "ae_lr"];

    pub fn new(train: TrainConfig) -> Self {
        CliConfig {
            train,
            train_n: 64,
            test_n: 8,
            mode: ModeName::Full,
            t_start: None,
            count: 4,
            ae: AePretrainConfig::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::param(format!("invalid value '{v}' for '{key}'")))
        }
        match key {
            "train_n" => self.train_n = num(key, value)?,
            "test_n" => self.test_n = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "t_start" => {
                self.t_start = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "count" => self.count = num(key, value)?,
            "ae_steps" => self.ae.steps = num(key, value)?,
            "ae_batch" => self.ae.batch_size = num(key, value)?,
            "ae_lr" => self.ae.lr = num(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = self.train.to_text();
        let mode = match self.mode {
            ModeName::Full => "full",
            ModeName::Partial => "partial",
        };
        let t = self.t_start.map_or("auto".to_string(), |t| t.to_string());
        for (k, v) in [
            ("train_n", self.train_n.to_string()),
            ("test_n", self.test_n.to_string()),
            ("mode", mode.to_string()),
            ("t_start", t),
            ("count", self.count.to_string()),
            ("ae_steps", self.ae.steps.to_string()),
            ("ae_batch", self.ae.batch_size.to_string()),
            ("ae_lr", self.ae.lr.to_string()),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (offset, k, v) in parse_kv(text)? {
            self.set(&k, &v).map_err(|e| Error::parse(offset, e.to_string()))?;
        }
        Ok(())
    }

    fn sample_mode(&self) -> SampleMode {
        match self.mode {
            ModeName::Full => SampleMode::Full,
            ModeName::Partial => match self.t_start {
                Some(t_start) => SampleMode::Partial { t_start },
                None => SampleMode::partial_default(self.train.schedule.timesteps),
            },
        }
    }
}

/// Defaults, then the config file, then `--set` pairs, then `flags`.
fn resolve(base: TrainConfig, common: &Common, flags: &[(&str, Option<String>)]) -> CliResult<CliConfig> {
    let mut cfg = CliConfig::new(base);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::file(path, e)))?;
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string()).map_err(usage)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(usage)?;
        }
    }
    Ok(cfg)
}

fn write_resolved(dir: &Path, cfg: &CliConfig) -> Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_text()).map_err(|e| Error::file(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = resolve(
        TrainConfig::desk(),
        &a.common,
        &[("train_n", s(&a.train_n)), ("test_n", s(&a.test_n)), ("image_size", s(&a.size))],
    )?;
    if cfg.train_n == 0 {
        return Err(usage("--train-n must be at least 1"));
    }
    let ds = generate_dataset(cfg.train.seed, cfg.train_n, cfg.test_n, cfg.train.image_size, &a.out)?;
    write_resolved(&a.out, &cfg)?;
    println!("{}", ds.train_path.display());
    println!("{}", ds.test_path.display());
    Ok(())
}

fn load_pairs(path: &Path) -> Result<Vec<PairedSample>> {
    Ok(load_dataset(path)?.1)
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let mut cfg = resolve(
        TrainConfig::desk(),
        &a.common,
        &[("ae_steps", s(&a.steps)), ("ae_batch", s(&a.batch)), ("ae_lr", s(&a.lr))],
    )?;
    cfg.set("codec", CodecKind::TinyAe.as_str())?;
    let pairs = load_pairs(&a.data)?;
    let images: Vec<_> = pairs.iter().map(|p| p.target.clone()).collect();
    let (codec, report) = pretrain_tiny_ae(&images, &cfg.ae, &Rng::new(cfg.train.seed).split("codec"))?;
    eprintln!("codec reconstruction mse {:.6}", report.final_mse);
    let ck = Checkpoint {
        step: 0,
        rng_state: (0, 0),
        config: cfg.train.to_text(),
        model: Vec::new(),
        codec: checkpoint::table_of(codec.params()),
        adam_step: 0,
        adam_m: Vec::new(),
        adam_v: Vec::new(),
    };
    ck.save(&a.out)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_resolved(dir, &cfg)?;
    }
    Ok(())
}

fn load_codec_file(path: &Path) -> Result<LatentCodec> {
    let ck = Checkpoint::load(path)?;
    let mut codec = LatentCodec::build(CodecKind::TinyAe, &mut Rng::new(0))?;
    codec.params_mut().load_from(&checkpoint::param_set(&ck.codec))?;
    Ok(codec)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let base = match a.preset {
        Some(Preset::Paper) => TrainConfig::paper(),
        _ => TrainConfig::desk(),
    };
    let cfg = resolve(
        base,
        &a.common,
        &[
            ("iterations", s(&a.iters)),
            ("batch_size", s(&a.batch)),
            ("lr", s(&a.lr)),
            ("codec", a.codec.clone()),
        ],
    )?;
    cfg.train.validate().map_err(usage)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    if a.dry_run {
        return Ok(());
    }
    let pairs = load_pairs(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            Trainer::from_checkpoint(&ck, Some(&cfg.train))?
        }
        None => {
            let codec = match (cfg.train.codec, &a.codec_file) {
                (CodecKind::Identity, _) => LatentCodec::identity(LatentCodec::DEFAULT_FACTOR)?,
                (CodecKind::TinyAe, Some(p)) => load_codec_file(p)?,
                (CodecKind::TinyAe, None) => return Err(usage("codec tiny-ae needs --codec-file (see pretrain-codec)")),
            };
            Trainer::new(cfg.train.clone(), codec)?
        }
    };
    let every = cfg.train.log_every as u64;
    let paths = RunPaths::in_dir(&a.out);
    run(&mut trainer, &pairs, Some(&paths), |row| {
        if row.step % every == 0 || row.step == 1 {
            eprintln!(
                "step {} loss {:.5} (eps {:.5} rec {:.5} lpips {:.5} clip {:.5}) {:.1}s",
                row.step, row.loss.total, row.loss.eps_mse, row.loss.rec, row.loss.lpips, row.loss.clip, row.wall_seconds
            );
        }
    })?;
    println!("{}", paths.checkpoint.display());
    Ok(())
}

/// Restore the checkpoint and resolve sampling settings against it.
fn sampling_setup(f: &SamplingFlags) -> CliResult<(Trainer, CliConfig, SampleMode)> {
    let ck = Checkpoint::load(&f.checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck, None)?;
    let cfg = resolve(
        trainer.config().clone(),
        &f.common,
        &[("mode", f.mode.clone()), ("t_start", s(&f.t_start))],
    )?;
    if cfg.train.diff_model_keys(trainer.config()).iter().any(|k| *k != "seed") {
        return Err(usage("model settings cannot be overridden when sampling from a checkpoint"));
    }
    let mode = cfg.sample_mode();
    if let SampleMode::Partial { t_start } = mode {
        let t = trainer.schedule().timesteps();
        if t_start == 0 || t_start >= t {
            return Err(usage(format!("--t-start {t_start} outside 0 < t_start < {t}")));
        }
    }
    Ok((trainer, cfg, mode))
}

fn cmd_sample(a: &SampleArgs) -> CliResult<()> {
    let (trainer, mut cfg, mode) = sampling_setup(&a.flags)?;
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if cfg.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let pairs = load_pairs(&a.flags.data)?;
    let take: Vec<_> = pairs.into_iter().take(cfg.count).collect();
    let sampler = Sampler {
        model: trainer.model(),
        codec: trainer.codec(),
        encoder: trainer.encoder(),
        schedule: trainer.schedule(),
    };
    let (_, outputs) = evaluate(&sampler, &take, mode, cfg.train.seed)?;
    let rows: Vec<_> = take
        .iter()
        .zip(outputs)
        .map(|(p, o)| (p.source.clone(), o, p.target.clone()))
        .collect();
    emit_grid(&rows, &a.out)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_resolved(dir, &cfg)?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (trainer, cfg, mode) = sampling_setup(&a.flags)?;
    let pairs = load_pairs(&a.flags.data)?;
    let sampler = Sampler {
        model: trainer.model(),
        codec: trainer.codec(),
        encoder: trainer.encoder(),
        schedule: trainer.schedule(),
    };
    let (report, outputs) = evaluate(&sampler, &pairs, mode, cfg.train.seed)?;
    create_dir(&a.out)?;
    let csv = a.out.join("eval.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::file(&csv, e))?;
    let rows: Vec<_> = pairs
        .iter()
        .zip(outputs)
        .map(|(p, o)| (p.source.clone(), o, p.target.clone()))
        .collect();
    emit_grid(&rows, &a.out.join("grid.ppm"))?;
    write_resolved(&a.out, &cfg)?;
    println!(
        "{} samples: psnr {:.3} dB, l1 {:.4}, cos_src {:.4}, cos_tgt {:.4}",
        report.count(),
        report.mean_psnr_db,
        report.mean_l1,
        report.mean_cos_src,
        report.mean_cos_tgt
    );
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::PretrainCodec(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
