//! C ABI over `dit-core`: load a trained checkpoint (or build an untrained
//! model from config text), translate images, generate dataset pairs and
//! score outputs.
//!
//! Every fallible call returns a [`DitStatus`]. On failure the message is
//! kept per thread and read with [`dit_last_error_message`]. Images are
//! planar `[3, S, S]` arrays of `double` in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dit_core::codec::LatentCodec;
use dit_core::data::generate_pair;
use dit_core::sample::{psnr, sample_rng, SampleMode, Sampler};
use dit_core::train::{Checkpoint, TrainConfig, Trainer};
use dit_core::{Error, Tensor};

/// Result codes. `DIT_STATUS_OK` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Parse = 4,
    Version = 5,
    Io = 6,
    Contract = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DitSampleMode {
    Full = 0,
    Partial = 1,
}

/// Opaque model handle: denoiser, codec, semantic encoder and schedule.
pub struct DitModel {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DitStatus {
    match e.root() {
        Error::Dimension(_) => DitStatus::Dimension,
        Error::Parameter(_) => DitStatus::InvalidArgument,
        Error::Contract(_) => DitStatus::Contract,
        Error::Parse { .. } => DitStatus::Parse,
        Error::Version(_) => DitStatus::Version,
        Error::File { .. } => DitStatus::Io,
        Error::Context { .. } => DitStatus::Contract,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Run `f`, mapping errors and panics to a status and the error slot.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DitStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            DitStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            DitStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DitStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn image_len(size: usize) -> usize {
    3 * size * size
}

fn publish(out: *mut *mut DitModel, trainer: Trainer) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    let handle = Box::into_raw(Box::new(DitModel { trainer }));
    // SAFETY: checked non-null above; caller provides a writable slot.
    unsafe { *out = handle };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dit_model_load(path: *const c_char, out: *mut *mut DitModel) -> DitStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let ck = Checkpoint::load(Path::new(path))?;
        publish(out, Trainer::from_checkpoint(&ck, None)?)
    })
}

/// Untrained model (identity codec) from `key = value` config text; keys not
/// given take the desk defaults. An empty string selects the defaults.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dit_model_new(config_text: *const c_char, out: *mut *mut DitModel) -> DitStatus {
    guard(|| {
        let text = c_str(config_text, "config_text")?;
        let cfg = TrainConfig::from_text(text)?;
        let codec = LatentCodec::build(cfg.codec, &mut dit_core::Rng::new(cfg.seed))?;
        publish(out, Trainer::new(cfg, codec)?)
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dit_model_free(model: *mut DitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the images the model translates, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dit_model_image_size(model: *const DitModel) -> usize {
    model.as_ref().map_or(0, |m| m.trainer.config().image_size)
}

/// Number of diffusion timesteps, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dit_model_timesteps(model: *const DitModel) -> usize {
    model.as_ref().map_or(0, |m| m.trainer.schedule().timesteps())
}

/// Number of scalar parameters of the denoiser, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dit_model_parameter_count(model: *const DitModel) -> usize {
    model.as_ref().map_or(0, |m| m.trainer.model().params().num_scalars())
}

/// Translate one source image. `t_start` is used in partial mode only;
/// pass 0 there to get the default `3T/4`. The output depends only on the
/// model, the source, `seed` and the mode.
///
/// # Safety
/// `source` and `output` must each hold `len` doubles, `len = 3·S·S`.
#[no_mangle]
pub unsafe extern "C" fn dit_model_sample(
    model: *const DitModel,
    source: *const f64,
    output: *mut f64,
    len: usize,
    mode: DitSampleMode,
    t_start: usize,
    seed: u64,
) -> DitStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let s = m.trainer.config().image_size;
        if len != image_len(s) {
            return Err(Fail::Core(Error::dim(format!("expected {} doubles, got {len}", image_len(s)))));
        }
        let src = Tensor::new(&[3, s, s], slice(source, len, "source")?.to_vec())?;
        let out = slice_mut(output, len, "output")?;
        let mode = match mode {
            DitSampleMode::Full => SampleMode::Full,
            DitSampleMode::Partial if t_start == 0 => SampleMode::partial_default(m.trainer.schedule().timesteps()),
            DitSampleMode::Partial => SampleMode::Partial { t_start },
        };
        let sampler = Sampler {
            model: m.trainer.model(),
            codec: m.trainer.codec(),
            encoder: m.trainer.encoder(),
            schedule: m.trainer.schedule(),
        };
        let rng = sample_rng(seed, 0);
        let img = match mode {
            SampleMode::Full => sampler.sample_full(&src, &rng)?,
            SampleMode::Partial { t_start } => sampler.sample_partial(&src, t_start, &rng)?,
        };
        out.copy_from_slice(img.data());
        Ok(())
    })
}

/// Render synthetic pair `sample_id` of dataset `seed` at side `size`.
///
/// # Safety
/// `source` and `target` must each hold `len = 3·size·size` doubles.
#[no_mangle]
pub unsafe extern "C" fn dit_generate_pair(
    seed: u64,
    sample_id: u64,
    size: usize,
    source: *mut f64,
    target: *mut f64,
    len: usize,
) -> DitStatus {
    guard(|| {
        if len != image_len(size) {
            return Err(Fail::Core(Error::dim(format!("expected {} doubles, got {len}", image_len(size)))));
        }
        let p = generate_pair(seed, sample_id, size)?;
        slice_mut(source, len, "source")?.copy_from_slice(p.source.data());
        slice_mut(target, len, "target")?.copy_from_slice(p.target.data());
        Ok(())
    })
}

/// PSNR in dB with peak 2 (capped at 99 for identical inputs).
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dit_psnr(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> DitStatus {
    guard(|| {
        if len == 0 {
            return Err(Fail::Arg("len must be positive".into()));
        }
        let ta = Tensor::new(&[len], slice(a, len, "a")?.to_vec())?;
        let tb = Tensor::new(&[len], slice(b, len, "b")?.to_vec())?;
        let v = psnr(&ta, &tb)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

/// Write the model (with optimizer state) as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dit_model_save(model: *const DitModel, path: *const c_char) -> DitStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let path = c_str(path, "path")?;
        m.trainer.checkpoint()?.save(Path::new(path))?;
        Ok(())
    })
}
