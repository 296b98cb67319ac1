//! C ABI over the trusttune library.
//!
//! Every function returns a [`TtStatus`]; on failure the message is kept per
//! thread and can be copied out with [`tt_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function. Panics never cross
//! the boundary; they surface as `TT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use trusttune::config::ExperimentConfig;
use trusttune::experiments::{self, Pretrained};
use trusttune::model::{encode, EncoderParams};
use trusttune::Error;

/// Result codes. `2` and `3` match the CLI exit codes for configuration and
/// invariant failures.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtStatus {
    Ok = 0,
    Failed = 1,
    Config = 2,
    Invariant = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    BufferTooSmall = 6,
    Io = 7,
    Checkpoint = 8,
    InvalidInput = 9,
    Panic = 10,
}

/// Parsed experiment configuration.
pub struct TtConfig {
    inner: ExperimentConfig,
}

/// Frozen encoder loaded from a checkpoint.
pub struct TtEncoder {
    inner: EncoderParams,
    path: PathBuf,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> TtStatus {
    match e {
        Error::Config(_) => TtStatus::Config,
        Error::Invariant(_) => TtStatus::Invariant,
        Error::Io { .. } => TtStatus::Io,
        Error::Checkpoint(_) => TtStatus::Checkpoint,
        Error::InvalidInput(_) | Error::Shape { .. } | Error::InvalidDistribution(_) => TtStatus::InvalidInput,
        _ => TtStatus::Failed,
    }
}

fn fail(status: TtStatus, msg: impl Into<String>) -> TtStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and containing panics.
fn guard(f: impl FnOnce() -> Result<(), TtStatus>) -> TtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TtStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(TtStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: trusttune::Result<T>) -> Result<T, TtStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, TtStatus> {
    if p.is_null() {
        return Err(fail(TtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(TtStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, TtStatus> {
    p.as_ref().ok_or_else(|| fail(TtStatus::NullPointer, format!("{what} is null")))
}

/// Copies `s` plus a NUL into `buf`; `BufferTooSmall` if it does not fit.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize) -> Result<(), TtStatus> {
    if buf.is_null() {
        return Err(fail(TtStatus::NullPointer, "output buffer is null"));
    }
    if s.len() + 1 > len {
        return Err(fail(
            TtStatus::BufferTooSmall,
            format!("need {} bytes, buffer has {len}", s.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message (empty after a success).
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_last_error_message(buf: *mut c_char, len: usize) -> TtStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(&msg, buf, len) {
        Ok(()) => TtStatus::Ok,
        Err(s) => s,
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tt_config_default(out: *mut *mut TtConfig) -> TtStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TtStatus::NullPointer, "out is null"));
        }
        *out = Box::into_raw(Box::new(TtConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a TOML document over the defaults; unknown keys are rejected with
/// `TT_STATUS_CONFIG`.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tt_config_from_toml(toml: *const c_char, out: *mut *mut TtConfig) -> TtStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        if out.is_null() {
            return Err(fail(TtStatus::NullPointer, "out is null"));
        }
        let inner = lift(ExperimentConfig::from_toml_str(text))?;
        *out = Box::into_raw(Box::new(TtConfig { inner }));
        Ok(())
    })
}

/// Writes the 64-character config hash plus NUL.
///
/// # Safety
/// `config` must come from this library; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_config_hash(config: *const TtConfig, buf: *mut c_char, len: usize) -> TtStatus {
    guard(|| {
        let cfg = ref_arg(config, "config")?;
        copy_out(&cfg.inner.config_hash(), buf, len)
    })
}

/// Overrides `run.seeds`.
///
/// # Safety
/// `seeds` must point to `count` values.
#[no_mangle]
pub unsafe extern "C" fn tt_config_set_seeds(config: *mut TtConfig, seeds: *const u64, count: usize) -> TtStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| fail(TtStatus::NullPointer, "config is null"))?;
        if seeds.is_null() || count == 0 {
            return Err(fail(TtStatus::Config, "run.seeds must not be empty"));
        }
        cfg.inner.run.seeds = std::slice::from_raw_parts(seeds, count).to_vec();
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library (or be null) and not be used after.
#[no_mangle]
pub unsafe extern "C" fn tt_config_free(config: *mut TtConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Loads an encoder checkpoint written by `pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tt_encoder_load(path: *const c_char, out: *mut *mut TtEncoder) -> TtStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(fail(TtStatus::NullPointer, "out is null"));
        }
        let pre = lift(Pretrained::load(&path))?;
        *out = Box::into_raw(Box::new(TtEncoder {
            inner: pre.encoder,
            path,
        }));
        Ok(())
    })
}

/// Hidden size of the encoder, i.e. the length `tt_encoder_encode` writes.
///
/// # Safety
/// `encoder` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tt_encoder_dim(encoder: *const TtEncoder, out: *mut usize) -> TtStatus {
    guard(|| {
        let enc = ref_arg(encoder, "encoder")?;
        if out.is_null() {
            return Err(fail(TtStatus::NullPointer, "out is null"));
        }
        *out = enc.inner.config.dim;
        Ok(())
    })
}

/// Pooled representation of one token sequence.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids and `out` room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tt_encoder_encode(
    encoder: *const TtEncoder,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
    out_len: usize,
) -> TtStatus {
    guard(|| {
        let enc = ref_arg(encoder, "encoder")?;
        if tokens.is_null() || out.is_null() {
            return Err(fail(TtStatus::NullPointer, "tokens or out is null"));
        }
        let dim = enc.inner.config.dim;
        if out_len < dim {
            return Err(fail(TtStatus::BufferTooSmall, format!("need {dim} doubles, buffer has {out_len}")));
        }
        let toks = std::slice::from_raw_parts(tokens, n_tokens);
        let h = lift(encode(&enc.inner, toks))?;
        ptr::copy_nonoverlapping(h.as_ptr(), out, dim);
        Ok(())
    })
}

/// Content fingerprint of the encoder parameters (64 hex chars plus NUL).
///
/// # Safety
/// `encoder` must come from this library; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_encoder_fingerprint(encoder: *const TtEncoder, buf: *mut c_char, len: usize) -> TtStatus {
    guard(|| {
        let enc = ref_arg(encoder, "encoder")?;
        copy_out(&enc.inner.fingerprint(), buf, len)
    })
}

/// # Safety
/// `encoder` must come from this library (or be null) and not be used after.
#[no_mangle]
pub unsafe extern "C" fn tt_encoder_free(encoder: *mut TtEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Runs a CLI command (`pretrain`, `finetune`, `stability`, `chain`, `cycle`,
/// `probe-matrix`, `theory`) into `out_dir`. Commands that need a pretrained
/// encoder read it from `encoder`, or from `run.checkpoint` when `encoder`
/// is null. A command whose runs all failed returns `TT_STATUS_FAILED`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tt_run(
    config: *const TtConfig,
    command: *const c_char,
    encoder: *const TtEncoder,
    out_dir: *const c_char,
) -> TtStatus {
    guard(|| {
        let cfg = &ref_arg(config, "config")?.inner;
        let command = str_arg(command, "command")?;
        let out = Path::new(str_arg(out_dir, "out_dir")?);
        let pretrained = || -> Result<Pretrained, TtStatus> {
            match encoder.as_ref() {
                Some(e) => lift(Pretrained::load(&e.path)),
                None => lift(cfg.checkpoint_path().and_then(|p| Pretrained::load(&p))),
            }
        };
        let manifest = match command {
            "pretrain" => lift(experiments::cmd_pretrain(cfg, out))?,
            "theory" => lift(experiments::cmd_theory(cfg, out))?,
            "finetune" => lift(experiments::cmd_finetune(cfg, &pretrained()?, out))?,
            "stability" => lift(experiments::cmd_stability(cfg, &pretrained()?, out))?,
            "chain" => lift(experiments::cmd_chain(cfg, &pretrained()?, out))?,
            "cycle" => lift(experiments::cmd_cycle(cfg, &pretrained()?, out))?,
            "probe-matrix" => lift(experiments::cmd_probe_matrix(cfg, &pretrained()?, out))?,
            other => return Err(fail(TtStatus::Config, format!("unknown command '{other}'"))),
        };
        if manifest.is_ok() {
            Ok(())
        } else {
            Err(fail(TtStatus::Failed, manifest.failure.unwrap_or_else(|| "every run failed".into())))
        }
    })
}

/// Symmetric KL divergence between two categorical distributions of length
/// `n`.
///
/// # Safety
/// `p` and `q` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tt_symmetric_kl(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> TtStatus {
    guard(|| {
        if p.is_null() || q.is_null() || out.is_null() {
            return Err(fail(TtStatus::NullPointer, "p, q or out is null"));
        }
        let (p, q) = (std::slice::from_raw_parts(p, n), std::slice::from_raw_parts(q, n));
        *out = lift(trusttune::objectives::symmetric_kl(p, q))?;
        Ok(())
    })
}
