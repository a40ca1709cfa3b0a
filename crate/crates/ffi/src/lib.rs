//! C ABI over the trainer.
//!
//! Handles are opaque pointers created by `semmim_trainer_new` or
//! `semmim_trainer_load` and released with `semmim_trainer_free`. Every
//! fallible call returns a [`SemmimStatus`]; on failure the message is
//! available from [`semmim_last_error`] on the same thread until the next
//! failing call. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use semmim::checkpoint;
use semmim::data::{DatasetManifest, Split};
use semmim::eval::eval_retrieval;
use semmim::objectives::LossBundle;
use semmim::train::{corpus_for, run_steps, Corpus, TrainState};
use semmim::{Error, RunConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemmimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Checkpoint = 4,
    Io = 5,
    NonFinite = 6,
    Internal = 7,
    Panic = 8,
}

/// Loss components of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SemmimLosses {
    pub cls: f64,
    pub patch: f64,
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub plm: f64,
    pub total: f64,
}

impl From<LossBundle> for SemmimLosses {
    fn from(b: LossBundle) -> Self {
        Self {
            cls: b.cls,
            patch: b.patch,
            itc: b.itc,
            itm: b.itm,
            mlm: b.mlm,
            plm: b.plm,
            total: b.total,
        }
    }
}

/// Recall@{1,5,10} in both retrieval directions, as fractions.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SemmimRecall {
    pub pairs: usize,
    pub image_to_text: [f64; 3],
    pub text_to_image: [f64; 3],
}

/// Split selector for evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemmimSplit {
    Train = 0,
    Test = 1,
}

/// Opaque trainer: model, momentum teacher, optimizer state and corpus.
pub struct SemmimTrainer {
    state: TrainState,
    manifest: DatasetManifest,
    corpus: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> SemmimStatus {
    match e {
        Error::Config(_) | Error::Toml(_) => SemmimStatus::Config,
        Error::Checkpoint(_) | Error::Structure(_) => SemmimStatus::Checkpoint,
        Error::Io(_) | Error::Json(_) => SemmimStatus::Io,
        Error::NonFinite(_) => SemmimStatus::NonFinite,
        Error::Input(_) => SemmimStatus::InvalidArgument,
        Error::Shape(_) => SemmimStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), SemmimStatus>) -> SemmimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SemmimStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SemmimStatus::Panic
        }
    }
}

fn fail<T>(r: semmim::Result<T>) -> Result<T, SemmimStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null(what: &str) -> SemmimStatus {
    set_error(format!("`{what}` is null"));
    SemmimStatus::NullPointer
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, SemmimStatus> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(format!("`{what}` is not valid UTF-8"));
        SemmimStatus::InvalidArgument
    })
}

fn build(state: TrainState) -> semmim::Result<Box<SemmimTrainer>> {
    let manifest = corpus_for(&state.run, state.seed)?;
    let corpus = Corpus::from_manifest(&manifest, Split::Train, state.cfg())?;
    Ok(Box::new(SemmimTrainer { state, manifest, corpus }))
}

/// Message of the last failing call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn semmim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a fresh trainer. `config_toml` may be null for the defaults;
/// otherwise it is TOML text in the run-configuration format.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_new(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut SemmimTrainer,
) -> SemmimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let run = if config_toml.is_null() {
            RunConfig::default()
        } else {
            fail(RunConfig::from_toml_str(str_arg(config_toml, "config_toml")?))?
        };
        let state = fail(TrainState::new(run, seed))?;
        *out = Box::into_raw(fail(build(state))?);
        Ok(())
    })
}

/// Restores a trainer from a checkpoint file. A checkpoint whose stored
/// configuration hash does not verify is refused unless `force` is nonzero.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_load(
    path: *const c_char,
    force: i32,
    out: *mut *mut SemmimTrainer,
) -> SemmimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let state = fail(checkpoint::load(&path, None, force != 0))?;
        *out = Box::into_raw(fail(build(state))?);
        Ok(())
    })
}

/// Runs `steps` training steps. The losses of the last step are written to
/// `last` when it is non-null.
///
/// # Safety
/// `trainer` must come from this library and not be freed; `last` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_step(
    trainer: *mut SemmimTrainer,
    steps: u32,
    last: *mut SemmimLosses,
) -> SemmimStatus {
    guard(|| {
        let t = trainer.as_mut().ok_or_else(|| null("trainer"))?;
        let losses = fail(run_steps(&mut t.state, &t.corpus, steps as usize, None, |_| Ok(())))?;
        if let (Some(l), false) = (losses.last(), last.is_null()) {
            *last = (*l).into();
        }
        Ok(())
    })
}

/// Number of steps taken so far, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_step_count(trainer: *const SemmimTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.state.step)
}

/// Writes a checkpoint to `path`.
///
/// # Safety
/// `trainer` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_save(trainer: *const SemmimTrainer, path: *const c_char) -> SemmimStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        fail(checkpoint::save(&t.state, &path))
    })
}

/// Retrieval recall of the current model on a corpus split.
///
/// # Safety
/// `trainer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_eval(
    trainer: *const SemmimTrainer,
    split: SemmimSplit,
    out: *mut SemmimRecall,
) -> SemmimStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let split = match split {
            SemmimSplit::Train => Split::Train,
            SemmimSplit::Test => Split::Test,
        };
        let table = fail(eval_retrieval(&t.state.model, &t.manifest, split, None))?;
        *out = SemmimRecall {
            pairs: table.pairs,
            image_to_text: table.image_to_text,
            text_to_image: table.text_to_image,
        };
        Ok(())
    })
}

/// Releases a handle. Null is accepted and ignored.
///
/// # Safety
/// `trainer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn semmim_trainer_free(trainer: *mut SemmimTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(semmim_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn errors_map_to_statuses() {
        assert_eq!(status_of(&Error::Config("x".into())), SemmimStatus::Config);
        assert_eq!(status_of(&Error::Checkpoint("x".into())), SemmimStatus::Checkpoint);
        assert_eq!(status_of(&Error::Input("x".into())), SemmimStatus::InvalidArgument);
        assert_eq!(status_of(&Error::NonFinite("itc")), SemmimStatus::NonFinite);
        assert_eq!(status_of(&Error::Shape("x".into())), SemmimStatus::Internal);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(status_of(&Error::from(io)), SemmimStatus::Io);
    }

    #[test]
    fn guard_contains_panics_and_records_the_message() {
        assert_eq!(guard(|| Ok(())), SemmimStatus::Ok);
        assert_eq!(guard(|| panic!("boom")), SemmimStatus::Panic);
        assert_eq!(last_error(), "panic: boom");
        assert_eq!(
            guard(|| fail::<()>(Err(Error::Input("bad index".into())))),
            SemmimStatus::InvalidArgument
        );
        assert!(last_error().contains("bad index"));
    }

    #[test]
    fn string_arguments_are_checked() {
        assert_eq!(unsafe { str_arg(ptr::null(), "path") }.unwrap_err(), SemmimStatus::NullPointer);
        assert!(last_error().contains("`path`"));
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(
            unsafe { str_arg(bad.as_ptr().cast(), "path") }.unwrap_err(),
            SemmimStatus::InvalidArgument
        );
        let good = CString::new("ok").unwrap();
        assert_eq!(unsafe { str_arg(good.as_ptr(), "path") }.unwrap(), "ok");
    }

    #[test]
    fn interior_nul_does_not_lose_the_message() {
        set_error("a\0b");
        assert_eq!(last_error(), "a b");
    }
}
