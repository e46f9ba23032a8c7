//! C ABI over `gmap` checkpoints.
//!
//! Every fallible function returns a [`GmapStatus`]; on failure a message is
//! available from [`gmap_last_error`] on the same thread. Handles are opaque
//! and owned by the caller until passed to [`gmap_model_free`]. Panics never
//! cross the boundary; they surface as `GMAP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gmap::checkpoint::{load_checkpoint, save_checkpoint};
use gmap::data::read_corpus;
use gmap::model::param_census;
use gmap::train::{encode_corpus, eval_mlm_loss, MlmPath};
use gmap::{Error, GmapModel as Model, Sequence};

/// Bumped whenever a signature or status value changes.
pub const GMAP_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmapStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    NotFound = 3,
    Io = 4,
    Checkpoint = 5,
    Corrupt = 6,
    Config = 7,
    Input = 8,
    Numeric = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque model handle.
pub struct GmapModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> GmapStatus {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => GmapStatus::NotFound,
        Error::Io(_) => GmapStatus::Io,
        Error::Checkpoint(_) => GmapStatus::Checkpoint,
        Error::Corrupt(_) => GmapStatus::Corrupt,
        Error::Config(_) => GmapStatus::Config,
        Error::Data(_) | Error::Input(_) | Error::Length { .. } => GmapStatus::Input,
        _ => GmapStatus::Numeric,
    }
}

type FfiResult = Result<(), (GmapStatus, String)>;

fn fail(status: GmapStatus, msg: impl Into<String>) -> FfiResult {
    Err((status, msg.into()))
}

fn lift<T>(r: gmap::Result<T>) -> Result<T, (GmapStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn guard(f: impl FnOnce() -> FfiResult) -> GmapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GmapStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GmapStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (GmapStatus, String)> {
    if p.is_null() {
        return Err((GmapStatus::NullArgument, "path is null".into()));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GmapStatus::InvalidUtf8, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

unsafe fn model_arg<'a>(m: *const GmapModel) -> Result<&'a Model, (GmapStatus, String)> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or((GmapStatus::NullArgument, "model handle is null".into()))
}

fn not_found(path: &Path) -> Result<(), (GmapStatus, String)> {
    if path.exists() {
        Ok(())
    } else {
        fail(GmapStatus::NotFound, format!("{}: no such file", path.display()))
    }
}

/// ABI version of this library, [`GMAP_ABI_VERSION`].
#[no_mangle]
pub extern "C" fn gmap_abi_version() -> u32 {
    GMAP_ABI_VERSION
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gmap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_load(path: *const c_char, out: *mut *mut GmapModel) -> GmapStatus {
    guard(|| {
        if out.is_null() {
            return fail(GmapStatus::NullArgument, "out is null");
        }
        let path = path_arg(path)?;
        not_found(path)?;
        let inner = lift(load_checkpoint(path))?;
        *out = Box::into_raw(Box::new(GmapModel { inner }));
        Ok(())
    })
}

/// Writes the model to `path` in checkpoint format.
///
/// # Safety
/// `model` must come from [`gmap_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_save(model: *const GmapModel, path: *const c_char) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        lift(save_checkpoint(m, path_arg(path)?))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`gmap_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_free(model: *mut GmapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, maximum sequence length and class count (0 without a
/// head).
///
/// # Safety
/// `model` must be a live handle; each out pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_dims(
    model: *const GmapModel,
    vocab_size: *mut usize,
    max_seq_len: *mut usize,
    num_classes: *mut usize,
) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        if let Some(v) = vocab_size.as_mut() {
            *v = m.config.domain.vocab_size;
        }
        if let Some(v) = max_seq_len.as_mut() {
            *v = m.max_seq_len();
        }
        if let Some(v) = num_classes.as_mut() {
            *v = m.config.head.as_ref().map_or(0, |h| h.num_classes);
        }
        Ok(())
    })
}

/// Parameter fingerprint, stable across save and load.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_fingerprint(model: *const GmapModel, out: *mut u64) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out
            .as_mut()
            .ok_or((GmapStatus::NullArgument, "out is null".to_string()))?;
        *out = m.fingerprint();
        Ok(())
    })
}

/// Trainable and frozen scalar counts.
///
/// # Safety
/// `model` must be a live handle; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_census(
    model: *const GmapModel,
    trainable: *mut usize,
    frozen: *mut usize,
) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        let total = param_census(m)
            .into_iter()
            .find(|r| r.component == "total")
            .ok_or((GmapStatus::Numeric, "census has no total row".to_string()))?;
        if let Some(t) = trainable.as_mut() {
            *t = total.trainable;
        }
        if let Some(f) = frozen.as_mut() {
            *f = total.frozen;
        }
        Ok(())
    })
}

/// Encodes whitespace-separated `text` as `[CLS] … [SEP]` ids, truncated to
/// the model's maximum length. `*len` receives the id count; if it exceeds
/// `capacity` nothing is written and `GMAP_STATUS_BUFFER_TOO_SMALL` is
/// returned.
///
/// # Safety
/// `text` must be NUL-terminated; `ids` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_encode(
    model: *const GmapModel,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        if text.is_null() || len.is_null() {
            return fail(GmapStatus::NullArgument, "text or len is null");
        }
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| (GmapStatus::InvalidUtf8, "text is not UTF-8".to_string()))?;
        let vocab = m
            .vocab
            .as_ref()
            .ok_or((GmapStatus::Checkpoint, "checkpoint carries no vocabulary".to_string()))?;
        let encoded = vocab.encode_sequence(text, m.max_seq_len());
        *len = encoded.len();
        if encoded.len() > capacity {
            return fail(GmapStatus::BufferTooSmall, format!("need {} ids", encoded.len()));
        }
        if ids.is_null() {
            return fail(GmapStatus::NullArgument, "ids is null");
        }
        for (i, id) in encoded.into_iter().enumerate() {
            *ids.add(i) = id as u32;
        }
        Ok(())
    })
}

/// Class probabilities for one id sequence. `probs` must hold the model's
/// class count; `*label` receives the argmax.
///
/// # Safety
/// `ids` must hold `len` elements, `probs` `probs_len` elements.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_classify(
    model: *const GmapModel,
    ids: *const u32,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
    label: *mut usize,
) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        if ids.is_null() || probs.is_null() {
            return fail(GmapStatus::NullArgument, "ids or probs is null");
        }
        let seq: Vec<usize> = std::slice::from_raw_parts(ids, len)
            .iter()
            .map(|&i| i as usize)
            .collect();
        let p = lift(m.predict_proba(&Sequence::new(seq)))?;
        if probs_len < p.len() {
            return fail(GmapStatus::BufferTooSmall, format!("need {} probabilities", p.len()));
        }
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(&p);
        if let Some(l) = label.as_mut() {
            *l = gmap::model::argmax(&p);
        }
        Ok(())
    })
}

/// Held-out MLM loss over a corpus file (one document per line) with the
/// fixed evaluation masking. A nonzero `through_general` evaluates the
/// general encoder alone.
///
/// # Safety
/// `corpus_path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gmap_model_mlm_loss(
    model: *const GmapModel,
    corpus_path: *const c_char,
    mask_prob: f64,
    through_general: i32,
    out: *mut f64,
) -> GmapStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out
            .as_mut()
            .ok_or((GmapStatus::NullArgument, "out is null".to_string()))?;
        let path = path_arg(corpus_path)?;
        not_found(path)?;
        let vocab = m
            .vocab
            .as_ref()
            .ok_or((GmapStatus::Checkpoint, "checkpoint carries no vocabulary".to_string()))?;
        let docs = lift(read_corpus(path))?;
        let corpus = encode_corpus(vocab, &docs, m.max_seq_len());
        let route = if through_general != 0 {
            MlmPath::General
        } else {
            MlmPath::Model
        };
        *out = lift(eval_mlm_loss(m, &corpus, mask_prob, route))?;
        Ok(())
    })
}
