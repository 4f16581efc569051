//! C ABI over the simulator, dataset storage and discriminator.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_generate`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`EdgeclStatus`]; on failure `edgecl_last_error` describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use edgecl::csi_sim::{generate_domain, DomainDataset, PerturbationConfig, SceneConfig, SceneSpec, UserProfile};
use edgecl::harness::ModelShape;
use edgecl::model::{forward, Mode, ModelConfig, ModelParams};
use edgecl::preprocess::{input_width, preprocess_sequence, DEFAULT_TEMPORAL_LEN};
use edgecl::storage::{read_domain, write_domain};
use edgecl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeclStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    NonFinite = 3,
    Io = 4,
    InvalidArgument = 5,
    Shape = 6,
    Format = 7,
    Internal = 8,
}

/// Simulated scene.
pub struct EdgeclScene {
    inner: SceneConfig,
}

/// One user's labeled domain dataset.
pub struct EdgeclDataset {
    inner: DomainDataset,
}

/// Discriminator parameters.
pub struct EdgeclModel {
    inner: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EdgeclStatus {
    match e {
        Error::Config(_) | Error::Json(_) => EdgeclStatus::Config,
        Error::NonFinite(_) => EdgeclStatus::NonFinite,
        Error::Io { .. } => EdgeclStatus::Io,
        Error::Shape(_) => EdgeclStatus::Shape,
        Error::Format { .. } => EdgeclStatus::Format,
        _ => EdgeclStatus::InvalidArgument,
    }
}

struct Fail(EdgeclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EdgeclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            EdgeclStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EdgeclStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EdgeclStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(EdgeclStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_value<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn edgecl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn edgecl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Desk-scale scene: 16 subcarriers, 1 Tx, 2 Rx.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn edgecl_scene_new_desk(out: *mut *mut EdgeclScene) -> EdgeclStatus {
    guard(|| {
        let inner = SceneSpec::desk().build()?;
        put(out, EdgeclScene { inner })
    })
}

/// Scene from a JSON scene spec; missing fields take desk defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edgecl_scene_from_json(json: *const c_char, out: *mut *mut EdgeclScene) -> EdgeclStatus {
    guard(|| {
        let spec: SceneSpec = serde_json::from_str(c_str(json, "json")?).map_err(Error::from)?;
        put(out, EdgeclScene { inner: spec.build()? })
    })
}

/// Width of the preprocessed rows for this scene.
///
/// # Safety
/// `scene` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn edgecl_scene_input_width(
    scene: *const EdgeclScene,
    temporal_len: usize,
    out: *mut usize,
) -> EdgeclStatus {
    guard(|| {
        let s = as_ref(scene, "scene")?;
        put_value(out, input_width(&s.inner.layout(), temporal_len))
    })
}

/// # Safety
/// `scene` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn edgecl_scene_free(scene: *mut EdgeclScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Generates `per_class` sequences for each of `n_classes` activities.
///
/// # Safety
/// `scene` must come from this library and `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edgecl_dataset_generate(
    scene: *const EdgeclScene,
    user_id: u64,
    n_classes: usize,
    per_class: usize,
    seed: u64,
    out: *mut *mut EdgeclDataset,
) -> EdgeclStatus {
    guard(|| {
        let s = as_ref(scene, "scene")?;
        let user = UserProfile::new(user_id, n_classes, PerturbationConfig::default())?;
        let inner = generate_domain(0, &s.inner, &user, per_class, seed)?;
        put(out, EdgeclDataset { inner })
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edgecl_dataset_load(path: *const c_char, out: *mut *mut EdgeclDataset) -> EdgeclStatus {
    guard(|| {
        let inner = read_domain(&PathBuf::from(c_str(path, "path")?))?;
        put(out, EdgeclDataset { inner })
    })
}

/// # Safety
/// `dataset` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edgecl_dataset_save(dataset: *const EdgeclDataset, path: *const c_char) -> EdgeclStatus {
    guard(|| {
        let d = as_ref(dataset, "dataset")?;
        Ok(write_domain(&PathBuf::from(c_str(path, "path")?), &d.inner)?)
    })
}

/// # Safety
/// `dataset` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn edgecl_dataset_len(dataset: *const EdgeclDataset, out: *mut usize) -> EdgeclStatus {
    guard(|| put_value(out, as_ref(dataset, "dataset")?.inner.len()))
}

/// # Safety
/// `dataset` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn edgecl_dataset_label(
    dataset: *const EdgeclDataset,
    index: usize,
    out: *mut usize,
) -> EdgeclStatus {
    guard(|| {
        let d = &as_ref(dataset, "dataset")?.inner;
        let Some(e) = d.entries.get(index) else {
            return Err(Fail(EdgeclStatus::InvalidArgument, format!("index {index} out of range")));
        };
        let label = e
            .label
            .ok_or_else(|| Fail(EdgeclStatus::InvalidArgument, format!("entry {index} is unlabeled")))?;
        put_value(out, label)
    })
}

/// # Safety
/// `dataset` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn edgecl_dataset_free(dataset: *mut EdgeclDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Randomly initialized desk-size model for inputs of `scene`.
///
/// # Safety
/// `scene` must come from this library and `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edgecl_model_new(
    scene: *const EdgeclScene,
    n_classes: usize,
    seed: u64,
    out: *mut *mut EdgeclModel,
) -> EdgeclStatus {
    guard(|| {
        let s = as_ref(scene, "scene")?;
        let m = ModelShape::default();
        let cfg = ModelConfig {
            input_width: input_width(&s.inner.layout(), DEFAULT_TEMPORAL_LEN),
            mlp_hidden: m.mlp_hidden,
            width: m.width,
            heads: m.heads,
            n_blocks: m.n_blocks,
            n_classes,
            dropout: m.dropout,
        };
        put(out, EdgeclModel { inner: ModelParams::init(cfg, seed)? })
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edgecl_model_load(path: *const c_char, out: *mut *mut EdgeclModel) -> EdgeclStatus {
    guard(|| {
        let inner = ModelParams::load(&PathBuf::from(c_str(path, "path")?))?;
        put(out, EdgeclModel { inner })
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edgecl_model_save(model: *const EdgeclModel, path: *const c_char) -> EdgeclStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        Ok(m.inner.save(&PathBuf::from(c_str(path, "path")?))?)
    })
}

/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn edgecl_model_param_count(model: *const EdgeclModel, out: *mut usize) -> EdgeclStatus {
    guard(|| put_value(out, as_ref(model, "model")?.inner.len()))
}

/// Eval-mode class probabilities of dataset entry `index`, written to
/// `probs[0..len]`; `len` must equal the model's class count.
///
/// # Safety
/// Handles must come from this library; `probs` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn edgecl_model_predict(
    model: *const EdgeclModel,
    dataset: *const EdgeclDataset,
    index: usize,
    probs: *mut f64,
    len: usize,
) -> EdgeclStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.inner;
        let d = &as_ref(dataset, "dataset")?.inner;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if len != m.config.n_classes {
            return Err(Fail(
                EdgeclStatus::Shape,
                format!("buffer holds {len} values, model has {} classes", m.config.n_classes),
            ));
        }
        let seq = d
            .entries
            .get(index)
            .ok_or_else(|| Fail(EdgeclStatus::InvalidArgument, format!("index {index} out of range")))?;
        let channels = 3 * d.layout.conj_len();
        let temporal_len = m.config.input_width.checked_sub(channels).ok_or_else(|| {
            Fail(
                EdgeclStatus::Shape,
                format!("model input width {} below {channels} CSI channels", m.config.input_width),
            )
        })?;
        let x = preprocess_sequence(seq, &d.layout, d.duration, temporal_len)?;
        let p = forward(m, &x, Mode::Eval, None)?.probs;
        std::slice::from_raw_parts_mut(probs, len).copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn edgecl_model_free(model: *mut EdgeclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
