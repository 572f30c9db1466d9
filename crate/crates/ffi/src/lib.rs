//! C ABI over the training engine: opaque handles, integer status codes,
//! and a per-thread last-error message. The contract is declared in
//! `include/hmfgcl.h`; every exported symbol here must stay in sync with
//! that header.
//!
//! Conventions:
//! - Constructors return null on failure; fallible operations return a
//!   status code (`HMFGCL_OK` = 0). Either way the failure message is
//!   retrievable with [`hmfgcl_last_error`] until the next failing call
//!   on the same thread.
//! - Handles are created and released only by this library; passing a
//!   foreign pointer is undefined behavior. Null handles are rejected
//!   with `HMFGCL_ERR_MISUSE` rather than dereferenced.
//! - Panics never unwind across the boundary; they are caught and
//!   reported as `HMFGCL_ERR_NUMERICAL`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hmfgcl::config::TrainConfig;
use hmfgcl::data::Split;
use hmfgcl::error::Error;
use hmfgcl::eval;
use hmfgcl::model::Checkpoint;
use hmfgcl::training;
use hmfgcl::InteractionMatrix;

pub const HMFGCL_OK: c_int = 0;
pub const HMFGCL_ERR_MISUSE: c_int = 1;
pub const HMFGCL_ERR_INPUT: c_int = 2;
pub const HMFGCL_ERR_NUMERICAL: c_int = 3;

pub struct HmfgclMatrix(InteractionMatrix);
pub struct HmfgclConfig(TrainConfig);
pub struct HmfgclModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(code: c_int, msg: &str) -> c_int {
    set_last_error(msg);
    code
}

fn fail_with(e: &Error) -> c_int {
    fail(e.exit_code() as c_int, &e.to_string())
}

/// Run a body that can panic; panics become `HMFGCL_ERR_NUMERICAL`.
fn guarded<T>(body: impl FnOnce() -> Result<T, c_int>) -> Result<T, c_int> {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".to_string());
            Err(fail(HMFGCL_ERR_NUMERICAL, &format!("internal panic: {msg}")))
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn require_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        return Err(fail(HMFGCL_ERR_MISUSE, &format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(HMFGCL_ERR_MISUSE, &format!("{what} is not valid UTF-8")))
}

unsafe fn require_ref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, c_int> {
    if ptr.is_null() {
        Err(fail(HMFGCL_ERR_MISUSE, &format!("{what} is null")))
    } else {
        Ok(unsafe { &*ptr })
    }
}

fn parse_split(name: &str) -> Result<Split, c_int> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(fail(
            HMFGCL_ERR_MISUSE,
            &format!("unknown split '{other}' (expected train, valid, or test)"),
        )),
    }
}

/// Version of the library, as a static string.
#[no_mangle]
pub extern "C" fn hmfgcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on the calling thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hmfgcl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a prepared interaction matrix (the `prepare` command's output).
/// Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_matrix_load(path: *const c_char) -> *mut HmfgclMatrix {
    let result = guarded(|| {
        let path = unsafe { require_str(path, "path") }?;
        let matrix = InteractionMatrix::load(Path::new(path)).map_err(|e| fail_with(&e))?;
        Ok(Box::into_raw(Box::new(HmfgclMatrix(matrix))))
    });
    result.unwrap_or(std::ptr::null_mut())
}

/// Dimensions of a loaded matrix.
///
/// # Safety
/// `matrix` must be a live handle from this library; out-pointers must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_matrix_counts(
    matrix: *const HmfgclMatrix,
    users: *mut u32,
    items: *mut u32,
    interactions: *mut u64,
) -> c_int {
    match guarded(|| {
        let matrix = unsafe { require_ref(matrix, "matrix") }?;
        unsafe {
            if !users.is_null() {
                *users = matrix.0.num_users as u32;
            }
            if !items.is_null() {
                *items = matrix.0.num_items as u32;
            }
            if !interactions.is_null() {
                *interactions = matrix.0.entries.len() as u64;
            }
        }
        Ok(HMFGCL_OK)
    }) {
        Ok(code) | Err(code) => code,
    }
}

/// # Safety
/// `matrix` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_matrix_free(matrix: *mut HmfgclMatrix) {
    if !matrix.is_null() {
        drop(unsafe { Box::from_raw(matrix) });
    }
}

/// New configuration with every hyperparameter at its built-in default.
#[no_mangle]
pub extern "C" fn hmfgcl_config_new() -> *mut HmfgclConfig {
    Box::into_raw(Box::new(HmfgclConfig(TrainConfig::default())))
}

/// Set one configuration key from its string form, e.g. ("tau", "0.5").
///
/// # Safety
/// `config` must be a live handle; `key`/`value` valid strings.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_config_set(
    config: *mut HmfgclConfig,
    key: *const c_char,
    value: *const c_char,
) -> c_int {
    match guarded(|| {
        if config.is_null() {
            return Err(fail(HMFGCL_ERR_MISUSE, "config is null"));
        }
        let key = unsafe { require_str(key, "key") }?;
        let value = unsafe { require_str(value, "value") }?;
        let config = unsafe { &mut *config };
        config.0.set_key(key, value).map_err(|e| fail_with(&e))?;
        Ok(HMFGCL_OK)
    }) {
        Ok(code) | Err(code) => code,
    }
}

/// # Safety
/// `config` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_config_free(config: *mut HmfgclConfig) {
    if !config.is_null() {
        drop(unsafe { Box::from_raw(config) });
    }
}

/// Train on a loaded matrix; blocks until finished. Returns a model
/// handle, or null on failure.
///
/// # Safety
/// `matrix` and `config` must be live handles from this library.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_train(
    matrix: *const HmfgclMatrix,
    config: *const HmfgclConfig,
) -> *mut HmfgclModel {
    let result = guarded(|| {
        let matrix = unsafe { require_ref(matrix, "matrix") }?;
        let config = unsafe { require_ref(config, "config") }?;
        let outcome = training::train(&matrix.0, &config.0).map_err(|e| fail_with(&e))?;
        let checkpoint =
            Checkpoint::from_state(&outcome.state, &config.0.config_hash(), config.0.seed);
        Ok(Box::into_raw(Box::new(HmfgclModel(checkpoint))))
    });
    result.unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_model_save(
    model: *const HmfgclModel,
    path: *const c_char,
) -> c_int {
    match guarded(|| {
        let model = unsafe { require_ref(model, "model") }?;
        let path = unsafe { require_str(path, "path") }?;
        model.0.save(Path::new(path)).map_err(|e| fail_with(&e))?;
        Ok(HMFGCL_OK)
    }) {
        Ok(code) | Err(code) => code,
    }
}

/// Load a checkpoint written by `hmfgcl_model_save` or the CLI. Returns
/// null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_model_load(path: *const c_char) -> *mut HmfgclModel {
    let result = guarded(|| {
        let path = unsafe { require_str(path, "path") }?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(|e| fail_with(&e))?;
        Ok(Box::into_raw(Box::new(HmfgclModel(checkpoint))))
    });
    result.unwrap_or(std::ptr::null_mut())
}

/// Table dimensions of a model.
///
/// # Safety
/// `model` must be a live handle; out-pointers null or writable.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_model_dims(
    model: *const HmfgclModel,
    users: *mut u32,
    items: *mut u32,
    dim: *mut u32,
) -> c_int {
    match guarded(|| {
        let model = unsafe { require_ref(model, "model") }?;
        unsafe {
            if !users.is_null() {
                *users = model.0.e_user.rows() as u32;
            }
            if !items.is_null() {
                *items = model.0.e_item.rows() as u32;
            }
            if !dim.is_null() {
                *dim = model.0.e_user.cols() as u32;
            }
        }
        Ok(HMFGCL_OK)
    }) {
        Ok(code) | Err(code) => code,
    }
}

/// Preference score of one (user, item) pair.
///
/// # Safety
/// `model` must be a live handle; `score` writable.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_score(
    model: *const HmfgclModel,
    user: u32,
    item: u32,
    score: *mut c_double,
) -> c_int {
    match guarded(|| {
        let model = unsafe { require_ref(model, "model") }?;
        if score.is_null() {
            return Err(fail(HMFGCL_ERR_MISUSE, "score out-pointer is null"));
        }
        let (m, n) = (model.0.e_user.rows(), model.0.e_item.rows());
        if user as usize >= m || item as usize >= n {
            return Err(fail(
                HMFGCL_ERR_INPUT,
                &format!("pair ({user}, {item}) outside tables {m}x{n}"),
            ));
        }
        unsafe {
            *score = hmfgcl::model::predict(
                model.0.e_user.row(user as usize),
                model.0.e_item.row(item as usize),
            );
        }
        Ok(HMFGCL_OK)
    }) {
        Ok(code) | Err(code) => code,
    }
}

/// Top-k recommendations for a user, excluding the user's training items.
/// Writes at most `k` item indices to `out_items` and the count actually
/// written to `out_count` (fewer than `k` when the candidate pool is
/// smaller).
///
/// # Safety
/// `model` and `matrix` must be live handles; `out_items` must point to
/// room for `k` values; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_recommend(
    model: *const HmfgclModel,
    matrix: *const HmfgclMatrix,
    user: u32,
    k: u32,
    out_items: *mut u32,
    out_count: *mut u32,
) -> c_int {
    match guarded(|| {
        let model = unsafe { require_ref(model, "model") }?;
        let matrix = unsafe { require_ref(matrix, "matrix") }?;
        if out_items.is_null() || out_count.is_null() {
            return Err(fail(HMFGCL_ERR_MISUSE, "output pointer is null"));
        }
        if model.0.e_user.rows() != matrix.0.num_users
            || model.0.e_item.rows() != matrix.0.num_items
        {
            return Err(fail(
                HMFGCL_ERR_INPUT,
                "model and matrix dimensions disagree",
            ));
        }
        if user as usize >= matrix.0.num_users {
            return Err(fail(
                HMFGCL_ERR_INPUT,
                &format!("user {user} outside {} users", matrix.0.num_users),
            ));
        }
        let owned = &matrix.0.items_per_user(Split::Train)[user as usize];
        let ranking = eval::rank_items(model.0.e_user.row(user as usize), &model.0.e_item, owned);
        let take = ranking.len().min(k as usize);
        unsafe {
            std::ptr::copy_nonoverlapping(ranking.as_ptr(), out_items, take);
            *out_count = take as u32;
        }
        Ok(HMFGCL_OK)
    }) {
        Ok(code) | Err(code) => code,
    }
}

/// Full-ranking metrics of a model on one split, as a JSON document.
/// `split` is "train", "valid", or "test"; `ks` is a comma-separated
/// cutoff list such as "10,20". The returned string must be released
/// with `hmfgcl_string_free`. Returns null on failure.
///
/// # Safety
/// `model` and `matrix` must be live handles; `split`/`ks` valid strings.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_evaluate_json(
    model: *const HmfgclModel,
    matrix: *const HmfgclMatrix,
    split: *const c_char,
    ks: *const c_char,
) -> *mut c_char {
    let result = guarded(|| {
        let model = unsafe { require_ref(model, "model") }?;
        let matrix = unsafe { require_ref(matrix, "matrix") }?;
        let split = parse_split(unsafe { require_str(split, "split") }?)?;
        let ks: Vec<usize> = unsafe { require_str(ks, "ks") }?
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| fail(HMFGCL_ERR_MISUSE, &format!("bad cutoff '{p}'")))
            })
            .collect::<Result<_, _>>()?;
        let report = eval::evaluate(&model.0, &matrix.0, split, &ks).map_err(|e| fail_with(&e))?;
        let json = CString::new(report.to_json())
            .map_err(|_| fail(HMFGCL_ERR_NUMERICAL, "report contained an interior NUL"))?;
        Ok(json.into_raw())
    });
    result.unwrap_or(std::ptr::null_mut())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// # Safety
/// `model` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn hmfgcl_model_free(model: *mut HmfgclModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
