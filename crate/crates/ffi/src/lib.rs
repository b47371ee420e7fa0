//! C ABI over `srrag-core`.
//!
//! Every fallible function returns an [`SrragStatus`]; on failure a
//! description is available from [`srrag_last_error_message`] on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function. Strings are NUL-terminated UTF-8.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use srrag_core::datastore::{DatastoreError, PolicyDatastore};
use srrag_core::eval::{lexical_match, MatchMode};
use srrag_core::registry::{SourceRegistry, SourceSpec};
use srrag_core::selector;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrragStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DimensionMismatch = 4,
    UnknownLabel = 5,
    UnknownId = 6,
    ZeroVector = 7,
    EmptyStore = 8,
    Io = 9,
    CorruptFile = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrragMatchMode {
    Substring = 0,
    ExactChoice = 1,
}

/// Opaque policy datastore handle.
pub struct SrragDatastore {
    store: PolicyDatastore,
    token_cstrs: Vec<CString>,
}

impl SrragDatastore {
    fn wrap(store: PolicyDatastore) -> Box<Self> {
        let token_cstrs = store
            .tokens()
            .iter()
            .map(|t| CString::new(t.as_str()).unwrap_or_default())
            .collect();
        Box::new(SrragDatastore { store, token_cstrs })
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(SrragStatus, String);

impl From<DatastoreError> for Fail {
    fn from(e: DatastoreError) -> Self {
        let status = match &e {
            DatastoreError::DimensionMismatch { .. } => SrragStatus::DimensionMismatch,
            DatastoreError::UnknownLabel(_) => SrragStatus::UnknownLabel,
            DatastoreError::UnknownId(_) => SrragStatus::UnknownId,
            DatastoreError::ZeroVector => SrragStatus::ZeroVector,
            DatastoreError::EmptyStore | DatastoreError::EmptyNeighborSet => SrragStatus::EmptyStore,
            DatastoreError::Io(_) => SrragStatus::Io,
            DatastoreError::BadMagic
            | DatastoreError::VersionMismatch(_)
            | DatastoreError::ChecksumMismatch
            | DatastoreError::Truncated
            | DatastoreError::Corrupt(_) => SrragStatus::CorruptFile,
            _ => SrragStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SrragStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting failures and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SrragStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrragStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SrragStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(SrragStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SrragStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(SrragStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a>(ds: *const SrragDatastore) -> Result<&'a SrragDatastore, Fail> {
    ds.as_ref()
        .ok_or_else(|| Fail(SrragStatus::NullPointer, "datastore handle is null".into()))
}

unsafe fn handle_mut<'a>(ds: *mut SrragDatastore) -> Result<&'a mut SrragDatastore, Fail> {
    ds.as_mut()
        .ok_or_else(|| Fail(SrragStatus::NullPointer, "datastore handle is null".into()))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(Fail(SrragStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(p)
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn srrag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failure on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn srrag_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates an empty datastore whose labels are `tokens[0..n_tokens]`.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_new(
    dim: u32,
    tokens: *const *const c_char,
    n_tokens: usize,
    out: *mut *mut SrragDatastore,
) -> SrragStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if dim == 0 || n_tokens == 0 {
            return Err(invalid("dim and n_tokens must be positive"));
        }
        let tokens = slice_arg(tokens, n_tokens, "tokens")?
            .iter()
            .map(|&t| str_arg(t, "token").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        *out = Box::into_raw(SrragDatastore::wrap(PolicyDatastore::new(dim as usize, tokens)));
        Ok(())
    })
}

/// Loads a datastore file.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_open(path: *const c_char, out: *mut *mut SrragDatastore) -> SrragStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        *out = Box::into_raw(SrragDatastore::wrap(PolicyDatastore::restore(Path::new(path))?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_save(ds: *const SrragDatastore, path: *const c_char) -> SrragStatus {
    guard(|| {
        let ds = handle(ds)?;
        ds.store.persist(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_free(ds: *mut SrragDatastore) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of entries; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_len(ds: *const SrragDatastore) -> usize {
    ds.as_ref().map_or(0, |d| d.store.len())
}

/// Key dimension; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_dim(ds: *const SrragDatastore) -> u32 {
    ds.as_ref().map_or(0, |d| d.store.dim() as u32)
}

#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_token_count(ds: *const SrragDatastore) -> usize {
    ds.as_ref().map_or(0, |d| d.token_cstrs.len())
}

/// Label token at `index`, owned by the handle; null if out of range.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_token(ds: *const SrragDatastore, index: usize) -> *const c_char {
    ds.as_ref()
        .and_then(|d| d.token_cstrs.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Appends an entry. `meta` may be null.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_insert(
    ds: *mut SrragDatastore,
    key: *const f32,
    key_len: usize,
    label: *const c_char,
    meta: *const c_char,
    out_id: *mut u64,
) -> SrragStatus {
    guard(|| {
        let ds = handle_mut(ds)?;
        let key = slice_arg(key, key_len, "key")?;
        let label = str_arg(label, "label")?;
        let meta = if meta.is_null() {
            None
        } else {
            Some(str_arg(meta, "meta")?.to_string())
        };
        let id = ds.store.insert_vector(key, label, meta)?;
        if !out_id.is_null() {
            *out_id = id;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_remove(ds: *mut SrragDatastore, id: u64) -> SrragStatus {
    guard(|| {
        handle_mut(ds)?.store.remove_entry(id)?;
        Ok(())
    })
}

/// Exact top-`k` neighbors, most similar first. Writes up to `capacity`
/// results; `out_similarities` and `out_labels` may be null. Fails with
/// `BufferTooSmall` (and writes nothing) if `capacity` is below the result
/// count, which is reported through `out_count` either way.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_knn(
    ds: *const SrragDatastore,
    query: *const f32,
    query_len: usize,
    k: usize,
    out_ids: *mut u64,
    out_similarities: *mut f64,
    out_labels: *mut u16,
    capacity: usize,
    out_count: *mut usize,
) -> SrragStatus {
    guard(|| {
        let ds = handle(ds)?;
        let out_count = out_ptr(out_count, "out_count")?;
        let query = slice_arg(query, query_len, "query")?;
        let found = ds.store.knn_search(query, k)?;
        *out_count = found.len();
        if found.len() > capacity {
            return Err(Fail(
                SrragStatus::BufferTooSmall,
                format!("need room for {} results", found.len()),
            ));
        }
        let out_ids = out_ptr(out_ids, "out_ids")?;
        for (i, n) in found.neighbors.iter().enumerate() {
            *out_ids.add(i) = n.id;
            if !out_similarities.is_null() {
                *out_similarities.add(i) = n.similarity;
            }
            if !out_labels.is_null() {
                *out_labels.add(i) = n.label;
            }
        }
        Ok(())
    })
}

/// Neighbor label distribution of the top-`k` neighbors of `query`, one
/// probability per label token in handle order. `out_probs` must hold
/// `srrag_datastore_token_count` values.
#[no_mangle]
pub unsafe extern "C" fn srrag_datastore_distribution(
    ds: *const SrragDatastore,
    query: *const f32,
    query_len: usize,
    k: usize,
    out_probs: *mut f64,
    capacity: usize,
) -> SrragStatus {
    guard(|| {
        let ds = handle(ds)?;
        let query = slice_arg(query, query_len, "query")?;
        let n = ds.store.tokens().len();
        if capacity < n {
            return Err(Fail(
                SrragStatus::BufferTooSmall,
                format!("need room for {n} probabilities"),
            ));
        }
        let out = out_ptr(out_probs, "out_probs")?;
        let dist = ds.store.neighbor_distribution(&ds.store.knn_search(query, k)?)?;
        for (i, t) in ds.store.tokens().iter().enumerate() {
            *out.add(i) = dist[t.as_str()];
        }
        Ok(())
    })
}

/// Source decision over `n_sources` parallel probability arrays, where
/// `internal_index` names the internal source and the rest are external.
/// Writes the chosen index and, if non-null, the `n_sources` combined scores.
#[no_mangle]
pub unsafe extern "C" fn srrag_route_decide(
    p_m: *const f64,
    p_d: *const f64,
    n_sources: usize,
    internal_index: usize,
    tau: f64,
    out_selected: *mut usize,
    out_combined: *mut f64,
) -> SrragStatus {
    guard(|| {
        let out_selected = out_ptr(out_selected, "out_selected")?;
        if n_sources < 2 || internal_index >= n_sources {
            return Err(invalid("need at least two sources and a valid internal index"));
        }
        let p_m = slice_arg(p_m, n_sources, "p_m")?;
        let p_d = slice_arg(p_d, n_sources, "p_d")?;
        let token = |i: usize| format!("<S{i}>");
        let specs = (0..n_sources)
            .map(|i| {
                if i == internal_index {
                    SourceSpec::internal(&token(i))
                } else {
                    SourceSpec::external(&token(i), &format!("b{i}"))
                }
            })
            .collect();
        let registry = SourceRegistry::new(specs).map_err(|e| invalid(e.to_string()))?;
        let dist = |v: &[f64]| (0..n_sources).map(|i| (token(i), v[i])).collect();
        let scores = selector::route(dist(p_m), dist(p_d), &registry, tau).map_err(|e| invalid(e.to_string()))?;
        *out_selected = registry.index_of(&scores.selected).expect("selected is registered");
        if !out_combined.is_null() {
            for i in 0..n_sources {
                *out_combined.add(i) = scores.combined[&token(i)];
            }
        }
        Ok(())
    })
}

/// Answer correctness against `n_golds` gold strings.
#[no_mangle]
pub unsafe extern "C" fn srrag_lexical_match(
    prediction: *const c_char,
    golds: *const *const c_char,
    n_golds: usize,
    mode: SrragMatchMode,
    out_match: *mut bool,
) -> SrragStatus {
    guard(|| {
        let out_match = out_ptr(out_match, "out_match")?;
        let prediction = str_arg(prediction, "prediction")?;
        if n_golds == 0 {
            return Err(invalid("at least one gold answer is required"));
        }
        let golds = slice_arg(golds, n_golds, "golds")?
            .iter()
            .map(|&g| str_arg(g, "gold").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let mode = match mode {
            SrragMatchMode::Substring => MatchMode::Substring,
            SrragMatchMode::ExactChoice => MatchMode::ExactChoice,
        };
        *out_match = lexical_match(prediction, &golds, mode);
        Ok(())
    })
}
