//! C interface. Objects are opaque heap handles released with the matching
//! `*_free` function; every fallible call returns a `D2vStatus` and leaves a
//! message retrievable with `d2v_last_error`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use domain2vec::datagen::{build_corpus, CorpusConfig, DatasetManifest, Scale};
use domain2vec::embedding::{embed_manifest, EmbeddingConfig, EmbeddingSet};
use domain2vec::eval::pearson_cc;
use domain2vec::model::{Checkpoint, Domain2VecNet};
use domain2vec::msda::distance_to_weights;
use domain2vec::training::{evaluate_accuracy, DomainData};
use domain2vec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum D2vStatus {
    Ok = 0,
    NullPointer = 1,
    /// Invalid argument, configuration or precondition.
    InvalidArgument = 2,
    /// A computation produced NaN or infinity.
    Numeric = 3,
    Io = 4,
    NotFound = 5,
    Internal = 6,
}

/// Loaded corpus manifest.
pub struct D2vManifest {
    inner: DatasetManifest,
}

/// Loaded network.
pub struct D2vModel {
    inner: Domain2VecNet,
}

/// Embeddings and distances for a set of domains.
pub struct D2vEmbedding {
    inner: EmbeddingSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> D2vStatus {
    match e {
        Error::Numeric { .. } => D2vStatus::Numeric,
        Error::Io { .. } | Error::Format { .. } | Error::Json { .. } => D2vStatus::Io,
        Error::Lookup(_) => D2vStatus::NotFound,
        e if e.exit_code() == 2 => D2vStatus::InvalidArgument,
        _ => D2vStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (D2vStatus, String)>) -> D2vStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            D2vStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            D2vStatus::Internal
        }
    }
}

fn lift<T>(r: domain2vec::Result<T>) -> Result<T, (D2vStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (D2vStatus, String) {
    (D2vStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (D2vStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (D2vStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn check_out<T>(out: *mut *mut T) -> Result<(), (D2vStatus, String)> {
    if out.is_null() {
        Err(null("output handle"))
    } else {
        Ok(())
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (D2vStatus, String)> {
    check_out(out)?;
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn d2v_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Renders a corpus into `out_dir`. `config_path` may be null for defaults;
/// `full_scale` selects the full grid instead of the desk grid.
#[no_mangle]
pub unsafe extern "C" fn d2v_generate_corpus(
    config_path: *const c_char,
    full_scale: bool,
    seed: u64,
    out_dir: *const c_char,
    out: *mut *mut D2vManifest,
) -> D2vStatus {
    guard(|| {
        check_out(out)?;
        let dir = path_arg(out_dir, "out_dir")?;
        let cfg = if config_path.is_null() {
            CorpusConfig::default()
        } else {
            lift(CorpusConfig::load(&path_arg(config_path, "config_path")?))?
        };
        let scale = if full_scale { Scale::Full } else { Scale::Desk };
        let m = lift(build_corpus(&cfg, scale, seed, &dir))?;
        put(out, D2vManifest { inner: m })
    })
}

#[no_mangle]
pub unsafe extern "C" fn d2v_manifest_load(path: *const c_char, out: *mut *mut D2vManifest) -> D2vStatus {
    guard(|| {
        check_out(out)?;
        let m = lift(DatasetManifest::load(&path_arg(path, "path")?))?;
        put(out, D2vManifest { inner: m })
    })
}

/// Number of domains, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn d2v_manifest_num_domains(m: *const D2vManifest) -> usize {
    m.as_ref().map_or(0, |m| m.inner.num_domains())
}

#[no_mangle]
pub unsafe extern "C" fn d2v_manifest_free(m: *mut D2vManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

#[no_mangle]
pub unsafe extern "C" fn d2v_model_load(checkpoint: *const c_char, out: *mut *mut D2vModel) -> D2vStatus {
    guard(|| {
        check_out(out)?;
        let ck = lift(Checkpoint::load(&path_arg(checkpoint, "checkpoint")?))?;
        put(out, D2vModel { inner: lift(ck.to_net())? })
    })
}

#[no_mangle]
pub unsafe extern "C" fn d2v_model_free(m: *mut D2vModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Top-1 accuracy on the domain's held-out split.
#[no_mangle]
pub unsafe extern "C" fn d2v_model_evaluate(
    model: *const D2vModel,
    manifest: *const D2vManifest,
    domain_id: u32,
    accuracy: *mut f64,
) -> D2vStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let manifest = manifest.as_ref().ok_or_else(|| null("manifest"))?;
        if accuracy.is_null() {
            return Err(null("accuracy"));
        }
        let data = lift(DomainData::load(&manifest.inner, domain_id))?;
        *accuracy = lift(evaluate_accuracy(&model.inner, &data, &manifest.inner.normalization))?;
        Ok(())
    })
}

/// Embeds every manifest domain with default settings (cosine distance,
/// standardized raw vectors). `include_gram = false` keeps prototypes only.
#[no_mangle]
pub unsafe extern "C" fn d2v_embed(
    model: *const D2vModel,
    manifest: *const D2vManifest,
    include_gram: bool,
    seed: u64,
    out: *mut *mut D2vEmbedding,
) -> D2vStatus {
    guard(|| {
        check_out(out)?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let manifest = manifest.as_ref().ok_or_else(|| null("manifest"))?;
        let m = &manifest.inner;
        let ids: Vec<u32> = (0..m.num_domains() as u32).collect();
        let cfg = EmbeddingConfig {
            include_gram,
            seed,
            ..EmbeddingConfig::default()
        };
        let raw = lift(embed_manifest(&model.inner, m, &ids, cfg.gram_layers))?;
        let labels = lift(ids.iter().map(|&id| Ok(m.domain(id)?.spec.label())).collect())?;
        put(
            out,
            D2vEmbedding {
                inner: lift(EmbeddingSet::build(&raw, labels, &cfg))?,
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn d2v_embedding_load(dir: *const c_char, out: *mut *mut D2vEmbedding) -> D2vStatus {
    guard(|| {
        check_out(out)?;
        let set = lift(EmbeddingSet::load(&path_arg(dir, "dir")?))?;
        put(out, D2vEmbedding { inner: set })
    })
}

/// Number of embedded domains, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn d2v_embedding_count(e: *const D2vEmbedding) -> usize {
    e.as_ref().map_or(0, |e| e.inner.domain_ids.len())
}

#[no_mangle]
pub unsafe extern "C" fn d2v_embedding_distance(e: *const D2vEmbedding, a: u32, b: u32, distance: *mut f64) -> D2vStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("embedding"))?;
        if distance.is_null() {
            return Err(null("distance"));
        }
        *distance = lift(e.inner.distance(a, b))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn d2v_embedding_save(e: *const D2vEmbedding, dir: *const c_char) -> D2vStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("embedding"))?;
        lift(e.inner.save(&path_arg(dir, "dir")?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn d2v_embedding_free(e: *mut D2vEmbedding) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Softmax source weights from `n` distances at temperature `tau`, written to `weights[0..n]`.
#[no_mangle]
pub unsafe extern "C" fn d2v_distance_to_weights(distances: *const f64, n: usize, tau: f64, weights: *mut f64) -> D2vStatus {
    guard(|| {
        if distances.is_null() || weights.is_null() {
            return Err(null("distances or weights"));
        }
        let d = std::slice::from_raw_parts(distances, n);
        let w = lift(distance_to_weights(d, tau))?;
        ptr::copy_nonoverlapping(w.weights.as_ptr(), weights, n);
        Ok(())
    })
}

/// Pearson correlation of `x[0..n]` and `y[0..n]`.
#[no_mangle]
pub unsafe extern "C" fn d2v_pearson(x: *const f64, y: *const f64, n: usize, rho: *mut f64) -> D2vStatus {
    guard(|| {
        if x.is_null() || y.is_null() || rho.is_null() {
            return Err(null("x, y or rho"));
        }
        let r = lift(pearson_cc(std::slice::from_raw_parts(x, n), std::slice::from_raw_parts(y, n)))?;
        *rho = r;
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn d2v_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
