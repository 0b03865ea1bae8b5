//! C ABI over the dvqa-mini quality network.
//!
//! Every function returns a [`DvqaStatus`]; on failure the message is
//! available from [`dvqa_last_error`] on the same thread. Models are opaque
//! handles created by [`dvqa_model_load`] and released by
//! [`dvqa_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dvqa_mini::eval::{f_test, srocc};
use dvqa_mini::net::checkpoint::Checkpoint;
use dvqa_mini::net::{count_flops, count_params, forward_pair, score_patches, NetworkSpec, ParameterSet};
use dvqa_mini::{Error, Patch};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvqaStatus {
    Ok = 0,
    NullArgument = 1,
    Shape = 2,
    Config = 3,
    Data = 4,
    Structure = 5,
    Numerical = 6,
    Undefined = 7,
    Io = 8,
    Panic = 9,
}

/// Loaded network; only reachable through a pointer.
pub struct DvqaModel {
    spec: NetworkSpec,
    params: ParameterSet<f32>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DvqaFTest {
    pub statistic: f64,
    pub df_a: u64,
    pub df_b: u64,
    pub p_value: f64,
    /// +1 when `a` has the significantly smaller variance, -1 when larger.
    pub verdict: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DvqaStatus {
    match e {
        Error::Shape(_) => DvqaStatus::Shape,
        Error::Config(_) => DvqaStatus::Config,
        Error::Data(_) => DvqaStatus::Data,
        Error::Structure(_) => DvqaStatus::Structure,
        Error::Numerical(_) => DvqaStatus::Numerical,
        Error::Undefined(_) => DvqaStatus::Undefined,
        Error::Io { .. } => DvqaStatus::Io,
    }
}

struct Failure(DvqaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut msg = e.to_string();
        let mut cause = std::error::Error::source(&e);
        while let Some(c) = cause {
            msg = format!("{msg}: {c}");
            cause = c.source();
        }
        Failure(status_of(&e), msg)
    }
}

fn null(name: &str) -> Failure {
    Failure(DvqaStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DvqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DvqaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DvqaStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const DvqaModel) -> Result<&'a DvqaModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dvqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out_model` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dvqa_model_load(path: *const c_char, out_model: *mut *mut DvqaModel) -> DvqaStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(DvqaStatus::Config, "path is not UTF-8".into()))?;
        let ck = Checkpoint::read(path)?;
        *slot = Box::into_raw(Box::new(DvqaModel {
            spec: ck.spec,
            params: ck.params,
        }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`dvqa_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dvqa_model_free(model: *mut DvqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Patch geometry expected by the model, channels-first.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvqa_model_geometry(
    model: *const DvqaModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> DvqaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (c, h, w) = (out(channels, "channels")?, out(height, "height")?, out(width, "width")?);
        *c = m.spec.patch.channels;
        *h = m.spec.patch.height;
        *w = m.spec.patch.width;
        Ok(())
    })
}

/// Parameter count, nonzero parameter count and forward FLOPs per branch.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvqa_model_counts(
    model: *const DvqaModel,
    params: *mut u64,
    nonzero: *mut u64,
    flops: *mut u64,
) -> DvqaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (p, n, f) = (out(params, "params")?, out(nonzero, "nonzero")?, out(flops, "flops")?);
        *f = count_flops(&m.spec)?;
        *p = count_params(&m.params, false);
        *n = count_params(&m.params, true);
        Ok(())
    })
}

fn patches(m: &DvqaModel, data: &[f32], count: usize) -> Result<Vec<Patch>, Failure> {
    let len = m.spec.patch.len();
    data.chunks_exact(len)
        .take(count)
        .map(|c| Patch::new(m.spec.patch, c.to_vec()).map_err(Failure::from))
        .collect()
}

/// Scores `count` reference/distorted patch pairs. Each buffer holds
/// `count * C * H * W` floats in `[N,C,H,W]` order; `scores` receives
/// `count` values.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dvqa_model_score(
    model: *const DvqaModel,
    reference: *const f32,
    distorted: *const f32,
    count: usize,
    scores: *mut f64,
) -> DvqaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if count == 0 {
            return Ok(());
        }
        let n = count
            .checked_mul(m.spec.patch.len())
            .ok_or_else(|| Failure(DvqaStatus::Shape, "patch count overflows".into()))?;
        let r = patches(m, slice(reference, n, "reference")?, count)?;
        let d = patches(m, slice(distorted, n, "distorted")?, count)?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        let out = std::slice::from_raw_parts_mut(scores, count);
        let s = score_patches(&m.spec, &m.params, &r.iter().collect::<Vec<_>>(), &d.iter().collect::<Vec<_>>())?;
        out.copy_from_slice(&s);
        Ok(())
    })
}

/// Probability that pair one (`r1`, `d1`) has the higher quality than pair
/// two. Each buffer holds one `C * H * W` patch.
///
/// # Safety
/// Buffers must be valid for one patch each.
#[no_mangle]
pub unsafe extern "C" fn dvqa_model_prefer(
    model: *const DvqaModel,
    r1: *const f32,
    d1: *const f32,
    r2: *const f32,
    d2: *const f32,
    probability: *mut f64,
) -> DvqaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let n = m.spec.patch.len();
        let mut ps = Vec::with_capacity(4);
        for (p, name) in [(r1, "r1"), (d1, "d1"), (r2, "r2"), (d2, "d2")] {
            ps.extend(patches(m, slice(p, n, name)?, 1)?);
        }
        let o = out(probability, "probability")?;
        *o = forward_pair(&m.spec, &m.params, &ps[0], &ps[1], &ps[2], &ps[3])?.p;
        Ok(())
    })
}

/// Spearman rank-order correlation of two length-`n` arrays.
///
/// # Safety
/// `a` and `b` must hold `n` values; `result` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvqa_srocc(a: *const f64, b: *const f64, n: usize, result: *mut f64) -> DvqaStatus {
    guard(|| {
        let v = srocc(slice(a, n, "a")?, slice(b, n, "b")?)?;
        *out(result, "result")? = v;
        Ok(())
    })
}

/// Two-sided variance-ratio F-test of residual arrays `a` and `b`.
///
/// # Safety
/// `a` and `b` must hold `na` and `nb` values; `result` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dvqa_f_test(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    confidence: f64,
    result: *mut DvqaFTest,
) -> DvqaStatus {
    guard(|| {
        let t = f_test(slice(a, na, "a")?, slice(b, nb, "b")?, confidence)?;
        *out(result, "result")? = DvqaFTest {
            statistic: t.statistic,
            df_a: t.df_a as u64,
            df_b: t.df_b as u64,
            p_value: t.p_value,
            verdict: t.verdict.into(),
        };
        Ok(())
    })
}
