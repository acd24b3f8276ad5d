//! C ABI over the condattack toolkit.
//!
//! Models are exposed as opaque handles created by `*_load` and released by `*_free`.
//! Every fallible call returns a [`CaStatus`]; the message of the most recent failure on the
//! calling thread is available through [`ca_last_error`]. Image buffers are `f32`, row-major
//! `[n, c, h, w]`, values in `[0, 1]`.
//!
//! The matching declarations live in `include/condattack.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use condattack::attacks::{run_iterative_attack_chunked, IterAttackConfig, Method};
use condattack::generator::{Generator, Phase};
use condattack::partition::{hierarchical_partition, Bandwidth, ClassSpace};
use condattack::zoo::Classifier;
use condattack::{Error, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidParameter = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    State = 7,
    Config = 8,
    Training = 9,
    Panic = 10,
}

/// Opaque generator handle.
pub struct CaGenerator(Generator<f32>);

/// Opaque classifier handle.
pub struct CaClassifier(Classifier);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CaStatus {
    match e {
        Error::Input(_) => CaStatus::InvalidInput,
        Error::Parameter(_) | Error::Spectral(_) => CaStatus::InvalidParameter,
        Error::Numeric(_) => CaStatus::Numeric,
        Error::State(_) => CaStatus::State,
        Error::Training { .. } => CaStatus::Training,
        Error::Checkpoint(_) | Error::Json(_) => CaStatus::Checkpoint,
        Error::Config(_) => CaStatus::Config,
        Error::Io { .. } | Error::Csv(_) => CaStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), CaStatus>) -> CaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CaStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CaStatus::Panic
        }
    }
}

fn lift<T>(r: condattack::Result<T>) -> Result<T, CaStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null() -> CaStatus {
    set_error("null pointer argument".into());
    CaStatus::NullPointer
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, CaStatus> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| {
        set_error("path is not valid UTF-8".into());
        CaStatus::InvalidInput
    })
}

unsafe fn images_arg(data: *const f32, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor<f32>, CaStatus> {
    if data.is_null() {
        return Err(null());
    }
    let len = n * c * h * w;
    let v = std::slice::from_raw_parts(data, len).to_vec();
    lift(Tensor::from_vec(&[n, c, h, w], v))
}

unsafe fn targets_arg(targets: *const u32, n: usize) -> Result<Vec<usize>, CaStatus> {
    if targets.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(targets, n)
        .iter()
        .map(|&t| t as usize)
        .collect())
}

unsafe fn write_out(dst: *mut f32, src: &Tensor<f32>) {
    std::ptr::copy_nonoverlapping(src.data().as_ptr(), dst, src.len());
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ca_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a generator checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_generator_load(path: *const c_char, out: *mut *mut CaGenerator) -> CaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let g = lift(Generator::load(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(CaGenerator(g)));
        Ok(())
    })
}

/// Releases a generator handle; null is ignored.
///
/// # Safety
/// `handle` must come from [`ca_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_generator_free(handle: *mut CaGenerator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Perturbation budget of the generator.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ca_generator_epsilon(handle: *const CaGenerator, out: *mut f64) -> CaStatus {
    guard(|| {
        if handle.is_null() || out.is_null() {
            return Err(null());
        }
        *out = (*handle).0.config.epsilon;
        Ok(())
    })
}

/// Number of class ids the generator accepts.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ca_generator_num_classes(handle: *const CaGenerator, out: *mut usize) -> CaStatus {
    guard(|| {
        if handle.is_null() || out.is_null() {
            return Err(null());
        }
        *out = (*handle).0.config.num_classes;
        Ok(())
    })
}

/// Generates targeted adversarial images. `targets` holds `n` class ids. `out_adv` receives
/// `n*c*h*w` values; `out_delta` (nullable) receives the perturbations.
///
/// # Safety
/// All buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ca_generator_generate(
    handle: *const CaGenerator,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    targets: *const u32,
    out_adv: *mut f32,
    out_delta: *mut f32,
) -> CaStatus {
    guard(|| {
        if handle.is_null() || out_adv.is_null() {
            return Err(null());
        }
        let x = images_arg(images, n, c, h, w)?;
        let t = targets_arg(targets, n)?;
        let out = lift((*handle).0.generate(&x, &t, Phase::Eval))?;
        write_out(out_adv, &out.adversarial);
        if !out_delta.is_null() {
            write_out(out_delta, &out.delta.values);
        }
        Ok(())
    })
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_classifier_load(path: *const c_char, out: *mut *mut CaClassifier) -> CaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let m = lift(Classifier::load(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(CaClassifier(m)));
        Ok(())
    })
}

/// Releases a classifier handle; null is ignored.
///
/// # Safety
/// `handle` must come from [`ca_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ca_classifier_free(handle: *mut CaClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of output classes.
///
/// # Safety
/// `handle` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ca_classifier_num_classes(handle: *const CaClassifier, out: *mut usize) -> CaStatus {
    guard(|| {
        if handle.is_null() || out.is_null() {
            return Err(null());
        }
        *out = (*handle).0.num_classes();
        Ok(())
    })
}

/// Predicts labels (`n` entries) and, if `out_probs` is non-null, softmax rows (`n*K`).
///
/// # Safety
/// All buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ca_classifier_predict(
    handle: *const CaClassifier,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_labels: *mut u32,
    out_probs: *mut f32,
) -> CaStatus {
    guard(|| {
        if handle.is_null() || out_labels.is_null() {
            return Err(null());
        }
        let x = images_arg(images, n, c, h, w)?;
        let p = lift((*handle).0.predict(&x))?;
        for (i, &l) in p.labels.iter().enumerate() {
            *out_labels.add(i) = l as u32;
        }
        if !out_probs.is_null() {
            write_out(out_probs, &p.probabilities);
        }
        Ok(())
    })
}

/// Runs an iterative baseline (`"bim"`, `"mim"`, `"dim"`, `"ti-dim"`, `"si-dim"`, `"logit"`)
/// against the classifier. `steps = 0` selects the method's default.
///
/// # Safety
/// `method` must be NUL-terminated; all buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ca_attack(
    handle: *const CaClassifier,
    method: *const c_char,
    epsilon: f64,
    steps: usize,
    seed: u64,
    images: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    targets: *const u32,
    out_adv: *mut f32,
) -> CaStatus {
    guard(|| {
        if handle.is_null() || method.is_null() || out_adv.is_null() {
            return Err(null());
        }
        let name = CStr::from_ptr(method).to_str().map_err(|_| {
            set_error("method name is not valid UTF-8".into());
            CaStatus::InvalidInput
        })?;
        let m: Method = lift(name.parse())?;
        let cfg = IterAttackConfig::preset(m, epsilon, (steps > 0).then_some(steps), seed);
        lift(cfg.validate())?;
        let x = images_arg(images, n, c, h, w)?;
        let t = targets_arg(targets, n)?;
        let adv = lift(run_iterative_attack_chunked(&x, &t, &(*handle).0.net, &cfg, 64))?;
        write_out(out_adv, &adv);
        Ok(())
    })
}

/// Partitions `num_classes` classes, given as columns of a row-major `[dim, num_classes]`
/// weight matrix, into subsets of size `k`. `bandwidth <= 0` selects the median heuristic.
/// `out_subset[i]` receives the subset index of class `i`.
///
/// # Safety
/// `weights` must hold `dim*num_classes` values and `out_subset` `num_classes` entries.
#[no_mangle]
pub unsafe extern "C" fn ca_partition(
    weights: *const f64,
    dim: usize,
    num_classes: usize,
    k: usize,
    seed: u64,
    bandwidth: f64,
    out_subset: *mut u32,
) -> CaStatus {
    guard(|| {
        if weights.is_null() || out_subset.is_null() {
            return Err(null());
        }
        let w = std::slice::from_raw_parts(weights, dim * num_classes);
        let cols: Vec<Vec<f64>> = (0..num_classes)
            .map(|c| (0..dim).map(|r| w[r * num_classes + c]).collect())
            .collect();
        let space = lift(ClassSpace::from_columns(&cols))?;
        let bw = if bandwidth > 0.0 {
            Bandwidth::Fixed(bandwidth)
        } else {
            Bandwidth::Auto
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, _) = lift(hierarchical_partition(&space, k, bw, &mut rng))?;
        for (s, subset) in p.subsets.iter().enumerate() {
            for &id in subset {
                *out_subset.add(id) = s as u32;
            }
        }
        Ok(())
    })
}
