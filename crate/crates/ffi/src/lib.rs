//! C ABI over trained checkpoints.
//!
//! A model handle is created with [`lifespan_model_load`] and released with
//! [`lifespan_model_free`]. Every fallible call returns a
//! [`LifespanStatus`]; on failure [`lifespan_last_error`] describes the most
//! recent error on the calling thread. Images cross the boundary as tightly
//! packed 8-bit RGB rows.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lifespan::checkpoint::load_checkpoint;
use lifespan::imageio::{from_rgb8, to_rgb8};
use lifespan::inference::Generator;
use lifespan::networks::Networks;
use lifespan::params::ParamStore;
use lifespan::Error;

/// Result of an FFI call. Values 2–4 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LifespanStatus {
    Ok = 0,
    /// A required pointer was null or a buffer size did not fit.
    InvalidArgument = 1,
    /// Configuration, schema or argument error (unknown class, age out of range).
    Config = 2,
    /// Missing or malformed input data, including image size mismatches.
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

impl From<&Error> for LifespanStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Checkpoint(_) => LifespanStatus::Checkpoint,
            Error::Io { .. } => LifespanStatus::Io,
            _ => match e.exit_code() {
                2 => LifespanStatus::Config,
                4 => LifespanStatus::Numeric,
                _ => LifespanStatus::Data,
            },
        }
    }
}

/// Opaque model handle.
pub struct LifespanModel {
    nets: Networks,
    generator: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), (LifespanStatus, String)>) -> LifespanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LifespanStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal error (panic)");
            LifespanStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (LifespanStatus, String) {
    ((&e).into(), e.to_string())
}

fn bad_arg(msg: &str) -> (LifespanStatus, String) {
    (LifespanStatus::InvalidArgument, msg.to_string())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lifespan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lifespan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint. `use_ema` selects the averaged generator weights
/// (recommended) over the live ones. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lifespan_model_load(
    path: *const c_char,
    use_ema: bool,
    out: *mut *mut LifespanModel,
) -> LifespanStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(bad_arg("path and out must be non-null"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| bad_arg("path is not valid UTF-8"))?;
        let ckpt = load_checkpoint(Path::new(path)).map_err(lib_err)?;
        let nets = Networks::new(ckpt.network).map_err(lib_err)?;
        let generator = if use_ema { ckpt.ema } else { ckpt.params.generator };
        *out = Box::into_raw(Box::new(LifespanModel { nets, generator }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`lifespan_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lifespan_model_free(model: *mut LifespanModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square image side the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lifespan_model_resolution(model: *const LifespanModel) -> usize {
    model.as_ref().map_or(0, |m| m.nets.config.resolution)
}

/// Number of anchor age classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lifespan_model_num_classes(model: *const LifespanModel) -> usize {
    model.as_ref().map_or(0, |m| m.nets.config.schema.n())
}

/// Lowest and highest year of anchor class `index`.
///
/// # Safety
/// `model` must be a live handle; `low` and `high` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lifespan_model_class_range(
    model: *const LifespanModel,
    index: usize,
    low: *mut u32,
    high: *mut u32,
) -> LifespanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| bad_arg("null model"))?;
        if low.is_null() || high.is_null() {
            return Err(bad_arg("low and high must be non-null"));
        }
        let c = m
            .nets
            .config
            .schema
            .classes()
            .get(index)
            .ok_or_else(|| (LifespanStatus::Config, format!("class index {index} out of range")))?;
        *low = c.low_year;
        *high = c.high_year;
        Ok(())
    })
}

enum Target {
    Class(usize),
    Age(f64),
}

unsafe fn transform(
    model: *const LifespanModel,
    rgb_in: *const u8,
    width: usize,
    height: usize,
    target: Target,
    rgb_out: *mut u8,
) -> LifespanStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| bad_arg("null model"))?;
        if rgb_in.is_null() || rgb_out.is_null() {
            return Err(bad_arg("image buffers must be non-null"));
        }
        let r = m.nets.config.resolution;
        if width != r || height != r {
            return Err((
                LifespanStatus::Data,
                format!("image is {width}×{height}, the model expects {r}×{r}"),
            ));
        }
        let len = width * height * 3;
        let input = std::slice::from_raw_parts(rgb_in, len);
        let x = from_rgb8(width, height, input).map_err(lib_err)?;
        let gen = Generator::new(&m.nets, &m.generator);
        let w = match target {
            Target::Class(i) => gen.class_latent(i),
            Target::Age(a) => gen.age_latent(a),
        }
        .map_err(lib_err)?;
        let id = gen.identity(&x).map_err(lib_err)?;
        let y = gen.decode(&id, &w).map_err(lib_err)?;
        let (_, _, bytes) = to_rgb8(&y).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(rgb_out, len).copy_from_slice(&bytes);
        Ok(())
    })
}

/// Render `rgb_in` at anchor class `target_class`. Both buffers hold
/// `width·height·3` bytes; width and height must equal the model resolution.
///
/// # Safety
/// `model` must be a live handle and both buffers valid for that many bytes.
#[no_mangle]
pub unsafe extern "C" fn lifespan_transform_class_rgb8(
    model: *const LifespanModel,
    rgb_in: *const u8,
    width: usize,
    height: usize,
    target_class: usize,
    rgb_out: *mut u8,
) -> LifespanStatus {
    transform(model, rgb_in, width, height, Target::Class(target_class), rgb_out)
}

/// Render `rgb_in` at an age in years between the first and last anchor,
/// blending the neighbouring anchors' latents.
///
/// # Safety
/// As [`lifespan_transform_class_rgb8`].
#[no_mangle]
pub unsafe extern "C" fn lifespan_transform_age_rgb8(
    model: *const LifespanModel,
    rgb_in: *const u8,
    width: usize,
    height: usize,
    age_years: f64,
    rgb_out: *mut u8,
) -> LifespanStatus {
    transform(model, rgb_in, width, height, Target::Age(age_years), rgb_out)
}
