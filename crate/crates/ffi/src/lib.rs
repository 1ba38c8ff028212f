//! C ABI over `selfctl`.
//!
//! Conventions:
//! * every fallible function returns a [`SelfctlStatus`]; on failure a
//!   human-readable message is available from [`selfctl_last_error`] on the
//!   same thread;
//! * objects are opaque handles created by `*_new` / `*_load` and released by
//!   the matching `*_free` (which accepts NULL);
//! * panics never cross the boundary, they surface as `SELFCTL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use selfctl::marloop::{generate, Conditions, GenerateOptions};
use selfctl::model::Model;
use selfctl::raster::Image;
use selfctl::{AttentionMask, AttentionPolicy, Error, IntraMode, SegmentLayout};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfctlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numerical = 5,
    Internal = 6,
    Panic = 7,
}

/// Attention mode of one segment (or of the cross-segment rule).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfctlMode {
    Causal = 0,
    Bidirectional = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfctlPolicy {
    pub text: SelfctlMode,
    pub imgcond: SelfctlMode,
    pub gen: SelfctlMode,
    pub cross: SelfctlMode,
}

/// Opaque attention mask.
pub struct SelfctlMask {
    inner: AttentionMask,
}

/// Opaque trained model.
pub struct SelfctlModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> SelfctlStatus {
    match err {
        Error::NonFinite(_) => SelfctlStatus::Numerical,
        Error::Checkpoint(_) => SelfctlStatus::Checkpoint,
        Error::Io(_) | Error::Path { .. } | Error::Image(_) => SelfctlStatus::Io,
        Error::InvalidLayout(_)
        | Error::InvalidPolicy(_)
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::Config(_) => SelfctlStatus::InvalidArgument,
        _ => SelfctlStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SelfctlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SelfctlStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("`{what}` is NULL"));
            SelfctlStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_last_error(msg);
            SelfctlStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            SelfctlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn mode_in(m: SelfctlMode) -> IntraMode {
    match m {
        SelfctlMode::Causal => IntraMode::Causal,
        SelfctlMode::Bidirectional => IntraMode::Bidirectional,
    }
}

fn mode_out(m: IntraMode) -> SelfctlMode {
    match m {
        IntraMode::Causal => SelfctlMode::Causal,
        IntraMode::Bidirectional => SelfctlMode::Bidirectional,
    }
}

fn policy_in(p: &SelfctlPolicy) -> AttentionPolicy {
    AttentionPolicy::new(mode_in(p.text), mode_in(p.imgcond), mode_in(p.gen), mode_in(p.cross))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn selfctl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Policy of ablation option `option` (1..=8).
///
/// # Safety
/// `out` must be NULL or point to writable memory for one `SelfctlPolicy`.
#[no_mangle]
pub unsafe extern "C" fn selfctl_policy_for_option(option: u8, out: *mut SelfctlPolicy) -> SelfctlStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let p = selfctl::ablation_policy(option)?;
        out.write(SelfctlPolicy {
            text: mode_out(p.text_mode),
            imgcond: mode_out(p.imgcond_mode),
            gen: mode_out(p.gen_mode),
            cross: mode_out(p.cross_mode),
        });
        Ok(())
    })
}

/// Builds the attention mask of layout `(text_len, cond_len, gen_len)`.
///
/// # Safety
/// `policy` must point to a valid `SelfctlPolicy`; `out` to writable storage
/// for one handle. Release the result with `selfctl_mask_free`.
#[no_mangle]
pub unsafe extern "C" fn selfctl_mask_new(
    text_len: usize,
    cond_len: usize,
    gen_len: usize,
    policy: *const SelfctlPolicy,
    out: *mut *mut SelfctlMask,
) -> SelfctlStatus {
    guard(|| {
        let policy = policy_in(deref(policy, "policy")?);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let layout = SegmentLayout::new(text_len, cond_len, gen_len)?;
        let inner = selfctl::build_attention_mask(&layout, &policy);
        out.write(Box::into_raw(Box::new(SelfctlMask { inner })));
        Ok(())
    })
}

/// Side length `N` of the `N × N` mask; 0 for NULL.
///
/// # Safety
/// `mask` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn selfctl_mask_len(mask: *const SelfctlMask) -> usize {
    mask.as_ref().map_or(0, |m| m.inner.len())
}

/// Copies the mask row-major into `buf` (1 = query may attend to key).
///
/// # Safety
/// `mask` must be a live handle and `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn selfctl_mask_copy(mask: *const SelfctlMask, buf: *mut u8, buf_len: usize) -> SelfctlStatus {
    guard(|| {
        let mask = deref(mask, "mask")?;
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        let cells = mask.inner.as_slice();
        if buf_len < cells.len() {
            return Err(Failure::Invalid(format!("buffer holds {buf_len} bytes, mask needs {}", cells.len())));
        }
        let dst = std::slice::from_raw_parts_mut(buf, cells.len());
        for (d, &c) in dst.iter_mut().zip(cells) {
            *d = c as u8;
        }
        Ok(())
    })
}

/// Depth-`depth` reachability of `mask` as a new mask handle.
///
/// # Safety
/// `mask` must be a live handle; `out` writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn selfctl_mask_reachability(
    mask: *const SelfctlMask,
    depth: usize,
    out: *mut *mut SelfctlMask,
) -> SelfctlStatus {
    guard(|| {
        let mask = deref(mask, "mask")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let inner = selfctl::reachability(&mask.inner, depth)?;
        out.write(Box::into_raw(Box::new(SelfctlMask { inner })));
        Ok(())
    })
}

/// # Safety
/// `mask` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn selfctl_mask_free(mask: *mut SelfctlMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Loads a checkpoint written by `selfctl train`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable storage for
/// one handle. Release the result with `selfctl_model_free`.
#[no_mangle]
pub unsafe extern "C" fn selfctl_model_load(path: *const c_char, out: *mut *mut SelfctlModel) -> SelfctlStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::Invalid("path is not UTF-8".into()))?;
        let (inner, _) = selfctl::checkpoint::load(Path::new(path))?;
        out.write(Box::into_raw(Box::new(SelfctlModel { inner })));
        Ok(())
    })
}

/// Height, width and channels of generated images, and channels of the
/// condition image (0 when the model takes none).
///
/// # Safety
/// `model` must be a live handle; each output pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfctl_model_image_shape(
    model: *const SelfctlModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    cond_channels: *mut usize,
) -> SelfctlStatus {
    guard(|| {
        let spec = &deref(model, "model")?.inner.config().image;
        for (p, v, name) in [
            (height, spec.height, "height"),
            (width, spec.width, "width"),
            (channels, spec.channels, "channels"),
            (cond_channels, spec.cond_channels, "cond_channels"),
        ] {
            if p.is_null() {
                return Err(Failure::Null(name));
            }
            p.write(v);
        }
        Ok(())
    })
}

/// Generates one image into `out` (`height × width × channels` floats in
/// `[0, 1]`, row-major, channels last).
///
/// `text` may be NULL (null text condition). `cond_image` may be NULL (null
/// image condition); otherwise it holds `height × width × cond_channels`
/// floats in `[0, 1]`. The same seed and inputs give identical output.
///
/// # Safety
/// Pointers must be NULL where allowed or valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn selfctl_model_generate(
    model: *const SelfctlModel,
    text: *const c_char,
    cond_image: *const f32,
    steps: usize,
    temperature: f64,
    guidance_scale: f64,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> SelfctlStatus {
    guard(|| {
        let model = &deref(model, "model")?.inner;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let spec = &model.config().image;
        let need = spec.height * spec.width * spec.channels;
        if out_len < need {
            return Err(Failure::Invalid(format!("output holds {out_len} floats, image needs {need}")));
        }
        let text = if text.is_null() {
            None
        } else {
            Some(
                CStr::from_ptr(text)
                    .to_str()
                    .map_err(|_| Failure::Invalid("text is not UTF-8".into()))?,
            )
        };
        let cond = if cond_image.is_null() {
            None
        } else {
            if spec.cond_channels == 0 {
                return Err(Failure::Invalid("model takes no condition image".into()));
            }
            let n = spec.height * spec.width * spec.cond_channels;
            let data = std::slice::from_raw_parts(cond_image, n).to_vec();
            Some(Image::new(spec.height, spec.width, spec.cond_channels, data)?)
        };
        let opts = GenerateOptions {
            steps,
            temperature,
            guidance_scale,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let image = generate(model, &[Conditions::new(text, cond)], &opts, &mut rng)?.remove(0);
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&image.data);
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn selfctl_model_free(model: *mut SelfctlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
