//! C ABI for the urgr library.
//!
//! Conventions: every fallible call returns [`UrgrStatus`] and writes
//! its result through out-pointers; handles are opaque and freed with
//! their matching `_free` function; strings are NUL-terminated UTF-8;
//! pixel buffers are row-major `height x width x channels` doubles in
//! [0, 1]. The most recent failure message on the current thread is
//! available through [`urgr_last_error_message`]. Panics never cross
//! the boundary; they surface as `URGR_STATUS_PANIC`.
//!
//! The build script regenerates `include/urgr.h` from this file.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use urgr::focus::{BBox, FocusConfig, OracleDetector};
use urgr::gvit::{classify, gvit_forward, load_gvit, urgr_infer, GViTConfig, InferResult};
use urgr::hqnet::{hqnet_forward, load_hqnet, HQNetConfig};
use urgr::imaging::{canny_edges, degrade, load_png, mse, psnr, save_png, DegradationConfig, Image, Psnr};
use urgr::nn::ParamTree;
use urgr::Error;

/// Outcome of a C API call. Zero is success; everything else is the
/// failure category, with details via `urgr_last_error_message`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum UrgrStatus {
    Ok = 0,
    InvalidArgument = 1,
    NoUser = 2,
    EmptySet = 3,
    TrainingDiverged = 4,
    Checkpoint = 5,
    Manifest = 6,
    Io = 7,
    Codec = 8,
    Json = 9,
    Internal = 10,
    /// A required pointer argument was NULL.
    NullPointer = 11,
    /// A string argument was not valid UTF-8.
    Utf8 = 12,
    /// The library panicked; state may be inconsistent.
    Panic = 13,
}

/// Owned image handle.
pub struct UrgrImage {
    inner: Image,
}

/// Loaded restoration network: config plus parameters.
pub struct UrgrHqnet {
    cfg: HQNetConfig,
    params: ParamTree,
}

/// Loaded gesture classifier: config plus parameters.
pub struct UrgrGvit {
    cfg: GViTConfig,
    params: ParamTree,
}

/// One classification outcome. When `no_user` is nonzero the
/// remaining fields are zeroed.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct UrgrInference {
    pub no_user: i32,
    /// 1-based gesture class (1 = null gesture, 6 = stop).
    pub class_index: u32,
    /// Softmax probability of the predicted class.
    pub certainty: f64,
    /// Full distribution, indexed by class - 1.
    pub probs: [f64; 6],
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> UrgrStatus {
    match e {
        Error::InvalidArgument(_) => UrgrStatus::InvalidArgument,
        Error::NoUserFound(_) => UrgrStatus::NoUser,
        Error::EmptySet(_) => UrgrStatus::EmptySet,
        Error::TrainingDiverged { .. } => UrgrStatus::TrainingDiverged,
        Error::Checkpoint(_) => UrgrStatus::Checkpoint,
        Error::Manifest { .. } => UrgrStatus::Manifest,
        Error::Io(_) => UrgrStatus::Io,
        Error::Codec(_) => UrgrStatus::Codec,
        Error::Json(_) => UrgrStatus::Json,
        Error::Internal(_) => UrgrStatus::Internal,
    }
}

/// Run a fallible body with panics contained.
fn guarded(f: impl FnOnce() -> Result<(), Error>) -> UrgrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UrgrStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            UrgrStatus::Panic
        }
    }
}

macro_rules! require {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error(concat!("argument ", stringify!($ptr), " is NULL"));
            return UrgrStatus::NullPointer;
        }
    };
}

unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, UrgrStatus> {
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s),
        Err(_) => {
            set_error("string argument is not valid UTF-8");
            Err(UrgrStatus::Utf8)
        }
    }
}

macro_rules! utf8 {
    ($ptr:expr) => {
        match utf8_arg($ptr) {
            Ok(s) => s,
            Err(status) => return status,
        }
    };
}

fn zeroed_inference() -> UrgrInference {
    UrgrInference {
        no_user: 0,
        class_index: 0,
        certainty: 0.0,
        probs: [0.0; 6],
    }
}

fn fill_inference(out: &mut UrgrInference, result: &InferResult) {
    *out = zeroed_inference();
    match result {
        InferResult::NoUser => out.no_user = 1,
        InferResult::Gesture {
            class,
            certainty,
            distribution,
        } => {
            out.class_index = class.index() as u32;
            out.certainty = *certainty;
            out.probs = *distribution.probs();
        }
    }
}

/// Copy the most recent error message on this thread into `buf`
/// (NUL-terminated, truncated to `cap`). Returns the full message
/// length in bytes, excluding the terminator; call with a NULL buffer
/// to size a buffer first.
#[no_mangle]
pub unsafe extern "C" fn urgr_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn urgr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- images ----

/// Decode a PNG file into a new image handle.
#[no_mangle]
pub unsafe extern "C" fn urgr_image_load_png(
    path: *const c_char,
    out: *mut *mut UrgrImage,
) -> UrgrStatus {
    require!(path);
    require!(out);
    let path = utf8!(path);
    guarded(|| {
        let inner = load_png(path)?;
        *out = Box::into_raw(Box::new(UrgrImage { inner }));
        Ok(())
    })
}

/// Encode an image handle as a PNG file.
#[no_mangle]
pub unsafe extern "C" fn urgr_image_save_png(
    img: *const UrgrImage,
    path: *const c_char,
) -> UrgrStatus {
    require!(img);
    require!(path);
    let path = utf8!(path);
    guarded(|| save_png(&(*img).inner, path))
}

/// Build an image from a row-major `height x width x channels` buffer
/// of doubles in [0, 1].
#[no_mangle]
pub unsafe extern "C" fn urgr_image_from_pixels(
    data: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut *mut UrgrImage,
) -> UrgrStatus {
    require!(data);
    require!(out);
    guarded(|| {
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| Error::invalid("image dimensions overflow"))?;
        let slice = std::slice::from_raw_parts(data, n);
        let arr = ndarray::Array3::from_shape_vec((height, width, channels), slice.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let inner = Image::new(arr)?;
        *out = Box::into_raw(Box::new(UrgrImage { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn urgr_image_height(img: *const UrgrImage) -> usize {
    if img.is_null() { 0 } else { (*img).inner.height() }
}

#[no_mangle]
pub unsafe extern "C" fn urgr_image_width(img: *const UrgrImage) -> usize {
    if img.is_null() { 0 } else { (*img).inner.width() }
}

#[no_mangle]
pub unsafe extern "C" fn urgr_image_channels(img: *const UrgrImage) -> usize {
    if img.is_null() { 0 } else { (*img).inner.channels() }
}

/// Copy the image's pixels into `buf`, which must hold exactly
/// `height * width * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn urgr_image_pixels(
    img: *const UrgrImage,
    buf: *mut f64,
    len: usize,
) -> UrgrStatus {
    require!(img);
    require!(buf);
    guarded(|| {
        let data = (*img).inner.data();
        if len != data.len() {
            return Err(Error::invalid(format!(
                "buffer holds {len} values but the image has {}",
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            *buf.add(i) = *v;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn urgr_image_free(img: *mut UrgrImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

// ---- imaging operators ----

/// Apply the smooth, sharpen, JPEG degradation chain.
#[no_mangle]
pub unsafe extern "C" fn urgr_degrade(
    img: *const UrgrImage,
    smooth_kernel: usize,
    smooth_sigma: f64,
    jpeg_quality: u8,
    out: *mut *mut UrgrImage,
) -> UrgrStatus {
    require!(img);
    require!(out);
    guarded(|| {
        let cfg = DegradationConfig {
            smooth_kernel,
            smooth_sigma,
            jpeg_quality,
        };
        let inner = degrade(&(*img).inner, &cfg)?;
        *out = Box::into_raw(Box::new(UrgrImage { inner }));
        Ok(())
    })
}

/// Canny edge map: single-channel image of {0, 1} values.
#[no_mangle]
pub unsafe extern "C" fn urgr_canny(
    img: *const UrgrImage,
    sigma: f64,
    low: f64,
    high: f64,
    out: *mut *mut UrgrImage,
) -> UrgrStatus {
    require!(img);
    require!(out);
    guarded(|| {
        let inner = canny_edges(&(*img).inner, sigma, low, high)?;
        *out = Box::into_raw(Box::new(UrgrImage { inner }));
        Ok(())
    })
}

/// Mean squared error over all pixels and channels.
#[no_mangle]
pub unsafe extern "C" fn urgr_mse(
    a: *const UrgrImage,
    b: *const UrgrImage,
    out: *mut f64,
) -> UrgrStatus {
    require!(a);
    require!(b);
    require!(out);
    guarded(|| {
        *out = mse(&(*a).inner, &(*b).inner)?;
        Ok(())
    })
}

/// Peak signal-to-noise ratio against peak value `peak`. Identical
/// images have no finite ratio: `out_is_infinite` is set to 1 and
/// `out_db` is left untouched.
#[no_mangle]
pub unsafe extern "C" fn urgr_psnr(
    a: *const UrgrImage,
    b: *const UrgrImage,
    peak: f64,
    out_db: *mut f64,
    out_is_infinite: *mut i32,
) -> UrgrStatus {
    require!(a);
    require!(b);
    require!(out_db);
    require!(out_is_infinite);
    guarded(|| {
        match psnr(&(*a).inner, &(*b).inner, peak)? {
            Psnr::Db(v) => {
                *out_db = v;
                *out_is_infinite = 0;
            }
            Psnr::Infinite => *out_is_infinite = 1,
        }
        Ok(())
    })
}

// ---- restoration network ----

/// Load a restoration checkpoint.
#[no_mangle]
pub unsafe extern "C" fn urgr_hqnet_load(
    path: *const c_char,
    out: *mut *mut UrgrHqnet,
) -> UrgrStatus {
    require!(path);
    require!(out);
    let path = utf8!(path);
    guarded(|| {
        let (cfg, params) = load_hqnet(path)?;
        *out = Box::into_raw(Box::new(UrgrHqnet { cfg, params }));
        Ok(())
    })
}

/// Side length of the square input the network expects.
#[no_mangle]
pub unsafe extern "C" fn urgr_hqnet_input_size(net: *const UrgrHqnet) -> usize {
    if net.is_null() { 0 } else { (*net).cfg.input_size }
}

/// Run the restoration network on a crop of its input size.
#[no_mangle]
pub unsafe extern "C" fn urgr_hqnet_enhance(
    net: *const UrgrHqnet,
    img: *const UrgrImage,
    out: *mut *mut UrgrImage,
) -> UrgrStatus {
    require!(net);
    require!(img);
    require!(out);
    guarded(|| {
        let inner = hqnet_forward(&(*img).inner, &(*net).params, &(*net).cfg)?;
        *out = Box::into_raw(Box::new(UrgrImage { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn urgr_hqnet_free(net: *mut UrgrHqnet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

// ---- classifier ----

/// Load a classifier checkpoint.
#[no_mangle]
pub unsafe extern "C" fn urgr_gvit_load(
    path: *const c_char,
    out: *mut *mut UrgrGvit,
) -> UrgrStatus {
    require!(path);
    require!(out);
    let path = utf8!(path);
    guarded(|| {
        let (cfg, params) = load_gvit(path)?;
        *out = Box::into_raw(Box::new(UrgrGvit { cfg, params }));
        Ok(())
    })
}

/// Classify an already-focused crop.
#[no_mangle]
pub unsafe extern "C" fn urgr_gvit_classify(
    net: *const UrgrGvit,
    crop: *const UrgrImage,
    out: *mut UrgrInference,
) -> UrgrStatus {
    require!(net);
    require!(crop);
    require!(out);
    guarded(|| {
        let dist = gvit_forward(&(*crop).inner, &(*net).params, &(*net).cfg, false)?;
        let class = classify(&dist);
        let result = InferResult::Gesture {
            class,
            certainty: dist.prob_of(class),
            distribution: dist,
        };
        fill_inference(&mut *out, &result);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn urgr_gvit_free(net: *mut UrgrGvit) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

// ---- full pipeline ----

/// Detect, focus, optionally enhance, and classify a full frame.
///
/// `bbox` is either NULL (nobody in the frame: the result reports
/// `no_user`) or a 4-element `x0, y0, w, h` ground-truth user box.
/// `hqnet` may be NULL to skip restoration. `target_size` selects the
/// focused crop side; pass 0 for the default (the restoration input
/// size when a network is supplied, otherwise 512).
#[no_mangle]
pub unsafe extern "C" fn urgr_pipeline_infer(
    frame: *const UrgrImage,
    bbox: *const f64,
    hqnet: *const UrgrHqnet,
    gvit: *const UrgrGvit,
    target_size: usize,
    out: *mut UrgrInference,
) -> UrgrStatus {
    require!(frame);
    require!(gvit);
    require!(out);
    guarded(|| {
        let mut detector = if bbox.is_null() {
            OracleDetector::empty()
        } else {
            let b = std::slice::from_raw_parts(bbox, 4);
            OracleDetector::with_bbox(BBox::new(b[0], b[1], b[2], b[3])?)
        };
        let hq = hqnet.as_ref().map(|h| (&h.cfg, &h.params));
        let size = if target_size != 0 {
            target_size
        } else if let Some((hc, _)) = hq {
            hc.input_size
        } else {
            512
        };
        let focus = FocusConfig {
            target_size: size,
            ..FocusConfig::default()
        };
        let gv = &*gvit;
        let result = urgr_infer(&(*frame).inner, &mut detector, hq, (&gv.cfg, &gv.params), &focus)?;
        fill_inference(&mut *out, &result);
        Ok(())
    })
}
