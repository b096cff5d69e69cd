//! User localisation: find the person in a frame, pad the box by the
//! diagonal rule, and cut out a square model input.
//!
//! The detector itself is pluggable. [`OracleDetector`] replays a known
//! box (tests, manifests with ground truth), [`ExternalDetector`] shells
//! out to any pretrained person detector via a JSON contract.

use std::path::PathBuf;
use std::process::Command;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, save_png, Image};

/// Axis-aligned box in pixel coordinates, top-left origin.
///
/// Coordinates are real-valued so that padding by half a pixel survives a
/// round trip; consumers round at the moment they index the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, w: f64, h: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::invalid("bounding box coordinates must be finite"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!(
                "bounding box must have positive size, got {w}x{h}"
            )));
        }
        Ok(BBox { x0, y0, w, h })
    }

    /// Diagonal length, the `b` of the b/a extension rule.
    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0)
    }

    /// True when any part of the box overlaps a frame of the given size.
    pub fn intersects_frame(&self, frame_h: usize, frame_w: usize) -> bool {
        self.x0 < frame_w as f64 && self.y0 < frame_h as f64 && self.x0 + self.w > 0.0 && self.y0 + self.h > 0.0
    }
}

// Boxes travel as [x0, y0, w, h] in manifests and in the external
// detector contract; serialize them in that shape rather than as a map.
impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x0, self.y0, self.w, self.h].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [x0, y0, w, h] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x0, y0, w, h).map_err(D::Error::custom)
    }
}

/// How the focus stage frames the user.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FocusConfig {
    /// User-to-image ratio; the box grows by diagonal/a in each dimension.
    pub a: f64,
    /// Side length of the square crop handed to the models.
    pub target_size: usize,
    /// Fill out-of-frame area by replicating the border instead of with
    /// zeros.
    pub replicate_edges: bool,
}

impl Default for FocusConfig {
    fn default() -> Self {
        FocusConfig {
            a: 10.0,
            target_size: 512,
            replicate_edges: false,
        }
    }
}

impl FocusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::invalid(format!(
                "user-to-image ratio must be positive, got {}",
                self.a
            )));
        }
        if self.target_size < 32 {
            return Err(Error::invalid(format!(
                "focus target size must be at least 32, got {}",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// One person found in a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Detector confidence in [0, 1].
    pub confidence: f64,
}

/// Source of person detections.
///
/// Takes `&mut self` because adapter implementations may hold a process
/// handle; calls must be serialized, implementations are not reentrant.
pub trait Detector {
    fn detect(&mut self, img: &Image) -> Result<Vec<Detection>>;
}

/// Replays a known ground-truth box, or reports nobody present.
///
/// This is the detector used throughout the test suite: it keeps every
/// pipeline test independent of any neural detector.
#[derive(Debug, Clone, Default)]
pub struct OracleDetector {
    pub bbox: Option<BBox>,
}

impl OracleDetector {
    pub fn with_bbox(bbox: BBox) -> Self {
        OracleDetector { bbox: Some(bbox) }
    }

    pub fn empty() -> Self {
        OracleDetector { bbox: None }
    }
}

impl Detector for OracleDetector {
    fn detect(&mut self, _img: &Image) -> Result<Vec<Detection>> {
        Ok(self
            .bbox
            .iter()
            .map(|&bbox| Detection { bbox, confidence: 1.0 })
            .collect())
    }
}

#[derive(Debug, Deserialize)]
struct ExternalDetection {
    bbox: BBox,
    conf: f64,
    class: String,
}

/// Runs a configured executable on a temp PNG of the frame and reads
/// detections back from its stdout as JSON:
/// `[{"bbox":[x0,y0,w,h],"conf":0.9,"class":"person"}, ...]`.
/// Non-person classes are dropped.
#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalDetector {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ExternalDetector {
            program: program.into(),
            args: Vec::new(),
        }
    }
}

impl Detector for ExternalDetector {
    fn detect(&mut self, img: &Image) -> Result<Vec<Detection>> {
        let file = tempfile::Builder::new()
            .prefix("urgr-frame-")
            .suffix(".png")
            .tempfile()?;
        save_png(img, file.path())?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| {
                Error::Internal(format!(
                    "failed to launch detector {}: {e}",
                    self.program.display()
                ))
            })?;
        if !output.status.success() {
            return Err(Error::Internal(format!(
                "detector {} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let raw: Vec<ExternalDetection> = serde_json::from_slice(&output.stdout)?;
        raw.into_iter()
            .filter(|d| d.class == "person")
            .map(|d| {
                if !(0.0..=1.0).contains(&d.conf) {
                    return Err(Error::invalid(format!(
                        "detector confidence {} outside [0, 1]",
                        d.conf
                    )));
                }
                Ok(Detection {
                    bbox: d.bbox,
                    confidence: d.conf,
                })
            })
            .collect()
    }
}

/// Highest-confidence person in the frame.
///
/// Detections that miss the frame entirely are discarded; an empty
/// result is a not-found error, distinct from invalid input.
pub fn detect_user(detector: &mut dyn Detector, img: &Image) -> Result<Detection> {
    let detections = detector.detect(img)?;
    detections
        .into_iter()
        .filter(|d| d.bbox.intersects_frame(img.height(), img.width()))
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence))
        .ok_or_else(|| Error::NoUserFound("no person detected in frame".into()))
}

/// Grow a box by its diagonal over `a`, split evenly on each side.
///
/// The result is (w + b/a) x (h + b/a) with the same center, where b is
/// the diagonal of the input box. It may extend past the frame; cropping
/// fills the out-of-frame part later.
pub fn extend_bbox(bbox: &BBox, a: f64, _frame_h: usize, _frame_w: usize) -> Result<BBox> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::invalid(format!(
            "user-to-image ratio must be positive, got {a}"
        )));
    }
    let pad = bbox.diagonal() / a;
    BBox::new(
        bbox.x0 - pad / 2.0,
        bbox.y0 - pad / 2.0,
        bbox.w + pad,
        bbox.h + pad,
    )
}

/// How pixels outside the frame are synthesised during cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillMode {
    Zero,
    Replicate,
}

/// Cut the box out of the frame (zero-filling whatever falls outside)
/// and resize the crop to a `target` x `target` square.
pub fn crop_and_resize(img: &Image, bbox: &BBox, target: usize) -> Result<Image> {
    crop_and_resize_filled(img, bbox, target, FillMode::Zero)
}

pub fn crop_and_resize_filled(
    img: &Image,
    bbox: &BBox,
    target: usize,
    fill: FillMode,
) -> Result<Image> {
    if !bbox.intersects_frame(img.height(), img.width()) {
        return Err(Error::invalid(format!(
            "bounding box at ({}, {}) size {}x{} lies entirely outside the {}x{} frame",
            bbox.x0,
            bbox.y0,
            bbox.w,
            bbox.h,
            img.width(),
            img.height()
        )));
    }
    let (h, w, c) = (img.height() as isize, img.width() as isize, img.channels());
    let iy0 = bbox.y0.round() as isize;
    let ix0 = bbox.x0.round() as isize;
    let ch = (bbox.h.round() as usize).max(1);
    let cw = (bbox.w.round() as usize).max(1);
    let data = img.data();
    let crop = Image::from_fn(ch, cw, c, |r, col, ck| {
        let (mut sy, mut sx) = (iy0 + r as isize, ix0 + col as isize);
        if fill == FillMode::Replicate {
            sy = sy.clamp(0, h - 1);
            sx = sx.clamp(0, w - 1);
        }
        if sy < 0 || sy >= h || sx < 0 || sx >= w {
            0.0
        } else {
            data[[sy as usize, sx as usize, ck]]
        }
    })?;
    bicubic_resize(&crop, target, target)
}

/// Full focus stage: detect, pad by the diagonal rule, crop and resize.
///
/// The output is always `cfg.target_size` square regardless of how far
/// away the user stands; distance only changes how much the crop is
/// magnified.
pub fn focus_pipeline(img: &Image, detector: &mut dyn Detector, cfg: &FocusConfig) -> Result<Image> {
    cfg.validate()?;
    let detection = detect_user(detector, img)?;
    let extended = extend_bbox(&detection.bbox, cfg.a, img.height(), img.width())?;
    let fill = if cfg.replicate_edges {
        FillMode::Replicate
    } else {
        FillMode::Zero
    };
    crop_and_resize_filled(img, &extended, cfg.target_size, fill)
}
