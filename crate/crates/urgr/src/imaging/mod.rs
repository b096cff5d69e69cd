//! Low-level image operations: the degradation filters and their composition,
//! Canny edge extraction, bicubic resizing, and MSE/PSNR quality metrics.
//!
//! All operations are deterministic pure functions of their inputs and safe to
//! call concurrently on shared read-only images.

mod canny;
mod io;
mod metrics;
pub mod resize;

pub use canny::canny_edges;
pub use io::{load_png, save_png};
pub use metrics::{mse, psnr, Psnr, QualityScore};
pub use resize::{bicubic_resize, resize_plan, ResizeTap};

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rank-3 image tensor of shape `(height, width, channels)` with every value
/// finite and in `[0, 1]`.
///
/// Color frames have 3 channels; single-channel images are permitted only as
/// edge maps and intermediate grayscale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Validates the value-range and channel invariants and wraps the tensor.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if data.is_empty() {
            return Err(Error::invalid("image has zero size"));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Image { data })
    }

    /// Wraps a tensor whose values may have drifted outside `[0, 1]` by
    /// clamping them back into range.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image::new(data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Image::new(Array3::from_shape_fn((height, width, channels), |(y, x, c)| {
            f(y, x, c)
        }))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Channels-first copy, the layout the network code works in.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w, c) = self.data.dim();
        Array3::from_shape_fn((c, h, w), |(ck, y, x)| self.data[[y, x, ck]])
    }

    /// Inverse of [`Image::to_chw`], clamping stray values into [0, 1].
    pub fn from_chw(chw: &Array3<f64>) -> Result<Self> {
        let (c, h, w) = chw.dim();
        Image::from_clamped(Array3::from_shape_fn((h, w, c), |(y, x, ck)| {
            chw[[ck, y, x]]
        }))
    }

    /// BT.601 luma; a single-channel image is returned as-is.
    pub fn to_gray(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        if c == 1 {
            return self.data.index_axis(ndarray::Axis(2), 0).to_owned();
        }
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }
}

/// Parameters of the three-stage degradation process.
///
/// Serialized as the JSON object `{smooth_kernel, smooth_sigma, jpeg_quality}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DegradationConfig {
    #[serde(default = "default_kernel")]
    pub smooth_kernel: usize,
    #[serde(default = "default_sigma")]
    pub smooth_sigma: f64,
    #[serde(default = "default_quality")]
    pub jpeg_quality: u8,
}

fn default_kernel() -> usize {
    5
}
fn default_sigma() -> f64 {
    1.0
}
fn default_quality() -> u8 {
    30
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            smooth_kernel: 5,
            smooth_sigma: 1.0,
            jpeg_quality: 30,
        }
    }
}

/// Reflect an out-of-range index back into `[0, len)`, mirroring about the
/// edge samples (the edge sample itself is not duplicated).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolve every channel with a 2-D kernel using reflect padding.
/// The kernel is applied centered; its size must be odd in both dimensions.
pub(crate) fn convolve2d_reflect(data: &ArrayView3<f64>, kernel: &Array2<f64>) -> Array3<f64> {
    let (h, w, c) = data.dim();
    let (kh, kw) = kernel.dim();
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let sy = reflect_index(y as isize + ky as isize - ry, h);
                    for kx in 0..kw {
                        let sx = reflect_index(x as isize + kx as isize - rx, w);
                        acc += kernel[[ky, kx]] * data[[sy, sx, ch]];
                    }
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Discrete Gaussian kernel, normalized to sum 1.
pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let r = size as isize / 2;
    let mut k = Array2::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let dy = (y as isize - r) as f64;
            let dx = (x as isize - r) as f64;
            k[[y, x]] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let sum = k.sum();
    k / sum
}

/// Gaussian smoothing with a normalized `kernel`×`kernel` filter and reflect
/// padding at the borders.
pub fn gaussian_smooth(img: &Image, kernel: usize, sigma: f64) -> Result<Image> {
    if kernel % 2 == 0 || kernel < 3 {
        return Err(Error::invalid(format!(
            "smoothing kernel must be odd and >= 3, got {kernel}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let k = gaussian_kernel(kernel, sigma);
    // A normalized non-negative kernel keeps values inside [0, 1]; clamp only
    // to absorb floating-point residue at the boundaries of the range.
    Image::from_clamped(convolve2d_reflect(&img.data(), &k))
}

/// The pinned 3×3 sharpening kernel (sums to 1).
pub const SHARPEN_KERNEL: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]];

/// Sharpen with the fixed 3×3 kernel, reflect padding, clamped to `[0, 1]`.
pub fn sharpen(img: &Image) -> Image {
    let k = Array2::from_shape_fn((3, 3), |(y, x)| SHARPEN_KERNEL[y][x]);
    Image::from_clamped(convolve2d_reflect(&img.data(), &k))
        .expect("sharpened image is clamped into range")
}

/// Round-trip through a lossy JPEG encode/decode at the given quality.
/// Deterministic for a fixed input and quality.
pub fn jpeg_compress(img: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!(
            "jpeg quality must be in 1..=100, got {quality}"
        )));
    }
    if img.channels() != 3 {
        return Err(Error::invalid("jpeg compression requires a 3-channel image"));
    }
    io::jpeg_roundtrip(img, quality)
}

/// The full degradation: `jpeg_compress(sharpen(gaussian_smooth(img)))`.
pub fn degrade(img: &Image, cfg: &DegradationConfig) -> Result<Image> {
    let smoothed = gaussian_smooth(img, cfg.smooth_kernel, cfg.smooth_sigma)?;
    let sharpened = sharpen(&smoothed);
    jpeg_compress(&sharpened, cfg.jpeg_quality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn pseudo_random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        // Small deterministic LCG; keeps the oracle tests free of RNG crates.
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        Image::from_fn(h, w, c, |_, _, _| {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        let mut a = Array3::zeros((2, 2, 3));
        a[[0, 0, 0]] = 1.5;
        assert!(matches!(Image::new(a), Err(Error::InvalidArgument(_))));
        let mut b = Array3::zeros((2, 2, 3));
        b[[1, 1, 2]] = f64::NAN;
        assert!(Image::new(b).is_err());
        // 2 channels is neither color nor edge map.
        assert!(Image::new(Array3::zeros((2, 2, 2))).is_err());
    }

    #[test]
    fn gaussian_smooth_preserves_constant_images() {
        let img = Image::constant(9, 7, 3, 0.37).unwrap();
        let out = gaussian_smooth(&img, 5, 1.0).unwrap();
        for &v in out.data().iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        assert_eq!((out.height(), out.width(), out.channels()), (9, 7, 3));
    }

    #[test]
    fn gaussian_smooth_impulse_reproduces_kernel() {
        // Oracle: evaluate the discrete Gaussian by hand and compare
        // element-wise against the impulse response.
        let sigma = 1.0;
        let mut raw = [[0.0f64; 5]; 5];
        let mut sum = 0.0;
        for (ky, row) in raw.iter_mut().enumerate() {
            for (kx, v) in row.iter_mut().enumerate() {
                let dy = ky as f64 - 2.0;
                let dx = kx as f64 - 2.0;
                *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                sum += *v;
            }
        }
        for row in raw.iter_mut() {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }

        let img = Image::from_fn(11, 11, 1, |y, x, _| if y == 5 && x == 5 { 1.0 } else { 0.0 })
            .unwrap();
        let out = gaussian_smooth(&img, 5, sigma).unwrap();
        for y in 0..11 {
            for x in 0..11 {
                let expected = if (3..=7).contains(&y) && (3..=7).contains(&x) {
                    raw[y - 3][x - 3]
                } else {
                    0.0
                };
                assert!(
                    (out.data()[[y, x, 0]] - expected).abs() < 1e-10,
                    "mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn gaussian_smooth_rejects_bad_parameters() {
        let img = Image::constant(4, 4, 3, 0.5).unwrap();
        assert!(gaussian_smooth(&img, 4, 1.0).is_err());
        assert!(gaussian_smooth(&img, 5, 0.0).is_err());
        assert!(gaussian_smooth(&img, 5, -1.0).is_err());
    }

    #[test]
    fn gaussian_smooth_preserves_dimensions() {
        let img = pseudo_random_image(480, 640, 3, 7);
        let out = gaussian_smooth(&img, 5, 1.0).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (480, 640, 3));
    }

    #[test]
    fn sharpen_preserves_constants_and_dimensions() {
        let img = Image::constant(6, 8, 3, 0.6).unwrap();
        let out = sharpen(&img);
        for &v in out.data().iter() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        assert_eq!((out.height(), out.width(), out.channels()), (6, 8, 3));
    }

    #[test]
    fn sharpen_impulse_response_matches_hand_convolution() {
        // Interior impulse of 0.1 on a zero background: the pre-clamp center is
        // 5 * 0.1 = 0.5 and the four-neighborhood is -0.1, clamped to 0.
        let img =
            Image::from_fn(7, 7, 1, |y, x, _| if y == 3 && x == 3 { 0.1 } else { 0.0 }).unwrap();
        let out = sharpen(&img);
        assert!((out.data()[[3, 3, 0]] - 0.5).abs() < 1e-10);
        for (y, x) in [(2, 3), (4, 3), (3, 2), (3, 4)] {
            assert_eq!(out.data()[[y, x, 0]], 0.0, "clamped neighbor at ({y},{x})");
        }
        assert_eq!(out.data()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn jpeg_roundtrip_preserves_shape_and_is_deterministic() {
        let img = pseudo_random_image(24, 32, 3, 99);
        let a = jpeg_compress(&img, 30).unwrap();
        let b = jpeg_compress(&img, 30).unwrap();
        assert_eq!((a.height(), a.width(), a.channels()), (24, 32, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn jpeg_quality_ordering() {
        // A smooth natural-ish gradient image; PSNR at q=95 must beat q=10.
        let img = Image::from_fn(32, 32, 3, |y, x, c| {
            let v = 0.5 + 0.4 * ((x as f64 / 6.0).sin() * (y as f64 / 9.0).cos());
            (v + 0.05 * c as f64).clamp(0.0, 1.0)
        })
        .unwrap();
        let hi = jpeg_compress(&img, 95).unwrap();
        let lo = jpeg_compress(&img, 10).unwrap();
        let p_hi = psnr(&hi, &img, 1.0).unwrap();
        let p_lo = psnr(&lo, &img, 1.0).unwrap();
        match (p_hi, p_lo) {
            (Psnr::Db(h), Psnr::Db(l)) => assert!(h > l, "psnr q95 {h} <= q10 {l}"),
            _ => panic!("degenerate psnr in quality ordering test"),
        }
    }

    #[test]
    fn jpeg_rejects_bad_arguments() {
        let img = Image::constant(8, 8, 3, 0.5).unwrap();
        assert!(jpeg_compress(&img, 0).is_err());
        assert!(jpeg_compress(&img, 101).is_err());
        let gray = Image::constant(8, 8, 1, 0.5).unwrap();
        assert!(jpeg_compress(&gray, 50).is_err());
    }

    #[test]
    fn degrade_is_the_literal_composition() {
        let img = pseudo_random_image(20, 28, 3, 5);
        let cfg = DegradationConfig::default();
        let composed = {
            let s = gaussian_smooth(&img, cfg.smooth_kernel, cfg.smooth_sigma).unwrap();
            let sh = sharpen(&s);
            jpeg_compress(&sh, cfg.jpeg_quality).unwrap()
        };
        let direct = degrade(&img, &cfg).unwrap();
        assert_eq!(direct, composed);
        assert_eq!((direct.height(), direct.width()), (20, 28));
    }

    #[test]
    fn degrade_strictly_alters_a_natural_image() {
        let img = Image::from_fn(32, 32, 3, |y, x, c| {
            (0.5 + 0.3 * ((x + 2 * y + 3 * c) as f64 / 7.0).sin()).clamp(0.0, 1.0)
        })
        .unwrap();
        let out = degrade(&img, &DegradationConfig::default()).unwrap();
        match psnr(&out, &img, 1.0).unwrap() {
            Psnr::Db(v) => assert!(v.is_finite()),
            Psnr::Infinite => panic!("degradation left the image untouched"),
        }
    }

    #[test]
    fn reflect_index_handles_edges() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-3, 1), 0);
    }
}
