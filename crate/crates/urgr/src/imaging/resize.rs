//! Bicubic resampling with the Catmull-Rom kernel (a = -0.5).
//!
//! The resampling is separable; each axis is described by a precomputed tap
//! plan so the same weights serve both the plain image operation here and the
//! differentiable resize inside the network code.

use ndarray::Array3;

use super::Image;
use crate::error::{Error, Result};

/// One output sample along an axis: four source indices with their weights.
/// Source indices are clamped at the borders, so duplicates can occur.
#[derive(Debug, Clone, Copy)]
pub struct ResizeTap {
    pub src: [usize; 4],
    pub weight: [f64; 4],
}

fn cubic_kernel(x: f64) -> f64 {
    // Keys cubic convolution kernel with a = -0.5 (Catmull-Rom).
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Tap plan for resampling a length-`in_len` axis to `out_len`, using
/// pixel-center alignment.
pub fn resize_plan(in_len: usize, out_len: usize) -> Vec<ResizeTap> {
    let scale = in_len as f64 / out_len as f64;
    let clamp = |i: isize| -> usize { i.clamp(0, in_len as isize - 1) as usize };
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as isize;
            let frac = center - base as f64;
            let mut src = [0usize; 4];
            let mut weight = [0.0f64; 4];
            let mut sum = 0.0;
            for (t, (s, w)) in src.iter_mut().zip(weight.iter_mut()).enumerate() {
                let offset = t as isize - 1;
                *s = clamp(base + offset);
                *w = cubic_kernel(frac - offset as f64);
                sum += *w;
            }
            // The Keys kernel sums to 1 on the integer grid; renormalize anyway
            // to absorb floating-point residue.
            for w in weight.iter_mut() {
                *w /= sum;
            }
            ResizeTap { src, weight }
        })
        .collect()
}

/// Apply a tap plan along both axes of an `(h, w, c)` tensor.
pub(crate) fn apply_resize(
    data: &ndarray::ArrayView3<f64>,
    rows: &[ResizeTap],
    cols: &[ResizeTap],
) -> Array3<f64> {
    let (_, w, c) = data.dim();
    let (oh, ow) = (rows.len(), cols.len());
    // Rows first, then columns.
    let mut mid = Array3::zeros((oh, w, c));
    for (oy, tap) in rows.iter().enumerate() {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += tap.weight[t] * data[[tap.src[t], x, ch]];
                }
                mid[[oy, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((oh, ow, c));
    for y in 0..oh {
        for (ox, tap) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += tap.weight[t] * mid[[y, tap.src[t], ch]];
                }
                out[[y, ox, ch]] = acc;
            }
        }
    }
    out
}

/// Bicubic resize to `out_h`×`out_w`, clamped back into `[0, 1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target dimensions must be positive"));
    }
    let rows = resize_plan(img.height(), out_h);
    let cols = resize_plan(img.width(), out_w);
    Image::from_clamped(apply_resize(&img.data(), &rows, &cols))
}
