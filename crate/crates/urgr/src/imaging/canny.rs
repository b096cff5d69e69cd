//! Canny edge extraction: grayscale, Gaussian blur, Sobel gradients,
//! non-maximum suppression, double-threshold hysteresis.

use ndarray::{Array2, Array3};

use super::{gaussian_smooth, Image};
use crate::error::{Error, Result};

fn sobel(gray: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = gray.dim();
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    let at = |y: isize, x: isize| -> f64 {
        let yy = super::reflect_index(y, h);
        let xx = super::reflect_index(x, w);
        gray[[yy, xx]]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let tl = at(y - 1, x - 1);
            let tc = at(y - 1, x);
            let tr = at(y - 1, x + 1);
            let ml = at(y, x - 1);
            let mr = at(y, x + 1);
            let bl = at(y + 1, x - 1);
            let bc = at(y + 1, x);
            let br = at(y + 1, x + 1);
            gx[[y as usize, x as usize]] = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
            gy[[y as usize, x as usize]] = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
        }
    }
    (gx, gy)
}

/// Binary edge map: values in {0, 1}, same spatial dimensions, one channel.
///
/// Thresholds are absolute on the Sobel gradient magnitude of the blurred
/// `[0, 1]` image. Border pixels never survive non-maximum suppression.
pub fn canny_edges(img: &Image, sigma: f64, low: f64, high: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low >= high {
        return Err(Error::invalid(format!(
            "canny thresholds must satisfy 0 <= low < high <= 1, got ({low}, {high})"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("canny sigma must be positive, got {sigma}")));
    }
    let (h, w) = (img.height(), img.width());

    // Blur the grayscale image with a kernel wide enough to hold the Gaussian.
    let gray = Image::new(
        img.to_gray()
            .into_shape_with_order((h, w, 1))
            .map_err(|e| Error::Internal(e.to_string()))?,
    )?;
    let kernel = 2 * (3.0 * sigma).ceil() as usize + 1;
    let blurred = gaussian_smooth(&gray, kernel.max(3), sigma)?.to_gray();

    let (gx, gy) = sobel(&blurred);
    let mag = Array2::from_shape_fn((h, w), |(y, x)| gx[[y, x]].hypot(gy[[y, x]]));

    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = Array2::zeros((h, w));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let m = mag[[y, x]];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[[y, x]].atan2(gx[[y, x]]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                (mag[[y, x - 1]], mag[[y, x + 1]])
            } else if angle < 67.5 {
                (mag[[y - 1, x + 1]], mag[[y + 1, x - 1]])
            } else if angle < 112.5 {
                (mag[[y - 1, x]], mag[[y + 1, x]])
            } else {
                (mag[[y - 1, x - 1]], mag[[y + 1, x + 1]])
            };
            if m >= n1 && m >= n2 {
                thin[[y, x]] = m;
            }
        }
    }

    // Hysteresis: start from strong pixels, flood through weak 8-neighbors.
    let mut out = Array2::<f64>::zeros((h, w));
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin[[y, x]] >= high && out[[y, x]] == 0.0 {
                out[[y, x]] = 1.0;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if out[[ny, nx]] == 0.0 && thin[[ny, nx]] >= low {
                                out[[ny, nx]] = 1.0;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
    }

    Image::new(
        Array3::from_shape_fn((h, w, 1), |(y, x, _)| out[[y, x]]),
    )
}
