//! Synthetic gesture corpus: stick figures on cluttered backgrounds
//! with a distance-controlled degradation model. Figure pixel height
//! is k/d, blur and noise grow linearly with d, so far samples are
//! small, soft and grainy exactly as a long-range camera would see
//! them.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::BBox;
use crate::gvit::GestureClass;
use crate::imaging::{convolve2d_reflect, save_png, Image};

use super::{DatasetManifest, Sample};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Figure height constant: a figure at distance d stands k/d
    /// pixels tall.
    pub k: f64,
    /// Gaussian blur sigma per meter of distance.
    pub blur_per_m: f64,
    /// Additive noise standard deviation per meter of distance.
    pub noise_per_m: f64,
    /// Number of background clutter shapes per frame.
    pub clutter: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 600,
            seed: 0,
            height: 480,
            width: 640,
            d_min: 2.0,
            d_max: 25.0,
            k: 2400.0,
            blur_per_m: 0.08,
            noise_per_m: 0.004,
            clutter: 25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        if self.height < 64 || self.width < 64 {
            return Err(Error::invalid("frames below 64x64 are not supported"));
        }
        if !(self.d_min > 0.0 && self.d_min <= self.d_max && self.d_max <= 25.0) {
            return Err(Error::invalid(format!(
                "need 0 < d_min <= d_max <= 25, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.k / self.d_max < 12.0 {
            return Err(Error::invalid(format!(
                "figures degenerate: k/d_max = {:.1} px is below the 12 px floor",
                self.k / self.d_max
            )));
        }
        if self.blur_per_m < 0.0 || self.noise_per_m < 0.0 {
            return Err(Error::invalid("blur and noise coefficients must be non-negative"));
        }
        Ok(())
    }
}

/// Painting surface with clipped primitives; everything lands in the
/// frame no matter where the figure stands.
struct Canvas {
    data: Array3<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, base: [f64; 3]) -> Self {
        Canvas {
            data: Array3::from_shape_fn((h, w, 3), |(_, _, c)| base[c]),
        }
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.0, d.1)
    }

    fn put(&mut self, y: isize, x: isize, color: [f64; 3]) {
        let (h, w) = self.dims();
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            for c in 0..3 {
                self.data[[y as usize, x as usize, c]] = color[c];
            }
        }
    }

    fn rect(&mut self, y0: f64, x0: f64, rh: f64, rw: f64, color: [f64; 3]) {
        for y in y0.floor() as isize..(y0 + rh).ceil() as isize {
            for x in x0.floor() as isize..(x0 + rw).ceil() as isize {
                self.put(y, x, color);
            }
        }
    }

    fn disc(&mut self, cy: f64, cx: f64, r: f64, color: [f64; 3]) {
        for y in (cy - r).floor() as isize..=(cy + r).ceil() as isize {
            for x in (cx - r).floor() as isize..=(cx + r).ceil() as isize {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r * r {
                    self.put(y, x, color);
                }
            }
        }
    }

    /// Thick line segment, drawn as every pixel within `t/2` of the
    /// center line.
    fn segment(&mut self, y0: f64, x0: f64, y1: f64, x1: f64, t: f64, color: [f64; 3]) {
        let r = t / 2.0;
        let (lo_y, hi_y) = (y0.min(y1) - r, y0.max(y1) + r);
        let (lo_x, hi_x) = (x0.min(x1) - r, x0.max(x1) + r);
        let vy = y1 - y0;
        let vx = x1 - x0;
        let len2 = (vy * vy + vx * vx).max(1e-12);
        for y in lo_y.floor() as isize..=hi_y.ceil() as isize {
            for x in lo_x.floor() as isize..=hi_x.ceil() as isize {
                let py = y as f64 + 0.5 - y0;
                let px = x as f64 + 0.5 - x0;
                let s = ((py * vy + px * vx) / len2).clamp(0.0, 1.0);
                let dy = py - s * vy;
                let dx = px - s * vx;
                if dy * dy + dx * dx <= r * r {
                    self.put(y, x, color);
                }
            }
        }
    }
}

const TORSO: [f64; 3] = [0.13, 0.2, 0.55];
const HEAD: [f64; 3] = [0.85, 0.68, 0.54];
const ARM: [f64; 3] = [0.1, 0.1, 0.12];
const MARKER: [f64; 3] = [0.9, 0.15, 0.1];
const PALM: [f64; 3] = [0.92, 0.8, 0.25];

/// Draw one figure whose ink is contained in the box `(fy, fx)` to
/// `(fy + fh, fx + figure_width(fh))`, gesturing with the arm on
/// `side` (-1 left, +1 right).
///
/// Proportions are fixed fractions of the figure height, so the whole
/// figure scales as a unit with distance, and every gesture stays
/// inside the recorded person box so the focused crop never cuts it
/// off. The gesturing arm encodes the class; the red thumb marker
/// (high vs low) and yellow palm bar keep the raised-arm gestures
/// apart even when the figure is a dozen pixels tall.
fn draw_figure(c: &mut Canvas, class: GestureClass, fy: f64, fx: f64, fh: f64, side: f64) {
    let fw = figure_width(fh);
    let cx = fx + fw / 2.0;
    let y = |f: f64| fy + f * fh;
    let x = |f: f64| cx + side * f * fh;
    let head_r = 0.11 * fh;
    let torso_w = 0.17 * fh;
    let arm_t = (0.085 * fh).max(1.0);
    let shoulder_y = y(0.26);
    let shoulder_x = x(0.085);
    let other_x = x(-0.085);
    c.disc(y(0.11), cx, head_r, HEAD);
    c.rect(y(0.22), cx - torso_w / 2.0, 0.40 * fh, torso_w, TORSO);
    for leg in [-1.0, 1.0] {
        c.segment(
            y(0.60),
            cx + leg * 0.05 * fh,
            y(0.97),
            cx + leg * 0.09 * fh,
            arm_t,
            ARM,
        );
    }
    // The idle arm always hangs down, slightly outward.
    let hang = |c: &mut Canvas, sx: f64, s: f64| {
        c.segment(shoulder_y, sx, y(0.56), sx + s * side * 0.05 * fh, arm_t, ARM);
    };
    hang(c, other_x, -1.0);
    let fist_r = (0.06 * fh).max(1.0);
    match class {
        GestureClass::Null => hang(c, shoulder_x, 1.0),
        GestureClass::Pointing => {
            // Straight horizontal arm with a fist at the tip.
            c.segment(shoulder_y, shoulder_x, shoulder_y, x(0.365), arm_t, ARM);
            c.disc(shoulder_y, x(0.365), fist_r, ARM);
        }
        GestureClass::ThumbsUp => {
            // Forearm raised beside the head, red marker above the fist.
            c.segment(shoulder_y, shoulder_x, y(0.30), x(0.215), arm_t, ARM);
            c.segment(y(0.30), x(0.215), y(0.12), x(0.215), arm_t, ARM);
            c.disc(y(0.06), x(0.215), 0.06 * fh, MARKER);
        }
        GestureClass::ThumbsDown => {
            // Forearm lowered along the torso, red marker below the fist.
            c.segment(shoulder_y, shoulder_x, y(0.30), x(0.215), arm_t, ARM);
            c.segment(y(0.30), x(0.215), y(0.52), x(0.215), arm_t, ARM);
            c.disc(y(0.58), x(0.215), 0.06 * fh, MARKER);
        }
        GestureClass::Beckoning => {
            // High elbow, forearm bent in over the head: the only
            // class with bare arm ink above shoulder level angled
            // toward the body.
            c.segment(shoulder_y, shoulder_x, y(0.14), x(0.245), arm_t, ARM);
            c.segment(y(0.14), x(0.245), y(0.05), x(0.02), arm_t, ARM);
        }
        GestureClass::Stop => {
            // Vertical forearm capped by a yellow palm bar.
            c.segment(shoulder_y, shoulder_x, shoulder_y, x(0.215), arm_t, ARM);
            c.segment(shoulder_y, x(0.215), y(0.10), x(0.215), arm_t, ARM);
            c.rect(y(0.02), x(0.215) - 0.09 * fh, 0.06 * fh, 0.18 * fh, PALM);
        }
    }
}

fn figure_width(fh: f64) -> f64 {
    0.86 * fh
}

fn clutter_shapes(c: &mut Canvas, rng: &mut ChaCha8Rng, n: usize) {
    let (h, w) = c.dims();
    for _ in 0..n {
        let color = [
            0.25 + rng.gen::<f64>() * 0.5,
            0.25 + rng.gen::<f64>() * 0.5,
            0.25 + rng.gen::<f64>() * 0.5,
        ];
        let cy = rng.gen::<f64>() * h as f64;
        let cx = rng.gen::<f64>() * w as f64;
        let size = 4.0 + rng.gen::<f64>() * (h as f64 * 0.12);
        if rng.gen::<bool>() {
            c.rect(cy, cx, size * (0.4 + rng.gen::<f64>()), size, color);
        } else {
            c.disc(cy, cx, size / 2.0, color);
        }
    }
}

/// Separable Gaussian blur: one horizontal and one vertical pass.
/// Exact for a Gaussian and much cheaper than the full 2-D kernel at
/// frame resolution.
fn blur(data: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (2.0 * sigma).ceil() as usize;
    if radius == 0 {
        return data.clone();
    }
    let size = 2 * radius + 1;
    let mut taps = Array2::<f64>::zeros((1, size));
    for i in 0..size {
        let d = i as f64 - radius as f64;
        taps[[0, i]] = (-(d * d) / (2.0 * sigma * sigma)).exp();
    }
    let sum = taps.sum();
    taps /= sum;
    let pass1 = convolve2d_reflect(&data.view(), &taps);
    let vertical = taps.t().as_standard_layout().to_owned();
    convolve2d_reflect(&pass1.view(), &vertical)
}

/// Render the corpus into `out_dir` as `img_NNNNN.png` files and
/// return the matching manifest (paths relative to `out_dir`). Fully
/// deterministic: a seed fixes every image byte and every manifest
/// row. Classes rotate round-robin so the corpus is exactly balanced
/// whenever the count is a multiple of six; distances and the
/// gesturing side are drawn uniformly.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<std::path::Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let class = GestureClass::ALL[i % GestureClass::ALL.len()];
        let d = cfg.d_min + rng.gen::<f64>() * (cfg.d_max - cfg.d_min);
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let fh = cfg.k / d;
        let fw = figure_width(fh);
        // Figures that fit are placed uniformly. Overflowing figures
        // (close range) are windowed onto the upper body, since the
        // gesture lives between the head and the hip; the frame edges
        // clip the rest.
        let fy = if fh <= h as f64 {
            (h as f64 - fh) * rng.gen::<f64>()
        } else {
            h as f64 / 2.0 - 0.32 * fh + (rng.gen::<f64>() - 0.5) * 0.2 * h as f64
        };
        let fx = if fw <= w as f64 {
            (w as f64 - fw) * rng.gen::<f64>()
        } else {
            (w as f64 - fw) / 2.0 + (rng.gen::<f64>() - 0.5) * 0.2 * w as f64
        };
        let base = [
            0.35 + rng.gen::<f64>() * 0.2,
            0.4 + rng.gen::<f64>() * 0.2,
            0.35 + rng.gen::<f64>() * 0.2,
        ];
        let mut canvas = Canvas::new(h, w, base);
        clutter_shapes(&mut canvas, &mut rng, cfg.clutter);
        draw_figure(&mut canvas, class, fy, fx, fh, side);
        let mut data = blur(&canvas.data, cfg.blur_per_m * d);
        let noise_std = cfg.noise_per_m * d;
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).expect("std is finite and positive");
            data.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
        } else {
            data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        let img = Image::new(data)?;
        let name = format!("img_{i:05}.png");
        save_png(&img, out_dir.join(&name))?;
        // The recorded box is the figure extent clipped to the frame,
        // kept in float precision so geometric ratios stay exact.
        let x0 = fx.max(0.0);
        let y0 = fy.max(0.0);
        let bw = (fx + fw).min(w as f64) - x0;
        let bh = (fy + fh).min(h as f64) - y0;
        samples.push(Sample {
            path: name.into(),
            class,
            distance_m: d,
            bbox: Some(BBox::new(x0, y0, bw, bh)?),
        });
    }
    Ok(DatasetManifest {
        samples,
        split: Some("train".into()),
        provenance: Some(format!(
            "synthetic stick-figure corpus, seed {}, k {}",
            cfg.seed, cfg.k
        )),
    })
}
