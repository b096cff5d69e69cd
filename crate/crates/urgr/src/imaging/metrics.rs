//! MSE and PSNR quality metrics.

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Peak signal-to-noise ratio. Identical images produce the typed
/// [`Psnr::Infinite`] sentinel, never a floating-point overflow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Psnr {
    /// Finite value in decibels.
    Db(f64),
    /// MSE was exactly zero.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

/// MSE/PSNR pair for one image comparison at peak value `peak`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub mse: f64,
    pub psnr: Psnr,
    pub peak: f64,
}

impl QualityScore {
    pub fn between(a: &Image, b: &Image, peak: f64) -> Result<Self> {
        let m = mse(a, b)?;
        let p = psnr_from_mse(m, peak)?;
        Ok(QualityScore { mse: m, psnr: p, peak })
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    Ok(())
}

/// Mean squared error averaged over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

fn psnr_from_mse(mse: f64, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    if mse == 0.0 {
        Ok(Psnr::Infinite)
    } else {
        Ok(Psnr::Db(10.0 * (peak * peak / mse).log10()))
    }
}

/// `10 * log10(peak^2 / mse(a, b))`, with the infinite sentinel at mse = 0.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    let m = mse(a, b)?;
    psnr_from_mse(m, peak)
}
