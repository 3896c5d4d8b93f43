//! Restoration quality metrics: band-averaged PSNR, mean SSIM with a
//! Gaussian window, and the spectral angle in radians.
//!
//! All computations run in `f64` regardless of the tensor element type, and
//! all three metrics take cubes laid out `[H, W, D]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR values are capped here; a zero-error band would otherwise be
/// unbounded.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
/// Standard deviation of the SSIM window's Gaussian weighting.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape().len() != 3 {
        return Err(Error::contract(op, "inputs must be [H, W, D] cubes"));
    }
    if a.shape() != b.shape() {
        return Err(Error::contract(
            op,
            format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, computed per band and averaged, with
/// each band capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(reference: &Tensor<T>, restored: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_pair("psnr", reference, restored)?;
    if !(data_range > 0.0) {
        return Err(Error::contract("psnr", "data_range must be positive"));
    }
    let &[h, w, d] = reference.shape() else { unreachable!() };
    let a = reference.data();
    let b = restored.data();
    let mut total = 0.0;
    for band in 0..d {
        let mut sq = 0.0;
        for ih in 0..h {
            for iw in 0..w {
                let i = (ih * w + iw) * d + band;
                let e = a[i].to_f64() - b[i].to_f64();
                sq += e * e;
            }
        }
        let mse = sq / (h * w) as f64;
        let band_psnr = if mse == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
        };
        total += band_psnr;
    }
    Ok(total / d as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in -half..=half {
        for j in -half..=half {
            let r2 = (i * i + j * j) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity: Gaussian-weighted 11x11 windows over every
/// position where the window fits entirely, averaged per band and over
/// bands. Spatial extents must be at least the window size.
pub fn ssim<T: Scalar>(reference: &Tensor<T>, restored: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_pair("ssim", reference, restored)?;
    if !(data_range > 0.0) {
        return Err(Error::contract("ssim", "data_range must be positive"));
    }
    let &[h, w, d] = reference.shape() else { unreachable!() };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!("spatial extents {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let half = SSIM_WINDOW / 2;

    let mut band_mean_sum = 0.0;
    let mut plane_a = vec![0.0f64; h * w];
    let mut plane_b = vec![0.0f64; h * w];
    let a = reference.data();
    let b = restored.data();
    for band in 0..d {
        for ih in 0..h {
            for iw in 0..w {
                let i = (ih * w + iw) * d + band;
                plane_a[ih * w + iw] = a[i].to_f64();
                plane_b[ih * w + iw] = b[i].to_f64();
            }
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for ch in half..h - half {
            for cw in half..w - half {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut wi = 0;
                for dh in 0..SSIM_WINDOW {
                    let row = (ch + dh - half) * w + cw - half;
                    for dw in 0..SSIM_WINDOW {
                        let wt = window[wi];
                        wi += 1;
                        let x = plane_a[row + dw];
                        let y = plane_b[row + dw];
                        mx += wt * x;
                        my += wt * y;
                        mxx += wt * x * x;
                        myy += wt * y * y;
                        mxy += wt * x * y;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cxy = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                sum += s;
                count += 1;
            }
        }
        band_mean_sum += sum / count as f64;
    }
    Ok(band_mean_sum / d as f64)
}

/// Result of a spectral-angle computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamOutcome {
    /// Mean angle in radians over the pixels that carried signal.
    pub radians: f64,
    /// Pixels skipped because either spectrum was identically zero.
    pub skipped_pixels: usize,
}

/// Mean spectral angle between per-pixel spectra, in radians. Pixels where
/// either spectrum is the zero vector are skipped and counted; it is an
/// error for every pixel to be skipped.
pub fn sam<T: Scalar>(reference: &Tensor<T>, restored: &Tensor<T>) -> Result<SamOutcome> {
    check_pair("sam", reference, restored)?;
    let &[h, w, d] = reference.shape() else { unreachable!() };
    let a = reference.data();
    let b = restored.data();
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for ih in 0..h {
        for iw in 0..w {
            let base = (ih * w + iw) * d;
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..d {
                let x = a[base + k].to_f64();
                let y = b[base + k].to_f64();
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            let cosine = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
            sum += cosine.acos();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::contract(
            "sam",
            "every pixel had a zero spectrum on one side",
        ));
    }
    Ok(SamOutcome { radians: sum / used as f64, skipped_pixels: skipped })
}

/// All three metrics for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_rad: f64,
}

impl MetricReport {
    /// Evaluate a restored cube against its reference on the `[0, 1]` range.
    pub fn evaluate<T: Scalar>(
        name: impl Into<String>,
        reference: &Tensor<T>,
        restored: &Tensor<T>,
    ) -> Result<MetricReport> {
        Ok(MetricReport {
            name: name.into(),
            psnr_db: psnr(reference, restored, 1.0)?,
            ssim: ssim(reference, restored, 1.0)?,
            sam_rad: sam(reference, restored)?.radians,
        })
    }
}

/// Line-oriented rendering of a batch of reports.
pub fn report_text(reports: &[MetricReport]) -> String {
    use std::fmt::Write;
    let mut s = String::from("metric-report v1\n");
    for r in reports {
        let _ = writeln!(
            s,
            "image: {} psnr_db={:.4} ssim={:.6} sam_rad={:.6}",
            r.name, r.psnr_db, r.ssim, r.sam_rad
        );
    }
    s
}
