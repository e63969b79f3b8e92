//! Image-quality metrics over a region of interest: RMSE, PSNR, SSIM.
//!
//! Both volumes are rescaled by 255/intensity_peak of the reference before
//! any metric, so results read on the usual 8-bit scale regardless of the
//! data's native range. SSIM uses 3x3x3 local statistics (mirror boundary);
//! ROI membership is decided by the center voxel only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::mirror;
use crate::volume::{RoiMask, Volume3D};

pub const METRIC_PEAK: f64 = 255.0;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// dB; f64::INFINITY when the volumes agree exactly on the ROI.
    pub psnr: f64,
    pub ssim: f64,
    /// Intensity units on the normalized 0..255 scale.
    pub rmse: f64,
    pub roi_voxel_count: usize,
}

impl QualityReport {
    pub fn csv_header() -> &'static str {
        "psnr_db,ssim,rmse,roi_voxels"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.psnr, self.ssim, self.rmse, self.roi_voxel_count
        )
    }
}

/// Voxels with strictly positive intensity in the reference volume.
pub fn roi_mask(truth: &Volume3D) -> Result<RoiMask> {
    let mask = RoiMask::from_positive(truth);
    if mask.count() == 0 {
        return Err(Error::invalid("reference volume is all zero: empty ROI"));
    }
    Ok(mask)
}

fn check_metric_inputs(test: &Volume3D, truth: &Volume3D, mask: &RoiMask) -> Result<()> {
    if test.dims() != truth.dims() {
        return Err(Error::invalid("test/truth dims differ"));
    }
    if mask.dims() != truth.dims() {
        return Err(Error::invalid("mask dims differ from volumes"));
    }
    if mask.count() == 0 {
        return Err(Error::invalid("empty ROI mask"));
    }
    Ok(())
}

/// RMSE over the ROI on the normalized peak-255 scale.
pub fn rmse(test: &Volume3D, truth: &Volume3D, mask: &RoiMask) -> Result<f64> {
    check_metric_inputs(test, truth, mask)?;
    let scale = METRIC_PEAK / truth.intensity_peak();
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&t, &g), &m) in test
        .data()
        .iter()
        .zip(truth.data())
        .zip(mask.as_slice())
    {
        if m {
            let d = scale * (t - g);
            sum += d * d;
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// PSNR = 20 log10(255/RMSE) over the ROI; +inf when RMSE is exactly 0.
pub fn psnr(test: &Volume3D, truth: &Volume3D, mask: &RoiMask) -> Result<f64> {
    let r = rmse(test, truth, mask)?;
    Ok(psnr_from_rmse(r))
}

pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (METRIC_PEAK / rmse).log10()
    }
}

/// Mean local SSIM over ROI centers; 3x3x3 uniform-window statistics with
/// mirrored boundaries, c1 = (0.01*255)^2, c2 = (0.03*255)^2.
pub fn ssim(test: &Volume3D, truth: &Volume3D, mask: &RoiMask) -> Result<f64> {
    check_metric_inputs(test, truth, mask)?;
    let (nx, ny, nz) = truth.dims();
    let scale = METRIC_PEAK / truth.intensity_peak();
    let c1 = (SSIM_K1 * METRIC_PEAK).powi(2);
    let c2 = (SSIM_K2 * METRIC_PEAK).powi(2);
    let a = test.data();
    let b = truth.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !mask.get(i) {
                    continue;
                }
                let mut su = 0.0;
                let mut sv = 0.0;
                let mut suu = 0.0;
                let mut svv = 0.0;
                let mut suv = 0.0;
                for dz in -1isize..=1 {
                    let zz = mirror(z as isize + dz, nz);
                    for dy in -1isize..=1 {
                        let yy = mirror(y as isize + dy, ny);
                        let row = nx * (yy + ny * zz);
                        for dx in -1isize..=1 {
                            let j = row + mirror(x as isize + dx, nx);
                            let u = scale * a[j];
                            let v = scale * b[j];
                            su += u;
                            sv += v;
                            suu += u * u;
                            svv += v * v;
                            suv += u * v;
                        }
                    }
                }
                let n = 27.0;
                let mu = su / n;
                let mv = sv / n;
                let var_u = suu / n - mu * mu;
                let var_v = svv / n - mv * mv;
                let cov = suv / n - mu * mv;
                let local = ((2.0 * mu * mv + c1) * (2.0 * cov + c2))
                    / ((mu * mu + mv * mv + c1) * (var_u + var_v + c2));
                total += local;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// PSNR + SSIM + RMSE in one report.
pub fn evaluate(test: &Volume3D, truth: &Volume3D, mask: &RoiMask) -> Result<QualityReport> {
    let r = rmse(test, truth, mask)?;
    Ok(QualityReport {
        psnr: psnr_from_rmse(r),
        ssim: ssim(test, truth, mask)?,
        rmse: r,
        roi_voxel_count: mask.count(),
    })
}
