//! PSNR and SSIM on magnitude images.
//!
//! Both metrics compare |x| against |ref| with the dynamic range taken from
//! the reference. SSIM uses the standard 11x11 Gaussian window (sigma 1.5)
//! with K1 = 0.01, K2 = 0.03, evaluated on the valid interior and averaged.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::CTensor;

/// Sentinel for a zero-error reconstruction.
pub const PSNR_CAP_DB: f64 = 200.0;

/// `20 log10(max|ref| / rmse)`, capped at 200 dB; exact matches report the cap.
pub fn psnr(x: &CTensor, reference: &CTensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::Shape {
            op: "psnr",
            detail: format!("{:?} vs {:?}", x.shape(), reference.shape()),
        });
    }
    let peak = reference.max_abs();
    if peak == 0.0 {
        return Err(Error::InvalidArg("psnr reference is identically zero".into()));
    }
    let n = x.len() as f64;
    let mse: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| {
            let d = a.norm() - b.norm();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filtering of an [H, W] map with the 11-tap window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; 11]) -> Vec<f64> {
    let wh = h - 10;
    let ww = w - 10;
    // rows first
    let mut rows = vec![0.0; h * ww];
    for r in 0..h {
        for c in 0..ww {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * img[r * w + c + t];
            }
            rows[r * ww + c] = acc;
        }
    }
    let mut out = vec![0.0; wh * ww];
    for c in 0..ww {
        for r in 0..wh {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * rows[(r + t) * ww + c];
            }
            out[r * ww + c] = acc;
        }
    }
    out
}

/// Mean local SSIM over the valid interior of the magnitude images.
pub fn ssim(x: &CTensor, reference: &CTensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("{:?} vs {:?}", x.shape(), reference.shape()),
        });
    }
    let s = x.shape();
    if s.len() != 2 || s[0] < 11 || s[1] < 11 {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("need [H >= 11, W >= 11], got {:?}", s),
        });
    }
    let (h, w) = (s[0], s[1]);
    let peak = reference.max_abs();
    if peak == 0.0 {
        return Err(Error::InvalidArg("ssim reference is identically zero".into()));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let xm: Vec<f64> = x.data().iter().map(|z| z.norm()).collect();
    let ym: Vec<f64> = reference.data().iter().map(|z| z.norm()).collect();
    let xx: Vec<f64> = xm.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ym.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xm.iter().zip(&ym).map(|(a, b)| a * b).collect();

    let k = gaussian_window();
    let mu_x = filter_valid(&xm, h, w, &k);
    let mu_y = filter_valid(&ym, h, w, &k);
    let e_xx = filter_valid(&xx, h, w, &k);
    let e_yy = filter_valid(&yy, h, w, &k);
    let e_xy = filter_valid(&xy, h, w, &k);

    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let sx = e_xx[i] - mu_x[i] * mu_x[i];
        let sy = e_yy[i] - mu_y[i] * mu_y[i];
        let sxy = e_xy[i] - mu_x[i] * mu_y[i];
        let num = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * sxy + c2);
        let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (sx + sy + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    /// (psnr_db, ssim) per sample, in input order.
    pub per_sample: Vec<(f64, f64)>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Mean and sample standard deviation (N-1) per metric. A single-element
/// input reports std 0 with n = 1.
pub fn aggregate(per_sample: &[(f64, f64)]) -> Result<MetricReport> {
    if per_sample.is_empty() {
        return Err(Error::InvalidArg("aggregate needs at least one sample".into()));
    }
    let n = per_sample.len();
    let (psnr_mean, psnr_std) = mean_std(per_sample.iter().map(|s| s.0), n);
    let (ssim_mean, ssim_std) = mean_std(per_sample.iter().map(|s| s.1), n);
    Ok(MetricReport {
        n,
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        per_sample: per_sample.to_vec(),
    })
}
