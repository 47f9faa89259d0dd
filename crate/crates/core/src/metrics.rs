//! Full-reference quality metrics.
//!
//! Both metrics operate on the exportable range: inputs are clamped to [0, 1]
//! before comparison. PSNR uses a peak of 1.0 and pools the squared error over
//! every channel. SSIM is computed on luma with an 11x11 Gaussian window
//! (sigma 1.5) and the usual stabilizers for a dynamic range of 1.0.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    /// Decibels; `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricPair {
    pub fn between(a: &Image, b: &Image) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB, `f64::INFINITY` when the clamped images
/// are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *w = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable "valid" filtering of a `h`x`w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, wk) in k.iter().enumerate() {
                acc += wk * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Mean structural similarity on luma. Images smaller than the window are
/// compared with a single full-image window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a == b {
        return Ok(1.0);
    }
    let (h, w) = (a.height(), a.width());
    let la: Vec<f64> = a.clamped().luma();
    let lb: Vec<f64> = b.clamped().luma();

    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = la.len() as f64;
        let mx = la.iter().sum::<f64>() / n;
        let my = lb.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (x, y) in la.iter().zip(&lb) {
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
            cxy += (x - mx) * (y - my);
        }
        return Ok(ssim_term(mx, my, vx / n, vy / n, cxy / n));
    }

    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &k);
    let mu_b = filter_valid(&lb, h, w, &k);
    let aa = filter_valid(&prod(&la, &la), h, w, &k);
    let bb = filter_valid(&prod(&lb, &lb), h, w, &k);
    let ab = filter_valid(&prod(&la, &lb), h, w, &k);

    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (mx, my) = (mu_a[i], mu_b[i]);
            ssim_term(mx, my, aa[i] - mx * mx, bb[i] - my * my, ab[i] - mx * my)
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}
