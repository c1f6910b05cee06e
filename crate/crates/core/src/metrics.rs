//! Image quality metrics.

use crate::error::{Error, Result};
use crate::raster::Image;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB over all channels; `+inf` for identical
/// images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be positive, got {peak}")));
    }
    let n = (a.data.len() * 3) as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]) * (p[k] - q[k])))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn luma(image: &Image) -> Vec<f64> {
    image
        .data
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (x, y) = ((i % SSIM_WINDOW) as f64 - c, (i / SSIM_WINDOW) as f64 - c);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity of the luma channels over every fully covered
/// 11x11 Gaussian window (dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::shape(
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{}x{}", a.width, a.height),
        ));
    }
    let (x, y) = (luma(a), luma(b));
    let window = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (nx, ny) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ny {
        for ox in 0..nx {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = window[wy * SSIM_WINDOW + wx];
                    let i = (oy + wy) * a.width + ox + wx;
                    mx += g * x[i];
                    my += g * y[i];
                    sxx += g * x[i] * x[i];
                    syy += g * y[i] * y[i];
                    sxy += g * x[i] * y[i];
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (nx * ny) as f64)
}
