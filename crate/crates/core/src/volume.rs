//! Classical volume rendering along a single ray, plus radiance concentration.
//!
//! Conventions: `alpha_i = exp(-sigma_i * delta_i)` is the *transparency* of
//! segment `i`, `T_i = prod_{j<i} alpha_j` and the volume coefficient of a
//! sample is `T_i (1 - alpha_i)`.
//!
//! Depths are axial: a sample at depth `h` lies on the plane `z_cam = h`, which
//! is what the thin-lens defocus law expects. `delta_i` is the metric length
//! of the segment, i.e. the depth step times the ray's `depth_scale`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rgb;

/// Below this total volume weight a ray is treated as empty.
pub const EMPTY_RAY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// Distance travelled along `direction` per unit of axial depth
    /// (`1 / cos` of the angle to the optical axis).
    pub depth_scale: f64,
    /// Source pixel; may lie outside the image for guard-band rays.
    pub pixel: (i64, i64),
}

impl Ray {
    /// Point at axial depth `depth`.
    pub fn at(&self, depth: f64) -> [f64; 3] {
        let t = depth * self.depth_scale;
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) {
            return Err(Error::Domain(format!(
                "ray near {} must be below far {}",
                self.near, self.far
            )));
        }
        let norm = self.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "ray direction must be unit length, |d| = {norm}"
            )));
        }
        if !(self.depth_scale >= 1.0) || !self.depth_scale.is_finite() {
            return Err(Error::Domain(format!(
                "depth scale must be >= 1, got {}",
                self.depth_scale
            )));
        }
        Ok(())
    }
}

/// One depth per stratum of `[near, far]`: the stratum midpoint when `jitter_seed`
/// is `None`, otherwise a uniform draw seeded by it.
pub fn stratified_sample(ray: &Ray, n_samples: usize, jitter_seed: Option<u64>) -> Result<Vec<f64>> {
    if n_samples < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples per ray, got {n_samples}"
        )));
    }
    let width = (ray.far - ray.near) / n_samples as f64;
    let mut rng = jitter_seed.map(ChaCha8Rng::seed_from_u64);
    Ok((0..n_samples)
        .map(|i| {
            let u = match rng.as_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            ray.near + (i as f64 + u) * width
        })
        .collect())
}

/// Segment lengths `h_{i+1} - h_i`; the last segment runs to `far`.
pub fn segment_lengths(depths: &[f64], far: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                depths[i + 1] - depths[i]
            } else {
                far - depths[i]
            }
        })
        .collect()
}

#[inline]
pub fn segment_transparency(density: f64, length: f64) -> f64 {
    (-density * length).exp()
}

/// Per-sample data of one ray, ready for compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub lengths: Vec<f64>,
    pub colors: Vec<Rgb>,
    pub alphas: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl RaySamples {
    /// Builds samples along `ray` from field outputs, converting densities to
    /// transparencies.
    pub fn from_densities(ray: &Ray, depths: Vec<f64>, colors: Vec<Rgb>, densities: &[f64]) -> Self {
        let (near, far) = (ray.near, ray.far);
        let lengths = segment_lengths(&depths, far)
            .into_iter()
            .map(|d| d * ray.depth_scale)
            .collect::<Vec<_>>();
        let alphas = densities
            .iter()
            .zip(&lengths)
            .map(|(&s, &d)| segment_transparency(s, d))
            .collect();
        RaySamples {
            depths,
            lengths,
            colors,
            alphas,
            near,
            far,
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depths.len();
        if self.lengths.len() != n || self.colors.len() != n || self.alphas.len() != n {
            return Err(Error::shape(
                format!("{n} lengths, colors and alphas"),
                format!("{}, {}, {}", self.lengths.len(), self.colors.len(), self.alphas.len()),
            ));
        }
        if self.depths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Validation("sample depths must be strictly ascending".into()));
        }
        if self.depths.iter().any(|&h| h < self.near || h > self.far) {
            return Err(Error::Validation("sample depths must lie within [near, far]".into()));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Validation("segment transparency must lie in (0, 1]".into()));
        }
        if self.lengths.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Validation("segment lengths must be positive".into()));
        }
        Ok(())
    }
}

/// `T_i (1 - alpha_i)` for every sample.
pub fn volume_coefficients(samples: &RaySamples) -> Vec<f64> {
    let mut transmittance = 1.0;
    samples
        .alphas
        .iter()
        .map(|&a| {
            let w = transmittance * (1.0 - a);
            transmittance *= a;
            w
        })
        .collect()
}

fn weighted_radiance(weights: &[f64], colors: &[Rgb]) -> Rgb {
    let mut c = [0.0; 3];
    for (w, col) in weights.iter().zip(colors) {
        for k in 0..3 {
            c[k] += w * col[k];
        }
    }
    c
}

/// Pinhole compositing `sum_i T_i (1 - alpha_i) c_i`.
pub fn composite_pinhole(samples: &RaySamples) -> Rgb {
    weighted_radiance(&volume_coefficients(samples), &samples.colors)
}

/// Radiance collapsed to the volume-weighted mean depth of a ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentratedPixel {
    /// Volume-weighted radiance (not yet normalized by CoC area).
    pub radiance: Rgb,
    pub depth: f64,
    pub total_weight: f64,
}

impl ConcentratedPixel {
    pub fn is_empty(&self) -> bool {
        self.total_weight < EMPTY_RAY_EPS
    }
}

pub fn concentrate(samples: &RaySamples) -> ConcentratedPixel {
    let weights = volume_coefficients(samples);
    let total_weight: f64 = weights.iter().sum();
    if total_weight < EMPTY_RAY_EPS {
        return ConcentratedPixel {
            radiance: [0.0; 3],
            depth: samples.far,
            total_weight,
        };
    }
    let depth = weights.iter().zip(&samples.depths).map(|(w, h)| w * h).sum::<f64>() / total_weight;
    ConcentratedPixel {
        radiance: weighted_radiance(&weights, &samples.colors),
        depth,
        total_weight,
    }
}

/// Cotangents of [`concentrate`] with respect to sample colors and transparencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrateGrad {
    pub colors: Vec<Rgb>,
    pub alphas: Vec<f64>,
}

pub fn concentrate_backward(samples: &RaySamples, d_radiance: Rgb, d_depth: f64) -> Result<ConcentrateGrad> {
    concentration_backward(samples, d_radiance, d_depth, true)
}

fn concentration_backward(
    samples: &RaySamples,
    d_radiance: Rgb,
    d_depth: f64,
    empty_branch: bool,
) -> Result<ConcentrateGrad> {
    let n = samples.len();
    if samples.alphas.len() != n || samples.colors.len() != n {
        return Err(Error::shape(n, samples.alphas.len().min(samples.colors.len())));
    }
    let weights = volume_coefficients(samples);
    let total: f64 = weights.iter().sum();
    if empty_branch && total < EMPTY_RAY_EPS {
        return Ok(ConcentrateGrad {
            colors: vec![[0.0; 3]; n],
            alphas: vec![0.0; n],
        });
    }
    let depth = weights.iter().zip(&samples.depths).map(|(w, h)| w * h).sum::<f64>() / total;

    let d_weights: Vec<f64> = (0..n)
        .map(|i| {
            let c = samples.colors[i];
            d_radiance[0] * c[0]
                + d_radiance[1] * c[1]
                + d_radiance[2] * c[2]
                + d_depth * (samples.depths[i] - depth) / total
        })
        .collect();
    let colors = weights
        .iter()
        .map(|&w| [w * d_radiance[0], w * d_radiance[1], w * d_radiance[2]])
        .collect();
    Ok(ConcentrateGrad {
        colors,
        alphas: weights_backward(&samples.alphas, &d_weights),
    })
}

/// Cotangents of [`composite_pinhole`]. Unlike [`concentrate_backward`] there
/// is no empty-ray branch: a nearly empty ray still learns to gain density.
pub fn composite_backward(samples: &RaySamples, d_radiance: Rgb) -> Result<ConcentrateGrad> {
    concentration_backward(samples, d_radiance, 0.0, false)
}

/// Pulls cotangents on `T_i (1 - alpha_i)` back to the transparencies without
/// dividing by any alpha (safe for fully opaque segments).
pub(crate) fn weights_backward(alphas: &[f64], d_weights: &[f64]) -> Vec<f64> {
    let n = alphas.len();
    let mut out = vec![0.0; n];
    // suffix_k = sum_{i>k} dW_i (1 - a_i) prod_{k<j<i} a_j
    let mut suffix = 0.0;
    let mut transmittance = vec![1.0; n];
    for i in 1..n {
        transmittance[i] = transmittance[i - 1] * alphas[i - 1];
    }
    for k in (0..n).rev() {
        out[k] = transmittance[k] * (suffix - d_weights[k]);
        suffix = d_weights[k] * (1.0 - alphas[k]) + alphas[k] * suffix;
    }
    out
}

/// Chain rule through `alpha = exp(-sigma * delta)`.
pub fn alpha_to_density_grad(samples: &RaySamples, d_alphas: &[f64]) -> Vec<f64> {
    d_alphas
        .iter()
        .zip(&samples.alphas)
        .zip(&samples.lengths)
        .map(|((g, a), d)| -g * a * d)
        .collect()
}
