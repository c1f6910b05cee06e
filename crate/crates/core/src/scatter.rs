//! Concentrate-and-scatter rendering of a ray patch.
//!
//! Every source pixel `i` spreads its (gamma-encoded) concentrated radiance
//! over a soft disc of radius `r_i = K |1/h_c - 1/F| / 2` (clamped to
//! `max_radius`). A target pixel `j` receives weight
//! `w_ij = scatter_weight(k_ij r_i, l_ij)` from every source with
//! `l_ij < r_i + 1`; the result is `sum_i w_ij E_i / sum_i w_ij`, decoded
//! back with the inverse gamma.
//!
//! The implementation gathers per target pixel instead of scattering per
//! source. Both visit the same ordered pairs `(i, j)`, so the accumulators
//! are identical, and gathering needs no atomics. The backward pass gathers
//! per source pixel in the same way.
//!
//! Sources are restricted to `l_ij < r_i + 1` so that a zero radius touches
//! only its own pixel. The kernel tail beyond that cut is below `3.4e-4` of
//! the kernel peak.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{scatter_weight_with_grad, ApertureShape};
use crate::raster::{Image, Rgb};
use crate::volume::{volume_coefficients, ConcentratedPixel, RaySamples, EMPTY_RAY_EPS};

/// Lower bound applied to pixel values when evaluating gamma derivatives.
const GAMMA_GRAD_FLOOR: f64 = 1e-6;

/// Radii below this are rounding noise of `1/h - 1/F` and count as zero, so
/// an exactly focused pixel does not pick up its neighbors.
const RADIUS_NOISE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Concentrated pixels of a patch including its guard band.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentratedPatch {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<ConcentratedPixel>,
    pub interior: PixelRect,
}

impl ConcentratedPatch {
    pub fn new(width: usize, height: usize, pixels: Vec<ConcentratedPixel>, interior: PixelRect) -> Result<Self> {
        let patch = ConcentratedPatch {
            width,
            height,
            pixels,
            interior,
        };
        patch.validate()?;
        Ok(patch)
    }

    /// A patch whose interior is centered with `guard` pixels on every side.
    pub fn with_guard(width: usize, height: usize, pixels: Vec<ConcentratedPixel>, guard: usize) -> Result<Self> {
        if width <= 2 * guard || height <= 2 * guard {
            return Err(Error::shape(
                format!("patch larger than 2 x guard ({guard})"),
                format!("{width}x{height}"),
            ));
        }
        Self::new(
            width,
            height,
            pixels,
            PixelRect {
                x0: guard,
                y0: guard,
                width: width - 2 * guard,
                height: height - 2 * guard,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.width * self.height {
            return Err(Error::shape(self.width * self.height, self.pixels.len()));
        }
        let r = self.interior;
        if r.width == 0 || r.height == 0 || r.x0 + r.width > self.width || r.y0 + r.height > self.height {
            return Err(Error::Validation(format!(
                "interior {r:?} does not fit in a {}x{} patch",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Smallest margin between the interior and the patch border.
    pub fn guard(&self) -> usize {
        let r = self.interior;
        r.x0.min(r.y0)
            .min(self.width - r.x0 - r.width)
            .min(self.height - r.y0 - r.height)
    }

    /// Pinhole image of the interior: the concentrated radiance itself.
    pub fn interior_radiance(&self) -> Image {
        let r = self.interior;
        Image::from_fn(r.width, r.height, |x, y| {
            self.pixels[(y + r.y0) * self.width + x + r.x0].radiance
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterSettings {
    /// Aperture parameter `K` (pixels x scene units).
    pub aperture: f64,
    /// Focus distance `F` in scene units.
    pub focus: f64,
    pub shape: ApertureShape,
    pub gamma: f64,
    /// Radius clamp in pixels.
    pub max_radius: f64,
}

impl ScatterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.aperture >= 0.0) || !self.aperture.is_finite() {
            return Err(Error::Domain(format!("aperture must be >= 0, got {}", self.aperture)));
        }
        if !(self.focus > 0.0) || !self.focus.is_finite() {
            return Err(Error::Domain(format!("focus must be > 0, got {}", self.focus)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.max_radius > 0.0) || !self.max_radius.is_finite() {
            return Err(Error::Domain(format!(
                "max radius must be > 0, got {}",
                self.max_radius
            )));
        }
        self.shape.validate()
    }

    /// Chebyshev half-width of the neighborhood any source can reach.
    pub fn reach(&self) -> usize {
        self.max_radius.ceil() as usize
    }

    /// Clamped scatter radius and whether the clamp is active.
    fn radius(&self, depth: f64) -> (f64, bool) {
        let raw = 0.5 * self.aperture * (1.0 / depth - 1.0 / self.focus).abs();
        if raw > self.max_radius {
            (self.max_radius, true)
        } else if raw < RADIUS_NOISE {
            (0.0, false)
        } else {
            (raw, false)
        }
    }
}

#[inline]
fn encode(v: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        v
    } else {
        v.powf(gamma)
    }
}

#[inline]
fn decode(v: f64, gamma: f64) -> f64 {
    if gamma == 1.0 {
        v
    } else {
        v.powf(1.0 / gamma)
    }
}

fn check_gamma_input(image: &Image, gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma must be > 0, got {gamma}")));
    }
    if image.data.iter().flatten().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("gamma transforms need non-negative pixel values".into()));
    }
    Ok(())
}

/// Elementwise `v^gamma`.
pub fn gamma_encode(image: &Image, gamma: f64) -> Result<Image> {
    check_gamma_input(image, gamma)?;
    let data = image.data.iter().map(|p| p.map(|v| encode(v, gamma))).collect();
    Image::from_data(image.width, image.height, data)
}

/// Elementwise `v^(1/gamma)`.
pub fn gamma_decode(image: &Image, gamma: f64) -> Result<Image> {
    check_gamma_input(image, gamma)?;
    let data = image.data.iter().map(|p| p.map(|v| decode(v, gamma))).collect();
    Image::from_data(image.width, image.height, data)
}

/// Per-pixel accumulators over the interior: the weight sum `W` and the
/// radiance sum `I` (linear space).
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterAccumulators {
    pub weights: Vec<f64>,
    pub radiance: Vec<Rgb>,
}

/// Forward results kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScatterCache {
    radii: Vec<f64>,
    clamped: Vec<bool>,
    encoded: Vec<Rgb>,
    /// Per interior pixel, row-major.
    weight_sums: Vec<f64>,
    blended: Vec<Rgb>,
}

impl ScatterCache {
    pub fn accumulators(&self) -> ScatterAccumulators {
        ScatterAccumulators {
            weights: self.weight_sums.clone(),
            radiance: self
                .weight_sums
                .iter()
                .zip(&self.blended)
                .map(|(w, b)| b.map(|v| v * w))
                .collect(),
        }
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
}

#[derive(Debug, Clone)]
pub struct ScatterOutput {
    pub image: Image,
    pub cache: ScatterCache,
}

/// Cotangents on every patch pixel's concentrated radiance and depth, and on
/// the view's aperture and focus.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterGrad {
    pub radiance: Vec<Rgb>,
    pub depth: Vec<f64>,
    pub aperture: f64,
    pub focus: f64,
}

/// Offsets of the neighborhood window with their distance and shape factor.
struct Window {
    reach: i64,
    dist: Vec<f64>,
    factor: Vec<f64>,
}

impl Window {
    fn new(settings: &ScatterSettings) -> Self {
        let reach = settings.reach() as i64;
        let side = (2 * reach + 1) as usize;
        let mut dist = Vec::with_capacity(side * side);
        let mut factor = Vec::with_capacity(side * side);
        for oy in -reach..=reach {
            for ox in -reach..=reach {
                let (fx, fy) = (ox as f64, oy as f64);
                dist.push((fx * fx + fy * fy).sqrt());
                factor.push(settings.shape.radius_factor(fx, fy));
            }
        }
        Window { reach, dist, factor }
    }

    /// Index of the offset `target - source`.
    #[inline]
    fn index(&self, ox: i64, oy: i64) -> usize {
        let side = 2 * self.reach + 1;
        ((oy + self.reach) * side + ox + self.reach) as usize
    }
}

fn prepare(patch: &ConcentratedPatch, settings: &ScatterSettings) -> Result<(Vec<f64>, Vec<bool>, Vec<Rgb>)> {
    patch.validate()?;
    settings.validate()?;
    let mut radii = Vec::with_capacity(patch.pixels.len());
    let mut clamped = Vec::with_capacity(patch.pixels.len());
    let mut encoded = Vec::with_capacity(patch.pixels.len());
    for px in &patch.pixels {
        if !(px.depth > 0.0) || !px.depth.is_finite() {
            return Err(Error::Domain(format!(
                "concentration depth must be positive, got {}",
                px.depth
            )));
        }
        if px.radiance.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("concentrated radiance must be non-negative".into()));
        }
        let (r, c) = settings.radius(px.depth);
        radii.push(r);
        clamped.push(c);
        encoded.push(px.radiance.map(|v| encode(v, settings.gamma)));
    }
    Ok((radii, clamped, encoded))
}

pub fn scatter_forward(patch: &ConcentratedPatch, settings: &ScatterSettings) -> Result<ScatterOutput> {
    let (radii, clamped, encoded) = prepare(patch, settings)?;
    let window = Window::new(settings);
    let rect = patch.interior;
    let (pw, ph) = (patch.width as i64, patch.height as i64);
    let reach = window.reach;

    let rows: Vec<(Vec<f64>, Vec<Rgb>)> = (0..rect.height)
        .into_par_iter()
        .map(|iy| {
            let ty = (rect.y0 + iy) as i64;
            let mut sums = Vec::with_capacity(rect.width);
            let mut blends = Vec::with_capacity(rect.width);
            let mut contributions: Vec<(usize, f64)> = Vec::new();
            for ix in 0..rect.width {
                let tx = (rect.x0 + ix) as i64;
                contributions.clear();
                let mut total = 0.0;
                for sy in (ty - reach).max(0)..=(ty + reach).min(ph - 1) {
                    for sx in (tx - reach).max(0)..=(tx + reach).min(pw - 1) {
                        let src = (sy * pw + sx) as usize;
                        let wi = window.index(tx - sx, ty - sy);
                        let l = window.dist[wi];
                        let r = radii[src];
                        if l < r + 1.0 {
                            let (w, _) = scatter_weight_with_grad(r, window.factor[wi], l);
                            total += w;
                            contributions.push((src, w));
                        }
                    }
                }
                let mut blended = [0.0; 3];
                for &(src, w) in &contributions {
                    let share = w / total;
                    for k in 0..3 {
                        blended[k] += share * encoded[src][k];
                    }
                }
                sums.push(total);
                blends.push(blended);
            }
            (sums, blends)
        })
        .collect();

    let mut weight_sums = Vec::with_capacity(rect.area());
    let mut blended = Vec::with_capacity(rect.area());
    for (s, b) in rows {
        weight_sums.extend(s);
        blended.extend(b);
    }
    if let Some(i) = weight_sums.iter().position(|&w| !(w > 0.0)) {
        return Err(Error::Validation(format!(
            "interior pixel {i} received no scatter weight"
        )));
    }
    let data = blended.iter().map(|b| b.map(|v| decode(v, settings.gamma))).collect();
    Ok(ScatterOutput {
        image: Image::from_data(rect.width, rect.height, data)?,
        cache: ScatterCache {
            radii,
            clamped,
            encoded,
            weight_sums,
            blended,
        },
    })
}

pub fn scatter_backward(
    patch: &ConcentratedPatch,
    settings: &ScatterSettings,
    cache: &ScatterCache,
    d_image: &Image,
) -> Result<ScatterGrad> {
    let rect = patch.interior;
    if d_image.width != rect.width || d_image.height != rect.height {
        return Err(Error::shape(
            format!("{}x{} cotangent", rect.width, rect.height),
            format!("{}x{}", d_image.width, d_image.height),
        ));
    }
    if cache.radii.len() != patch.pixels.len() || cache.weight_sums.len() != rect.area() {
        return Err(Error::shape(patch.pixels.len(), cache.radii.len()));
    }
    let gamma = settings.gamma;
    let inv_gamma = 1.0 / gamma;

    // Cotangent on the linear-space blend B_j.
    let d_blend: Vec<Rgb> = d_image
        .data
        .iter()
        .zip(&cache.blended)
        .map(|(g, b)| {
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = if gamma == 1.0 {
                    g[k]
                } else {
                    g[k] * inv_gamma * b[k].max(GAMMA_GRAD_FLOOR).powf(inv_gamma - 1.0)
                };
            }
            out
        })
        .collect();

    let window = Window::new(settings);
    let reach = window.reach;
    let (pw, ph) = (patch.width as i64, patch.height as i64);
    let inv_focus = 1.0 / settings.focus;

    // Per source: (dE, dr)
    let per_source: Vec<(Rgb, f64)> = (0..patch.pixels.len())
        .into_par_iter()
        .map(|src| {
            let sx = src as i64 % pw;
            let sy = src as i64 / pw;
            let r = cache.radii[src];
            let e = cache.encoded[src];
            let mut d_e = [0.0; 3];
            let mut d_r = 0.0;
            let ty_lo = (sy - reach).max(rect.y0 as i64);
            let ty_hi = (sy + reach).min((rect.y0 + rect.height) as i64 - 1).min(ph - 1);
            let tx_lo = (sx - reach).max(rect.x0 as i64);
            let tx_hi = (sx + reach).min((rect.x0 + rect.width) as i64 - 1).min(pw - 1);
            for ty in ty_lo..=ty_hi {
                for tx in tx_lo..=tx_hi {
                    let wi = window.index(tx - sx, ty - sy);
                    let l = window.dist[wi];
                    if !(l < r + 1.0) {
                        continue;
                    }
                    let j = (ty as usize - rect.y0) * rect.width + (tx as usize - rect.x0);
                    let (w, dw_dr) = scatter_weight_with_grad(r, window.factor[wi], l);
                    let inv_total = 1.0 / cache.weight_sums[j];
                    let db = d_blend[j];
                    let b = cache.blended[j];
                    let mut dot = 0.0;
                    for k in 0..3 {
                        d_e[k] += w * inv_total * db[k];
                        dot += db[k] * (e[k] - b[k]);
                    }
                    d_r += dot * inv_total * dw_dr;
                }
            }
            (d_e, d_r)
        })
        .collect();

    let mut radiance = Vec::with_capacity(per_source.len());
    let mut depth = Vec::with_capacity(per_source.len());
    let mut d_aperture = 0.0;
    let mut d_focus = 0.0;
    for (src, (d_e, d_r)) in per_source.into_iter().enumerate() {
        let px = &patch.pixels[src];
        radiance.push(std::array::from_fn(|k| {
            if gamma == 1.0 {
                d_e[k]
            } else {
                d_e[k] * gamma * px.radiance[k].max(GAMMA_GRAD_FLOOR).powf(gamma - 1.0)
            }
        }));
        if cache.clamped[src] || d_r == 0.0 {
            depth.push(0.0);
            continue;
        }
        let inv_h = 1.0 / px.depth;
        let diff = inv_h - inv_focus;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_aperture += d_r * 0.5 * diff.abs();
        d_focus += d_r * 0.5 * settings.aperture * sign * inv_focus * inv_focus;
        depth.push(-d_r * 0.5 * settings.aperture * sign * inv_h * inv_h);
    }
    Ok(ScatterGrad {
        radiance,
        depth,
        aperture: d_aperture,
        focus: d_focus,
    })
}

/// Per-sample scattering reference.
///
/// Every sample of every source ray spreads its own volume-weighted radiance
/// over the CoC of its own depth, using the same soft kernel, neighborhood
/// cut and normalization as [`scatter_forward`] (circular aperture, linear
/// radiance). A sample contributes its kernel weight to `W` in proportion to
/// its share of the ray's total volume weight, so a ray with a single
/// non-zero volume coefficient behaves exactly like its concentrated pixel.
/// Scattered light keeps the transmittance of its source ray.
///
/// `grid` is row-major, `width` x `height`; returns the `interior` window.
pub fn naive_dof_render(
    grid: &[RaySamples],
    width: usize,
    height: usize,
    interior: PixelRect,
    aperture: f64,
    focus: f64,
    max_radius: f64,
) -> Result<Image> {
    if grid.len() != width * height {
        return Err(Error::shape(width * height, grid.len()));
    }
    let settings = ScatterSettings {
        aperture,
        focus,
        shape: ApertureShape::Circular,
        gamma: 1.0,
        max_radius,
    };
    settings.validate()?;
    let mut weight = vec![0.0; interior.area()];
    let mut light = vec![[0.0; 3]; interior.area()];

    let mut scatter = |sx: usize, sy: usize, depth: f64, share: f64, radiance: Rgb| {
        let (r, _) = settings.radius(depth);
        for ty in interior.y0..interior.y0 + interior.height {
            for tx in interior.x0..interior.x0 + interior.width {
                let ox = tx as f64 - sx as f64;
                let oy = ty as f64 - sy as f64;
                let l = (ox * ox + oy * oy).sqrt();
                if !(l < r + 1.0) {
                    continue;
                }
                let (w, _) = scatter_weight_with_grad(r, 1.0, l);
                let j = (ty - interior.y0) * interior.width + (tx - interior.x0);
                weight[j] += share * w;
                for k in 0..3 {
                    light[j][k] += w * radiance[k];
                }
            }
        }
    };

    for sy in 0..height {
        for sx in 0..width {
            let samples = &grid[sy * width + sx];
            let coeffs = volume_coefficients(samples);
            let total: f64 = coeffs.iter().sum();
            if total < EMPTY_RAY_EPS {
                scatter(sx, sy, samples.far, 1.0, [0.0; 3]);
                continue;
            }
            for (i, &kv) in coeffs.iter().enumerate() {
                let c = samples.colors[i];
                scatter(sx, sy, samples.depths[i], kv / total, [kv * c[0], kv * c[1], kv * c[2]]);
            }
        }
    }
    let data = light.iter().zip(&weight).map(|(i, &w)| i.map(|v| v / w)).collect();
    Image::from_data(interior.width, interior.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::concentrate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings(aperture: f64, focus: f64, gamma: f64) -> ScatterSettings {
        ScatterSettings {
            aperture,
            focus,
            shape: ApertureShape::Circular,
            gamma,
            max_radius: 6.0,
        }
    }

    fn random_patch(rng: &mut ChaCha8Rng, side: usize, guard: usize) -> ConcentratedPatch {
        let pixels = (0..side * side)
            .map(|_| ConcentratedPixel {
                radiance: [
                    rng.gen_range(0.05..1.0),
                    rng.gen_range(0.05..1.0),
                    rng.gen_range(0.05..1.0),
                ],
                depth: rng.gen_range(0.6..3.5),
                total_weight: 1.0,
            })
            .collect();
        ConcentratedPatch::with_guard(side, side, pixels, guard).unwrap()
    }

    #[test]
    fn zero_aperture_is_identity_with_unit_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = random_patch(&mut rng, 20, 6);
        let out = scatter_forward(&patch, &settings(0.0, 2.0, 1.0)).unwrap();
        assert_eq!(out.image, patch.interior_radiance());

        let out = scatter_forward(&patch, &settings(0.0, 2.0, 2.2)).unwrap();
        let roundtrip = gamma_decode(&gamma_encode(&patch.interior_radiance(), 2.2).unwrap(), 2.2).unwrap();
        assert_eq!(out.image, roundtrip);
    }

    #[test]
    fn flat_field_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut patch = random_patch(&mut rng, 22, 6);
        for p in &mut patch.pixels {
            p.radiance = [0.3, 0.6, 0.9];
        }
        for shape in [ApertureShape::Circular, ApertureShape::polygonal(6, 0.4).unwrap()] {
            let s = ScatterSettings {
                shape,
                ..settings(8.0, 1.3, 2.2)
            };
            let out = scatter_forward(&patch, &s).unwrap();
            for p in &out.image.data {
                for k in 0..3 {
                    assert!((p[k] - [0.3, 0.6, 0.9][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn accumulators_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patch = random_patch(&mut rng, 16, 6);
        let out = scatter_forward(&patch, &settings(5.0, 1.5, 2.2)).unwrap();
        let acc = out.cache.accumulators();
        assert!(acc.weights.iter().all(|&w| w > 0.0));
        assert!(acc.radiance.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn gamma_examples() {
        let img = Image::filled(2, 2, [0.5, 0.25, 1.0]);
        assert_eq!(gamma_encode(&img, 1.0).unwrap(), img);
        assert!((gamma_encode(&img, 2.0).unwrap().data[0][0] - 0.25).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rand_img = Image::from_fn(8, 8, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let rt = gamma_decode(&gamma_encode(&rand_img, 2.2).unwrap(), 2.2).unwrap();
        assert!(rt.max_abs_diff(&rand_img) < 1e-12);
        let neg = Image::filled(1, 1, [-0.1, 0.0, 0.0]);
        assert!(gamma_encode(&neg, 2.2).is_err());
        assert!(gamma_decode(&neg, 2.2).is_err());
    }

    #[test]
    fn rejects_invalid_settings_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patch = random_patch(&mut rng, 14, 6);
        assert!(scatter_forward(&patch, &settings(-1.0, 2.0, 1.0)).is_err());
        assert!(scatter_forward(&patch, &settings(1.0, 0.0, 1.0)).is_err());
        assert!(scatter_forward(&patch, &settings(1.0, 2.0, 0.0)).is_err());
        let out = scatter_forward(&patch, &settings(1.0, 2.0, 1.0)).unwrap();
        let wrong = Image::new(3, 3);
        assert!(scatter_backward(&patch, &settings(1.0, 2.0, 1.0), &out.cache, &wrong).is_err());
    }

    fn loss(patch: &ConcentratedPatch, s: &ScatterSettings, weights: &Image) -> f64 {
        let out = scatter_forward(patch, s).unwrap();
        out.image
            .data
            .iter()
            .zip(&weights.data)
            .map(|(a, w)| a[0] * w[0] + a[1] * w[1] + a[2] * w[2])
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patch = random_patch(&mut rng, 16, 4);
        let s = ScatterSettings {
            max_radius: 4.0,
            ..settings(3.0, 1.4, 2.2)
        };
        let weights = Image::from_fn(8, 8, |_, _| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        });
        let out = scatter_forward(&patch, &s).unwrap();
        let g = scatter_backward(&patch, &s, &out.cache, &weights).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * h);
            // rounding noise of the central difference is ~1e-9 here
            assert!(
                (analytic - numeric).abs() <= 1e-5 * numeric.abs() + 1e-9,
                "{what}: {analytic} vs {numeric}"
            );
        };
        check(
            g.aperture,
            loss(
                &patch,
                &ScatterSettings {
                    aperture: s.aperture + h,
                    ..s
                },
                &weights,
            ),
            loss(
                &patch,
                &ScatterSettings {
                    aperture: s.aperture - h,
                    ..s
                },
                &weights,
            ),
            "K",
        );
        check(
            g.focus,
            loss(
                &patch,
                &ScatterSettings {
                    focus: s.focus + h,
                    ..s
                },
                &weights,
            ),
            loss(
                &patch,
                &ScatterSettings {
                    focus: s.focus - h,
                    ..s
                },
                &weights,
            ),
            "F",
        );
        for &i in &[0usize, 17, 40, 100, 135, 255] {
            let mut p = patch.clone();
            p.pixels[i].depth += h;
            let mut m = patch.clone();
            m.pixels[i].depth -= h;
            check(g.depth[i], loss(&p, &s, &weights), loss(&m, &s, &weights), "depth");
            for k in 0..3 {
                let mut p = patch.clone();
                p.pixels[i].radiance[k] += h;
                let mut m = patch.clone();
                m.pixels[i].radiance[k] -= h;
                check(
                    g.radiance[i][k],
                    loss(&p, &s, &weights),
                    loss(&m, &s, &weights),
                    "radiance",
                );
            }
        }
    }

    #[test]
    fn naive_renderer_matches_on_single_surface_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (side, guard) = (14, 5);
        let mut grid = Vec::new();
        let mut pixels = Vec::new();
        for _ in 0..side * side {
            let depths: Vec<f64> = (0..8).map(|i| 0.6 + 0.4 * i as f64).collect();
            let hit = rng.gen_range(0..8);
            let alphas = (0..8)
                .map(|i| if i == hit { rng.gen_range(0.0..0.9) } else { 1.0 })
                .collect();
            let colors = (0..8).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let s = RaySamples {
                lengths: crate::volume::segment_lengths(&depths, 4.0),
                depths,
                colors,
                alphas,
                near: 0.5,
                far: 4.0,
            };
            pixels.push(concentrate(&s));
            grid.push(s);
        }
        let patch = ConcentratedPatch::with_guard(side, side, pixels, guard).unwrap();
        let s = ScatterSettings {
            max_radius: 5.0,
            ..settings(4.0, 1.7, 1.0)
        };
        let fast = scatter_forward(&patch, &s).unwrap().image;
        let slow = naive_dof_render(&grid, side, side, patch.interior, 4.0, 1.7, 5.0).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-10);
    }
}
