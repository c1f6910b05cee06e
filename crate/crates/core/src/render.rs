//! Rendering rays through the learned field, forward and backward.
//!
//! Rays are processed in fixed-size chunks. Each chunk is one batched field
//! evaluation and produces its own gradient buffer; buffers are summed in
//! chunk order, so results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::Result;
use crate::field::{FieldTape, RadianceFieldParams};
use crate::raster::{Image, Rgb};
use crate::sampling::{generate_ray, CameraModel};
use crate::scatter::{scatter_forward, ConcentratedPatch, ScatterSettings};
use crate::volume::{
    composite_backward, composite_pinhole, concentrate, concentrate_backward, stratified_sample, ConcentratedPixel,
    Ray, RaySamples,
};

/// Rays per field evaluation.
pub const CHUNK_RAYS: usize = 64;

/// splitmix64 finalizer; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stratified jitter: `None` samples stratum midpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jitter {
    pub seed: u64,
    /// Every ray uses the same stratum offsets instead of its own draw.
    pub shared: bool,
}

impl Jitter {
    fn ray_seed(&self, ray: usize) -> u64 {
        if self.shared {
            self.seed
        } else {
            mix_seed(self.seed, ray as u64)
        }
    }
}

/// Field outputs for one chunk of rays.
pub(crate) struct ChunkEval {
    pub tape: FieldTape,
    pub samples: Vec<RaySamples>,
}

pub(crate) fn eval_chunk(
    params: &RadianceFieldParams,
    rays: &[Ray],
    first_ray: usize,
    n_samples: usize,
    jitter: Option<Jitter>,
) -> Result<ChunkEval> {
    let mut positions = Vec::with_capacity(rays.len() * n_samples);
    let mut dirs = Vec::with_capacity(rays.len() * n_samples);
    let mut all_depths = Vec::with_capacity(rays.len());
    for (i, ray) in rays.iter().enumerate() {
        let seed = jitter.map(|j| j.ray_seed(first_ray + i));
        let depths = stratified_sample(ray, n_samples, seed)?;
        for &h in &depths {
            positions.push(ray.at(h));
            dirs.push(ray.direction);
        }
        all_depths.push(depths);
    }
    let tape = params.forward_batch(&positions, &dirs);
    let samples = rays
        .iter()
        .zip(all_depths)
        .enumerate()
        .map(|(i, (ray, depths))| {
            let span = i * n_samples..(i + 1) * n_samples;
            RaySamples::from_densities(ray, depths, tape.colors[span.clone()].to_vec(), &tape.densities[span])
        })
        .collect();
    Ok(ChunkEval { tape, samples })
}

/// Pushes per-ray cotangents on the rendered quantity through the volume
/// weights and the field, accumulating into `grads`.
pub(crate) fn backward_chunk(
    params: &RadianceFieldParams,
    eval: &ChunkEval,
    cotangents: &[(Rgb, f64)],
    concentrated: bool,
    grads: &mut [f64],
) -> Result<()> {
    let n_samples = eval.samples.first().map_or(0, |s| s.len());
    let mut d_color = Vec::with_capacity(eval.tape.n);
    let mut d_density = Vec::with_capacity(eval.tape.n);
    for (samples, &(d_rad, d_depth)) in eval.samples.iter().zip(cotangents) {
        let g = if concentrated {
            concentrate_backward(samples, d_rad, d_depth)?
        } else {
            composite_backward(samples, d_rad)?
        };
        d_color.extend_from_slice(&g.colors);
        d_density.extend(crate::volume::alpha_to_density_grad(samples, &g.alphas));
    }
    debug_assert_eq!(d_color.len(), eval.samples.len() * n_samples);
    params.backward_params(&eval.tape, &d_color, &d_density, grads)
}

fn chunked<T: Send>(rays: &[Ray], f: impl Fn(usize, &[Ray]) -> Result<Vec<T>> + Sync + Send) -> Result<Vec<T>> {
    let parts: Vec<Result<Vec<T>>> = rays
        .par_chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(c, chunk)| f(c * CHUNK_RAYS, chunk))
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Pinhole colors of `rays`.
pub fn render_pinhole(
    params: &RadianceFieldParams,
    rays: &[Ray],
    n_samples: usize,
    jitter: Option<Jitter>,
) -> Result<Vec<Rgb>> {
    chunked(rays, |first, chunk| {
        let eval = eval_chunk(params, chunk, first, n_samples, jitter)?;
        Ok(eval.samples.iter().map(composite_pinhole).collect())
    })
}

/// Concentrated radiance and depth of `rays`.
pub fn render_concentrated(
    params: &RadianceFieldParams,
    rays: &[Ray],
    n_samples: usize,
    jitter: Option<Jitter>,
) -> Result<Vec<ConcentratedPixel>> {
    chunked(rays, |first, chunk| {
        let eval = eval_chunk(params, chunk, first, n_samples, jitter)?;
        Ok(eval.samples.iter().map(concentrate).collect())
    })
}

/// Renders a full view. Without `optics`, or with a zero aperture, this is
/// the pinhole image; otherwise the view is defocused with a guard band of
/// virtual-sensor rays so that border pixels see their full neighborhood.
pub fn render_view(
    params: &RadianceFieldParams,
    camera: &CameraModel,
    n_samples: usize,
    optics: Option<&ScatterSettings>,
) -> Result<Image> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    match optics {
        Some(settings) if settings.aperture > 0.0 => {
            settings.validate()?;
            let guard = settings.reach();
            let (cw, ch) = (w + 2 * guard, h + 2 * guard);
            let g = guard as i64;
            let rays: Vec<Ray> = (0..ch as i64)
                .flat_map(|y| (0..cw as i64).map(move |x| (x, y)))
                .map(|(x, y)| generate_ray(camera, x - g, y - g))
                .collect();
            let pixels = render_concentrated(params, &rays, n_samples, None)?;
            let patch = ConcentratedPatch::with_guard(cw, ch, pixels, guard)?;
            Ok(scatter_forward(&patch, settings)?.image)
        }
        _ => {
            let rays: Vec<Ray> = (0..h as i64)
                .flat_map(|y| (0..w as i64).map(move |x| (x, y)))
                .map(|(x, y)| generate_ray(camera, x, y))
                .collect();
            Image::from_data(w, h, render_pinhole(params, &rays, n_samples, None)?)
        }
    }
}
