//! Synthetic scenes with analytic ground truth, shallow depth-of-field
//! training sets with known optics, and dataset files.
//!
//! A scene is a stack of thin, emissive, fronto-parallel slabs. A ray picks
//! up a slab's texture and lateral coverage where it crosses the slab's
//! mid-plane; inside the slab the density is constant. This makes the
//! layered closed form exact and gives the quadrature route the same colors.
//! Ground-truth depth maps place each layer at its mid-plane.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! poses.json            per-view pose, intrinsics, split and optics
//! scene.toml            generator input (synthetic datasets only)
//! images/<view>.{bin,png}
//! aif/<view>.{bin,png}  all-in-focus ground truth, when known
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_binary, read_png, write_binary, write_png};
use crate::optics::ApertureShape;
use crate::raster::{Image, Rgb};
use crate::sampling::{generate_ray, CameraModel};
use crate::scatter::{scatter_forward, ConcentratedPatch, PixelRect, ScatterSettings};
use crate::volume::{composite_pinhole, stratified_sample, ConcentratedPixel, Ray, RaySamples, EMPTY_RAY_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Two-color checkerboard with square cells of side `cell`.
    Checker {
        colors: [Rgb; 2],
        cell: f64,
        phase: [f64; 2],
    },
    /// Sinusoidal blend between two colors along the direction `angle`.
    Gradient {
        from: Rgb,
        to: Rgb,
        frequency: f64,
        angle: f64,
        phase: f64,
    },
}

impl Texture {
    /// Color at layer-local coordinates.
    pub fn color(&self, x: f64, y: f64) -> Rgb {
        match self {
            Texture::Checker { colors, cell, phase } => {
                let i = ((x + phase[0]) / cell).floor() as i64;
                let j = ((y + phase[1]) / cell).floor() as i64;
                colors[(i + j).rem_euclid(2) as usize]
            }
            Texture::Gradient {
                from,
                to,
                frequency,
                angle,
                phase,
            } => {
                let s = x * angle.cos() + y * angle.sin();
                let t = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * frequency * s + phase).sin();
                std::array::from_fn(|k| from[k] + t * (to[k] - from[k]))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (colors, ok) = match self {
            Texture::Checker { colors, cell, phase } => (
                colors.to_vec(),
                *cell > 0.0 && cell.is_finite() && phase.iter().all(|p| p.is_finite()),
            ),
            Texture::Gradient {
                from,
                to,
                frequency,
                angle,
                phase,
            } => (
                vec![*from, *to],
                frequency.is_finite() && angle.is_finite() && phase.is_finite(),
            ),
        };
        if !ok {
            return Err(Error::Config(
                "texture parameters must be finite and cells positive".into(),
            ));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("texture colors must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// World z of the mid-plane.
    pub depth: f64,
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub thickness: f64,
    pub density: f64,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub near: f64,
    pub far: f64,
    /// Sorted by depth, front to back.
    pub layers: Vec<Layer>,
}

/// Slab of `layer` crossed by `ray`, as an axial depth interval clipped to
/// the ray's range, plus the texture color. `None` if the ray misses.
fn slab_crossing(layer: &Layer, ray: &Ray) -> Option<(f64, f64, Rgb)> {
    // world z advances by this much per unit of axial depth
    let rate = ray.direction[2] * ray.depth_scale;
    if !(rate > 0.0) {
        return None;
    }
    let mid = ray.at((layer.depth - ray.origin[2]) / rate);
    let (lx, ly) = (mid[0] - layer.center[0], mid[1] - layer.center[1]);
    if lx.abs() > layer.half_extent[0] || ly.abs() > layer.half_extent[1] {
        return None;
    }
    let half = 0.5 * layer.thickness;
    let h0 = ((layer.depth - half - ray.origin[2]) / rate).max(ray.near);
    let h1 = ((layer.depth + half - ray.origin[2]) / rate).min(ray.far);
    if !(h1 > h0) {
        return None;
    }
    Some((h0, h1, layer.texture.color(lx, ly)))
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < near < far, got {} and {}",
                self.near, self.far
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let half = 0.5 * l.thickness;
            if !(l.thickness > 0.0 && l.density > 0.0 && l.density.is_finite()) {
                return Err(Error::Config(format!(
                    "layer {i}: thickness and density must be positive"
                )));
            }
            if !(l.depth - half > self.near && l.depth + half < self.far) {
                return Err(Error::Config(format!("layer {i}: slab must lie within (near, far)")));
            }
            if !(l.half_extent[0] > 0.0 && l.half_extent[1] > 0.0) || l.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("layer {i}: extent must be positive")));
            }
            l.texture.validate()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if !(pair[0].depth + 0.5 * pair[0].thickness < pair[1].depth - 0.5 * pair[1].thickness) {
                return Err(Error::Config(format!(
                    "layers {i} and {} must be sorted by depth and must not overlap",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Two checker layers at depths 1 and 3 seen from around the origin.
    pub fn recovery_default() -> Self {
        AnalyticScene {
            near: 0.5,
            far: 4.0,
            layers: vec![
                Layer {
                    depth: 1.0,
                    center: [0.0, 0.0],
                    half_extent: [0.25, 0.25],
                    thickness: 0.1,
                    density: 400.0,
                    texture: Texture::Checker {
                        colors: [[0.95, 0.4, 0.25], [0.2, 0.55, 0.3]],
                        cell: 0.125,
                        phase: [0.0, 0.0],
                    },
                },
                Layer {
                    depth: 3.0,
                    center: [0.0, 0.0],
                    half_extent: [3.0, 3.0],
                    thickness: 0.1,
                    density: 400.0,
                    texture: Texture::Checker {
                        colors: [[0.85, 0.8, 0.35], [0.15, 0.25, 0.6]],
                        cell: 0.5,
                        phase: [0.0, 0.0],
                    },
                },
            ],
        }
    }

    /// Mean of the layer centers.
    pub fn centroid(&self) -> [f64; 3] {
        let n = self.layers.len().max(1) as f64;
        let mut c = [0.0; 3];
        for l in &self.layers {
            c[0] += l.center[0] / n;
            c[1] += l.center[1] / n;
            c[2] += l.depth / n;
        }
        c
    }

    /// Density and color at axial depth `depth` on `ray`.
    pub fn sample(&self, ray: &Ray, depth: f64) -> (f64, Rgb) {
        for layer in &self.layers {
            if let Some((h0, h1, color)) = slab_crossing(layer, ray) {
                if depth >= h0 && depth <= h1 {
                    return (layer.density, color);
                }
            }
        }
        (0.0, [0.0; 3])
    }

    /// Closed-form layered compositing of one ray. The depth is the
    /// weight-averaged axial depth of the crossed mid-planes, so a layer
    /// focused at its nominal depth has an exactly zero defocus radius.
    pub fn trace(&self, ray: &Ray) -> ConcentratedPixel {
        let mut transmittance = 1.0;
        let mut radiance = [0.0; 3];
        let mut depth_sum = 0.0;
        let mut total = 0.0;
        for layer in &self.layers {
            let Some((h0, h1, color)) = slab_crossing(layer, ray) else {
                continue;
            };
            // absorption per unit of axial depth
            let rate = layer.density * ray.depth_scale;
            let absorbed = -(-rate * (h1 - h0)).exp_m1();
            let w = transmittance * absorbed;
            let mid = ((layer.depth - ray.origin[2]) / (ray.direction[2] * ray.depth_scale)).clamp(h0, h1);
            for k in 0..3 {
                radiance[k] += w * color[k];
            }
            depth_sum += w * mid;
            total += w;
            transmittance *= 1.0 - absorbed;
        }
        if total < EMPTY_RAY_EPS {
            return ConcentratedPixel {
                radiance: [0.0; 3],
                depth: ray.far,
                total_weight: total,
            };
        }
        ConcentratedPixel {
            radiance,
            depth: depth_sum / total,
            total_weight: total,
        }
    }
}

/// Closed-form all-in-focus render of a camera's sensor extended by `guard`
/// pixels on every side.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRender {
    pub image: Image,
    /// Concentration depth per pixel, row-major.
    pub depth: Vec<f64>,
    pub guard: usize,
}

pub fn render_layers(scene: &AnalyticScene, camera: &CameraModel, guard: usize) -> Result<LayerRender> {
    scene.validate()?;
    camera.validate()?;
    let (w, h) = (camera.width + 2 * guard, camera.height + 2 * guard);
    let g = guard as i64;
    let mut depth = Vec::with_capacity(w * h);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let px = scene.trace(&generate_ray(camera, x - g, y - g));
            data.push(px.radiance);
            depth.push(px.depth);
        }
    }
    Ok(LayerRender {
        image: Image::from_data(w, h, data)?,
        depth,
        guard,
    })
}

/// Pinhole render by numerical quadrature of the volume rendering integral
/// with `n_samples` midpoint samples per ray.
pub fn render_ground_truth(scene: &AnalyticScene, camera: &CameraModel, n_samples: usize) -> Result<Image> {
    scene.validate()?;
    camera.validate()?;
    let mut data = Vec::with_capacity(camera.width * camera.height);
    for y in 0..camera.height as i64 {
        for x in 0..camera.width as i64 {
            let ray = generate_ray(camera, x, y);
            let depths = stratified_sample(&ray, n_samples, None)?;
            let (densities, colors): (Vec<f64>, Vec<Rgb>) = depths.iter().map(|&d| scene.sample(&ray, d)).unzip();
            data.push(composite_pinhole(&RaySamples::from_densities(
                &ray, depths, colors, &densities,
            )));
        }
    }
    Image::from_data(camera.width, camera.height, data)
}

/// Defocuses an all-in-focus canvas with the model's own scatter operator.
/// `aif` and `depth` cover the sensor plus `guard` pixels per side; the
/// result is the sensor-sized interior.
pub fn apply_forward_dof(aif: &Image, depth: &[f64], guard: usize, settings: &ScatterSettings) -> Result<Image> {
    if depth.len() != aif.data.len() {
        return Err(Error::shape(aif.data.len(), depth.len()));
    }
    if let Some(d) = depth.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Domain(format!("depth map must be positive, found {d}")));
    }
    let pixels = aif
        .data
        .iter()
        .zip(depth)
        .map(|(&radiance, &depth)| ConcentratedPixel {
            radiance,
            depth,
            total_weight: 1.0,
        })
        .collect();
    let interior = PixelRect {
        x0: guard,
        y0: guard,
        width: aif.width.saturating_sub(2 * guard),
        height: aif.height.saturating_sub(2 * guard),
    };
    let patch = ConcentratedPatch::new(aif.width, aif.height, pixels, interior)?;
    Ok(scatter_forward(&patch, settings)?.image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthOptics {
    pub aperture: f64,
    pub focus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: CameraModel,
    /// The observed (possibly defocused) image.
    pub image: Image,
    pub all_in_focus: Option<Image>,
    pub split: Split,
    pub optics: Option<GroundTruthOptics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryPattern {
    /// Even training views focus on the front layer, odd ones on the back.
    AlternatingFocus,
    /// Even training views use the wide aperture, odd ones a pinhole.
    AlternatingAperture,
}

impl std::str::FromStr for RecoveryPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating_focus" => Ok(RecoveryPattern::AlternatingFocus),
            "alternating_aperture" => Ok(RecoveryPattern::AlternatingAperture),
            other => Err(Error::Config(format!(
                "unknown pattern '{other}' (expected alternating_focus or alternating_aperture)"
            ))),
        }
    }
}

/// Capture setup of a recovery dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySpec {
    pub pattern: RecoveryPattern,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Wide aperture `K*`.
    pub aperture: f64,
    pub focus_near: f64,
    pub focus_far: f64,
    pub gamma: f64,
    pub max_radius: f64,
    pub shape: ApertureShape,
    /// Radius of the ring of training cameras around the origin.
    pub baseline: f64,
    /// Uniform per-camera position noise.
    pub jitter: f64,
}

impl Default for RecoverySpec {
    fn default() -> Self {
        RecoverySpec {
            pattern: RecoveryPattern::AlternatingFocus,
            train_views: 8,
            test_views: 2,
            width: 64,
            height: 64,
            focal: 64.0,
            aperture: 6.0,
            focus_near: 1.0,
            focus_far: 3.0,
            gamma: 2.2,
            max_radius: 12.0,
            shape: ApertureShape::Circular,
            baseline: 0.15,
            jitter: 0.02,
        }
    }
}

impl RecoverySpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_views < 2 {
            return Err(Error::Config(format!(
                "need at least 2 training views, got {}",
                self.train_views
            )));
        }
        if self.test_views < 1 {
            return Err(Error::Config("need at least 1 test view".into()));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::Config("image size and focal length must be positive".into()));
        }
        if !(self.baseline >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::Config("baseline and jitter must be non-negative".into()));
        }
        ScatterSettings {
            aperture: self.aperture,
            focus: self.focus_near,
            shape: self.shape,
            gamma: self.gamma,
            max_radius: self.max_radius,
        }
        .validate()?;
        if !(self.focus_far > 0.0) {
            return Err(Error::Config("focus distances must be positive".into()));
        }
        Ok(())
    }

    /// Ground-truth optics of training view `i`.
    pub fn train_optics(&self, i: usize) -> GroundTruthOptics {
        let even = i.is_multiple_of(2);
        match self.pattern {
            RecoveryPattern::AlternatingFocus => GroundTruthOptics {
                aperture: self.aperture,
                focus: if even { self.focus_near } else { self.focus_far },
            },
            RecoveryPattern::AlternatingAperture => GroundTruthOptics {
                aperture: if even { self.aperture } else { 0.0 },
                focus: self.focus_near,
            },
        }
    }

    pub fn scatter_settings(&self, optics: GroundTruthOptics) -> ScatterSettings {
        ScatterSettings {
            aperture: optics.aperture,
            focus: optics.focus,
            shape: self.shape,
            gamma: self.gamma,
            max_radius: self.max_radius,
        }
    }
}

/// Everything needed to regenerate a synthetic dataset; also the format of
/// `scene.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default)]
    pub seed: u64,
    pub scene: AnalyticScene,
    #[serde(default)]
    pub recovery: RecoverySpec,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource {
            seed: 0,
            scene: AnalyticScene::recovery_default(),
            recovery: RecoverySpec::default(),
        }
    }
}

impl SyntheticSource {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::parse(path, format!("line {line}"), e.message())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize scene spec: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<View>,
    pub source: Option<SyntheticSource>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::Validation("dataset has no views".into()))?;
        let (w, h) = (first.image.width, first.image.height);
        for v in &self.views {
            v.camera
                .validate()
                .map_err(|e| Error::Validation(format!("view {}: {e}", v.name)))?;
            if v.image.width != w || v.image.height != h {
                return Err(Error::Validation(format!(
                    "view {} is {}x{}, expected {w}x{h}",
                    v.name, v.image.width, v.image.height
                )));
            }
            if v.camera.width != w || v.camera.height != h {
                return Err(Error::Validation(format!(
                    "view {}: camera size differs from its image",
                    v.name
                )));
            }
            if let Some(aif) = &v.all_in_focus {
                if aif.width != w || aif.height != h {
                    return Err(Error::Validation(format!(
                        "view {}: all-in-focus image size differs",
                        v.name
                    )));
                }
            }
        }
        if self.test_indices().is_empty() {
            return Err(Error::Validation("dataset needs at least one test view".into()));
        }
        Ok(())
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(Split::Test)
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].split == split)
            .collect()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.views.first().map_or((0, 0), |v| (v.image.width, v.image.height))
    }

    /// Near and far bounds shared by all views.
    pub fn depth_range(&self) -> (f64, f64) {
        let near = self.views.iter().map(|v| v.camera.near).fold(f64::INFINITY, f64::min);
        let far = self
            .views
            .iter()
            .map(|v| v.camera.far)
            .fold(f64::NEG_INFINITY, f64::max);
        (near, far)
    }
}

/// Camera `index` of a recovery capture: training cameras on a ring, test
/// cameras on a half-size ring in between.
fn recovery_eye(spec: &RecoverySpec, index: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    use std::f64::consts::TAU;
    let (radius, angle) = if index < spec.train_views {
        (spec.baseline, TAU * index as f64 / spec.train_views as f64)
    } else {
        let j = index - spec.train_views;
        (0.5 * spec.baseline, TAU * (j as f64 + 0.5) / spec.test_views as f64)
    };
    let mut jitter = || rng.gen_range(-1.0..=1.0) * spec.jitter;
    [radius * angle.cos() + jitter(), radius * angle.sin() + jitter(), 0.0]
}

/// Builds a shallow depth-of-field dataset whose training images are the
/// model's own defocus operator applied to the exact scene, so the true
/// optics are recoverable. Test views carry all-in-focus images.
pub fn make_recovery_dataset(scene: &AnalyticScene, spec: &RecoverySpec, seed: u64) -> Result<SceneDataset> {
    spec.validate()?;
    scene.validate()?;
    if scene.layers.len() < 2 {
        return Err(Error::Config("a recovery scene needs at least two layers".into()));
    }
    let target = scene.centroid();
    let guard = spec.max_radius.ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(spec.train_views + spec.test_views);
    for index in 0..spec.train_views + spec.test_views {
        let eye = recovery_eye(spec, index, &mut rng);
        let camera = CameraModel::centered(
            spec.width,
            spec.height,
            spec.focal,
            CameraModel::look_at(eye, target),
            scene.near,
            scene.far,
        );
        let canvas = render_layers(scene, &camera, guard)?;
        let aif = canvas.image.crop(guard, guard, spec.width, spec.height);
        let view = if index < spec.train_views {
            let optics = spec.train_optics(index);
            View {
                name: format!("train_{index:03}"),
                camera,
                image: apply_forward_dof(&canvas.image, &canvas.depth, guard, &spec.scatter_settings(optics))?,
                all_in_focus: Some(aif),
                split: Split::Train,
                optics: Some(optics),
            }
        } else {
            View {
                name: format!("test_{:03}", index - spec.train_views),
                camera,
                image: aif.clone(),
                all_in_focus: Some(aif),
                split: Split::Test,
                optics: Some(GroundTruthOptics {
                    aperture: 0.0,
                    focus: spec.focus_near,
                }),
            }
        };
        views.push(view);
    }
    Ok(SceneDataset {
        views,
        source: Some(SyntheticSource {
            seed,
            scene: scene.clone(),
            recovery: spec.clone(),
        }),
    })
}

pub fn generate(source: &SyntheticSource) -> Result<SceneDataset> {
    make_recovery_dataset(&source.scene, &source.recovery, source.seed)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    format: u32,
    views: Vec<ViewRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    name: String,
    split: Split,
    /// Row-major 4x4.
    camera_to_world: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optics: Option<GroundTruthOptics>,
    #[serde(default)]
    all_in_focus: bool,
}

const POSE_FILE: &str = "poses.json";
const SCENE_FILE: &str = "scene.toml";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_image_pair(image: &Image, stem: &Path) -> Result<()> {
    write_binary(image, &stem.with_extension("bin"))?;
    write_png(image, &stem.with_extension("png"))
}

/// Prefers the exact binary file and falls back to the PNG.
fn read_image(stem: &Path) -> Result<Image> {
    let bin = stem.with_extension("bin");
    if bin.exists() {
        read_binary(&bin)
    } else {
        read_png(&stem.with_extension("png"))
    }
}

pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    create_dir(&dir.join("images"))?;
    let records = dataset
        .views
        .iter()
        .map(|v| {
            write_image_pair(&v.image, &dir.join("images").join(&v.name))?;
            if let Some(aif) = &v.all_in_focus {
                create_dir(&dir.join("aif"))?;
                write_image_pair(aif, &dir.join("aif").join(&v.name))?;
            }
            let c = &v.camera;
            Ok(ViewRecord {
                name: v.name.clone(),
                split: v.split,
                camera_to_world: c.camera_to_world.iter().flatten().copied().collect(),
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                near: c.near,
                far: c.far,
                optics: v.optics,
                all_in_focus: v.all_in_focus.is_some(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let poses = serde_json::to_string_pretty(&PoseFile {
        format: 1,
        views: records,
    })
    .map_err(|e| Error::Config(format!("cannot serialize poses: {e}")))?;
    let pose_path = dir.join(POSE_FILE);
    fs::write(&pose_path, poses + "\n").map_err(|e| Error::io(&pose_path, e))?;
    if let Some(source) = &dataset.source {
        let scene_path = dir.join(SCENE_FILE);
        fs::write(&scene_path, source.to_toml()?).map_err(|e| Error::io(&scene_path, e))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let pose_path = dir.join(POSE_FILE);
    let text = read_text(&pose_path)?;
    let poses: PoseFile = serde_json::from_str(&text).map_err(|e| Error::parse(&pose_path, "views", e))?;
    if poses.format != 1 {
        return Err(Error::parse(
            &pose_path,
            "format",
            format!("unsupported version {}", poses.format),
        ));
    }
    let mut views = Vec::with_capacity(poses.views.len());
    for (i, r) in poses.views.into_iter().enumerate() {
        let field = |name: &str| format!("views[{i}].{name}");
        if r.name.is_empty() || r.name.contains(['/', '\\']) || r.name.starts_with('.') {
            return Err(Error::parse(
                &pose_path,
                field("name"),
                format!("invalid view name '{}'", r.name),
            ));
        }
        let m: [f64; 16] = r
            .camera_to_world
            .as_slice()
            .try_into()
            .map_err(|_| Error::parse(&pose_path, field("camera_to_world"), "expected 16 entries"))?;
        let camera = CameraModel {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            camera_to_world: std::array::from_fn(|row| std::array::from_fn(|col| m[row * 4 + col])),
            width: r.width,
            height: r.height,
            near: r.near,
            far: r.far,
        };
        camera
            .validate()
            .map_err(|e| Error::Validation(format!("{}: {}: {e}", pose_path.display(), field("camera_to_world"))))?;
        let image = read_image(&dir.join("images").join(&r.name))?;
        let all_in_focus = if r.all_in_focus {
            Some(read_image(&dir.join("aif").join(&r.name))?)
        } else {
            None
        };
        views.push(View {
            name: r.name,
            camera,
            image,
            all_in_focus,
            split: r.split,
            optics: r.optics,
        });
    }
    let scene_path = dir.join(SCENE_FILE);
    let source = if scene_path.exists() {
        Some(SyntheticSource::from_toml(&read_text(&scene_path)?, &scene_path)?)
    } else {
        None
    };
    let dataset = SceneDataset { views, source };
    dataset.validate()?;
    Ok(dataset)
}

/// Path of a view's observed image inside a dataset directory.
pub fn image_path(dir: &Path, view: &str, extension: &str) -> PathBuf {
    dir.join("images").join(view).with_extension(extension)
}
