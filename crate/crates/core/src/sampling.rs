//! Camera rays and training batches: random rays for pinhole pretraining and
//! anchor-grid patches (with a guard band) for defocus training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::raster::Rgb;
use crate::scatter::PixelRect;
use crate::volume::Ray;

/// Pinhole camera: OpenCV axes (x right, y down, z forward), pixel centers at
/// integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major camera-to-world rigid transform.
    pub camera_to_world: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl CameraModel {
    /// Intrinsics with a centered principal point.
    pub fn centered(
        width: usize,
        height: usize,
        focal: f64,
        camera_to_world: [[f64; 4]; 4],
        near: f64,
        far: f64,
    ) -> Self {
        CameraModel {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            camera_to_world,
            width,
            height,
            near,
            far,
        }
    }

    /// Pose at `eye` whose optical axis points at `target`; the camera's y axis
    /// stays in the plane spanned by the view direction and world +y.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> [[f64; 4]; 4] {
        let z = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let x = normalize(cross([0.0, 1.0, 0.0], z));
        let y = cross(z, x);
        [
            [x[0], y[0], z[0], eye[0]],
            [x[1], y[1], z[1], eye[1]],
            [x[2], y[2], z[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        let m = &self.camera_to_world;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn optical_axis(&self) -> [f64; 3] {
        let m = &self.camera_to_world;
        [m[0][2], m[1][2], m[2][2]]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Validation(format!(
                "need 0 < near < far, got {} and {}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image dimensions must be non-zero".into()));
        }
        let m = &self.camera_to_world;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose has non-finite entries".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = (0..3).map(|k| m[k][i] * m[k][j]).sum::<f64>();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (d - expected).abs() > 1e-6 {
                    return Err(Error::Validation(format!(
                        "rotation block is not orthonormal (R^T R [{i}][{j}] = {d})"
                    )));
                }
            }
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Validation("last pose row must be [0, 0, 0, 1]".into()));
        }
        Ok(())
    }
}

/// Ray through the center of pixel `(u, v)`. Coordinates outside the image
/// extend the sensor plane and still give valid rays.
pub fn generate_ray(camera: &CameraModel, u: i64, v: i64) -> Ray {
    let sensor = [
        (u as f64 - camera.cx) / camera.fx,
        (v as f64 - camera.cy) / camera.fy,
        1.0,
    ];
    let depth_scale = dot(sensor, sensor).sqrt();
    let local = normalize(sensor);
    let m = &camera.camera_to_world;
    let d = normalize([
        m[0][0] * local[0] + m[0][1] * local[1] + m[0][2] * local[2],
        m[1][0] * local[0] + m[1][1] * local[1] + m[1][2] * local[2],
        m[2][0] * local[0] + m[2][1] * local[1] + m[2][2] * local[2],
    ]);
    Ray {
        origin: camera.center(),
        direction: d,
        near: camera.near,
        far: camera.far,
        depth_scale,
        pixel: (u, v),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<Rgb>,
    pub views: Vec<usize>,
}

/// Uniform draw over all (training view, pixel) pairs.
pub fn random_ray_batch(dataset: &SceneDataset, batch_size: usize, seed: u64) -> Result<RayBatch> {
    let train = dataset.train_indices();
    if train.is_empty() {
        return Err(Error::Validation("dataset has no training views".into()));
    }
    let (w, h) = dataset.image_size();
    let per_view = w * h;
    let total = train.len() * per_view;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = RayBatch {
        rays: Vec::with_capacity(batch_size),
        targets: Vec::with_capacity(batch_size),
        views: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let flat = rng.gen_range(0..total);
        let view_idx = train[flat / per_view];
        let pixel = flat % per_view;
        let (x, y) = (pixel % w, pixel / w);
        let view = &dataset.views[view_idx];
        batch.rays.push(generate_ray(&view.camera, x as i64, y as i64));
        batch.targets.push(view.image.get(x, y));
        batch.views.push(view_idx);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Side of the supervised square.
    pub patch: usize,
    /// Spacing of the anchor lattice.
    pub anchor: usize,
    /// Extra rendered border on every side.
    pub guard: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.anchor == 0 {
            return Err(Error::Config(format!(
                "patch size and anchor stride must be >= 1, got {} and {}",
                self.patch, self.anchor
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.patch + 2 * self.guard
    }

    /// Number of lattice anchors `floor((len - patch) / anchor) + 1` per axis,
    /// multiplied over both axes.
    pub fn regular_anchor_count(&self, width: usize, height: usize) -> usize {
        let axis = |len: usize| {
            if len < self.patch {
                0
            } else {
                (len - self.patch) / self.anchor + 1
            }
        };
        axis(width) * axis(height)
    }

    /// Top-left corners along one axis: the lattice `0, A, 2A, ...` plus a
    /// final corner snapped to `len - patch` when the lattice misses the tail.
    pub fn axis_corners(&self, len: usize) -> Vec<usize> {
        if len < self.patch {
            return Vec::new();
        }
        let last = len - self.patch;
        let mut out: Vec<usize> = (0..=last).step_by(self.anchor).collect();
        if *out.last().unwrap() != last {
            out.push(last);
        }
        out
    }

    pub fn anchors(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let xs = self.axis_corners(width);
        let ys = self.axis_corners(height);
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub view: usize,
    /// Supervised pixels in image coordinates.
    pub interior: PixelRect,
    /// Row-major `grid_side x grid_side` rays including the guard band.
    pub rays: Vec<Ray>,
    pub grid_side: usize,
    pub guard: usize,
    /// Interior targets, row-major.
    pub targets: Vec<Rgb>,
}

/// One patch of one training view, chosen uniformly over (view, anchor).
pub fn patch_batch(dataset: &SceneDataset, spec: &PatchSpec, seed: u64) -> Result<PatchBatch> {
    spec.validate()?;
    let train = dataset.train_indices();
    if train.is_empty() {
        return Err(Error::Validation("dataset has no training views".into()));
    }
    let (w, h) = dataset.image_size();
    if w < spec.patch || h < spec.patch {
        return Err(Error::Config(format!(
            "image {w}x{h} is smaller than the {0}x{0} patch",
            spec.patch
        )));
    }
    let anchors = spec.anchors(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view = train[rng.gen_range(0..train.len())];
    let (x0, y0) = anchors[rng.gen_range(0..anchors.len())];
    let camera = &dataset.views[view].camera;
    let side = spec.grid_side();
    let g = spec.guard as i64;
    let mut rays = Vec::with_capacity(side * side);
    for gy in 0..side as i64 {
        for gx in 0..side as i64 {
            rays.push(generate_ray(camera, x0 as i64 + gx - g, y0 as i64 + gy - g));
        }
    }
    let image = &dataset.views[view].image;
    let targets = (0..spec.patch)
        .flat_map(|y| (0..spec.patch).map(move |x| (x, y)))
        .map(|(x, y)| image.get(x0 + x, y0 + y))
        .collect();
    Ok(PatchBatch {
        view,
        interior: PixelRect {
            x0,
            y0,
            width: spec.patch,
            height: spec.patch,
        },
        rays,
        grid_side: side,
        guard: spec.guard,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> [[f64; 4]; 4] {
        [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    fn camera() -> CameraModel {
        CameraModel {
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 30.0,
            camera_to_world: CameraModel::look_at([0.2, -0.1, 0.0], [0.0, 0.0, 2.0]),
            width: 64,
            height: 64,
            near: 0.5,
            far: 4.0,
        }
    }

    #[test]
    fn principal_point_looks_down_the_axis() {
        let cam = camera();
        let ray = generate_ray(&cam, 32, 30);
        let axis = cam.optical_axis();
        for k in 0..3 {
            assert!((ray.direction[k] - axis[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn directions_are_unit_and_adjacent_pixels_differ_by_one_over_f() {
        let cam = camera();
        for u in -5..70 {
            for v in (-5..70).step_by(7) {
                let d = generate_ray(&cam, u, v).direction;
                assert!((dot(d, d).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        let a = generate_ray(&cam, 32, 30).direction;
        let b = generate_ray(&cam, 33, 30).direction;
        let angle = dot(a, b).clamp(-1.0, 1.0).acos();
        assert!((angle - 1.0 / 60.0).abs() < 1e-5, "{angle}");
    }

    #[test]
    fn pose_validation() {
        let mut cam = CameraModel::centered(8, 8, 8.0, identity(), 0.5, 4.0);
        assert!(cam.validate().is_ok());
        cam.camera_to_world[0][1] = 0.2;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn anchor_counts() {
        let spec = PatchSpec {
            patch: 48,
            anchor: 16,
            guard: 0,
        };
        assert_eq!(spec.regular_anchor_count(497, 331), 522);
        // Tail anchors snapped to the border on both axes.
        assert_eq!(spec.anchors(497, 331).len(), 30 * 19);
        let desk = PatchSpec {
            patch: 32,
            anchor: 8,
            guard: 12,
        };
        assert_eq!(desk.anchors(64, 64).len(), desk.regular_anchor_count(64, 64));
        assert_eq!(desk.grid_side(), 56);
    }

    #[test]
    fn anchors_cover_every_pixel() {
        for (w, h, p, a) in [(64, 64, 32, 8), (70, 45, 16, 16), (497, 331, 48, 16), (33, 33, 10, 7)] {
            let spec = PatchSpec {
                patch: p,
                anchor: a,
                guard: 0,
            };
            let mut covered = vec![false; w * h];
            for (x0, y0) in spec.anchors(w, h) {
                assert!(x0 + p <= w && y0 + p <= h);
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        covered[y * w + x] = true;
                    }
                }
            }
            assert!(covered.iter().all(|&c| c), "{w}x{h} p={p} a={a}");
        }
    }
}
