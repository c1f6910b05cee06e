use dofnerf::dataset::{apply_forward_dof, AnalyticScene};
use dofnerf::optics::ApertureShape;
use dofnerf::raster::Image;
use dofnerf::sampling::{generate_ray, CameraModel};
use dofnerf::scatter::{naive_dof_render, scatter_forward, ConcentratedPatch, PixelRect, ScatterSettings};
use dofnerf::volume::{concentrate, stratified_sample, RaySamples};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 41;
const GUARD: usize = 10;
const C: usize = (SIZE - 2 * GUARD) / 2;

/// A single white pixel on black, everything at depth 2 and focused at 1.
/// With this setup the scatter radius is `aperture / 4`.
fn point_bokeh(aperture: f64, shape: ApertureShape) -> Image {
    let mut aif = Image::new(SIZE, SIZE);
    aif.set(SIZE / 2, SIZE / 2, [1.0; 3]);
    let settings = ScatterSettings {
        aperture,
        focus: 1.0,
        shape,
        gamma: 1.0,
        max_radius: 8.0,
    };
    apply_forward_dof(&aif, &vec![2.0; SIZE * SIZE], GUARD, &settings).unwrap()
}

fn at(img: &Image, dx: i64, dy: i64) -> f64 {
    img.get((C as i64 + dx) as usize, (C as i64 + dy) as usize)[0]
}

#[test]
fn disc_reaches_half_maximum_at_its_radius() {
    let img = point_bokeh(16.0, ApertureShape::Circular);
    let peak = at(&img, 0, 0);
    let expected = 1.0 / (1.0 + 16.0f64.tanh());
    for (dx, dy) in [(4, 0), (0, 4), (-4, 0), (0, -4)] {
        assert!((at(&img, dx, dy) / peak - expected).abs() < 1e-12);
    }
    assert!(at(&img, 3, 0) > 0.95 * peak);
    assert!(at(&img, 5, 0) < 0.01 * peak);
    assert_eq!(at(&img, 6, 0), 0.0);
}

#[test]
fn square_aperture_bokeh_has_fourfold_symmetry() {
    let img = point_bokeh(20.0, ApertureShape::polygonal(4, 0.0).unwrap());
    let r = C as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let p = at(&img, dx, dy);
            assert!((p - at(&img, -dy, dx)).abs() < 1e-12, "({dx},{dy})");
            assert!((p - at(&img, -dx, -dy)).abs() < 1e-12, "({dx},{dy})");
        }
    }
    // A vertex sits on the x axis, so the diagonals are flat sides.
    assert!(at(&img, 5, 0) > 0.4 * at(&img, 0, 0));
    assert!(at(&img, 3, 3) < 0.1 * at(&img, 0, 0));
}

#[test]
fn hexagonal_bokeh_is_mirror_symmetric_and_longer_toward_its_vertices() {
    let img = point_bokeh(24.0, ApertureShape::polygonal(6, 0.0).unwrap());
    let r = C as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let p = at(&img, dx, dy);
            assert!((p - at(&img, -dx, dy)).abs() < 1e-12);
            assert!((p - at(&img, dx, -dy)).abs() < 1e-12);
        }
    }
    // Circumradius 6 along x, inradius 6 cos 30 = 5.2 along y.
    let peak = at(&img, 0, 0);
    assert!(at(&img, 6, 0) > 0.4 * peak);
    assert!(at(&img, 0, 6) < 0.01 * peak);
    let round = point_bokeh(24.0, ApertureShape::Circular);
    assert!((at(&round, 6, 0) - at(&round, 0, 6)).abs() < 1e-15);
}

#[test]
fn guard_band_of_the_clamp_radius_is_enough() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 40;
    let aif = Image::from_fn(n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let depth: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.5..4.0)).collect();
    let settings = ScatterSettings {
        aperture: 9.0,
        focus: 1.5,
        shape: ApertureShape::Circular,
        gamma: 2.2,
        max_radius: 3.5,
    };
    let g = settings.reach();
    let full = apply_forward_dof(&aif, &depth, g, &settings).unwrap();
    let (x0, y0, w) = (5, 7, 20);
    let sub_depth: Vec<f64> = (0..w * w).map(|i| depth[(y0 + i / w) * n + x0 + i % w]).collect();
    let patch = apply_forward_dof(&aif.crop(x0, y0, w, w), &sub_depth, g, &settings).unwrap();
    let inner = w - 2 * g;
    assert!(patch.max_abs_diff(&full.crop(x0, y0, inner, inner)) < 1e-14);
}

#[test]
fn concentrated_scatter_stays_close_to_naive_sample_scatter() {
    let scene = AnalyticScene::recovery_default();
    let (n, guard) = (40, 4);
    let camera = CameraModel::centered(
        n,
        n,
        n as f64,
        CameraModel::look_at([0.02, -0.03, 0.0], [0.0, 0.0, 2.0]),
        0.5,
        4.0,
    );
    let grid: Vec<RaySamples> = (0..n * n)
        .map(|i| {
            let ray = generate_ray(&camera, (i % n) as i64, (i / n) as i64);
            let depths = stratified_sample(&ray, 128, None).unwrap();
            let (densities, colors): (Vec<f64>, Vec<_>) = depths.iter().map(|&d| scene.sample(&ray, d)).unzip();
            RaySamples::from_densities(&ray, depths, colors, &densities)
        })
        .collect();
    let interior = PixelRect {
        x0: guard,
        y0: guard,
        width: n - 2 * guard,
        height: n - 2 * guard,
    };
    let settings = ScatterSettings {
        aperture: 6.0,
        focus: 1.0,
        shape: ApertureShape::Circular,
        gamma: 1.0,
        max_radius: guard as f64,
    };
    let pixels = grid.iter().map(concentrate).collect();
    let patch = ConcentratedPatch::new(n, n, pixels, interior).unwrap();
    let ours = scatter_forward(&patch, &settings).unwrap().image;
    let naive = naive_dof_render(&grid, n, n, interior, 6.0, 1.0, guard as f64).unwrap();
    let gap: f64 = ours
        .data
        .iter()
        .zip(&naive.data)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0)
        .sum::<f64>()
        / ours.data.len() as f64;
    assert!(gap < 0.05, "mean gap {gap}");
    assert!(gap > 0.0);
}
