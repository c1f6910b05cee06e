use dofnerf::dataset::apply_forward_dof;
use dofnerf::optics::{coc_diameter, polygon_factor, scatter_weight, ApertureShape};
use dofnerf::raster::Image;
use dofnerf::scatter::ScatterSettings;
use dofnerf::volume::{composite_pinhole, volume_coefficients, Ray, RaySamples};
use proptest::prelude::*;

fn settings(aperture: f64, focus: f64, gamma: f64, max_radius: f64, blades: u32) -> ScatterSettings {
    let shape = if blades < 3 {
        ApertureShape::Circular
    } else {
        ApertureShape::polygonal(blades, 0.3).unwrap()
    };
    ScatterSettings {
        aperture,
        focus,
        shape,
        gamma,
        max_radius,
    }
}

fn canvas(size: usize, values: &[f64], depths: &[f64]) -> (Image, Vec<f64>) {
    let image = Image::from_fn(size, size, |x, y| {
        let v = values[(y * size + x) % values.len()];
        [v, 1.0 - v, 0.5 * v]
    });
    let depth = (0..size * size).map(|i| depths[i % depths.len()]).collect();
    (image, depth)
}

proptest! {
    #[test]
    fn coc_is_nonnegative_zero_in_focus_and_linear_in_aperture(
        k in 0.0..20.0f64,
        f in 0.2..10.0f64,
        h in 0.2..10.0f64,
    ) {
        let c = coc_diameter(k, f, h).unwrap();
        prop_assert!(c >= 0.0);
        prop_assert_eq!(coc_diameter(k, f, f).unwrap(), 0.0);
        let c2 = coc_diameter(2.0 * k, f, h).unwrap();
        prop_assert!((c2 - 2.0 * c).abs() <= 1e-12 * c2.max(1.0));
    }

    #[test]
    fn kernel_is_nonnegative_and_decreasing_in_distance(r in 0.0..12.0f64, l in 0.0..15.0f64, dl in 0.0..3.0f64) {
        let w = scatter_weight(r, l);
        prop_assert!(w >= 0.0);
        prop_assert!(scatter_weight(r, l + dl) <= w);
    }

    #[test]
    fn polygon_factor_stays_between_inradius_and_circumradius(
        n in 3u32..13,
        rot in -4.0..4.0f64,
        dx in -5.0..5.0f64,
        dy in -5.0..5.0f64,
    ) {
        let k = polygon_factor(n, rot, dx, dy);
        let lo = (std::f64::consts::PI / n as f64).cos();
        prop_assert!(k >= lo - 1e-12 && k <= 1.0 + 1e-12, "{}", k);
    }

    #[test]
    fn flat_images_stay_flat(
        k in 0.0..15.0f64,
        f in 0.5..4.0f64,
        gamma in 0.5..3.0f64,
        blades in 0u32..8,
        depths in prop::collection::vec(0.5..4.0f64, 1..30),
        c in 0.0..1.0f64,
    ) {
        let s = settings(k, f, gamma, 4.0, blades);
        let (_, depth) = canvas(14, &[0.0], &depths);
        let aif = Image::filled(14, 14, [c, 0.5 * c, 1.0 - c]);
        let out = apply_forward_dof(&aif, &depth, 4, &s).unwrap();
        for p in &out.data {
            prop_assert!((p[0] - c).abs() < 1e-12 && (p[1] - 0.5 * c).abs() < 1e-12 && (p[2] - 1.0 + c).abs() < 1e-12);
        }
    }

    #[test]
    fn scattered_values_stay_within_the_input_range(
        k in 0.0..15.0f64,
        f in 0.5..4.0f64,
        gamma in 0.5..3.0f64,
        blades in 0u32..8,
        values in prop::collection::vec(0.0..1.0f64, 1..40),
        depths in prop::collection::vec(0.5..4.0f64, 1..30),
    ) {
        let s = settings(k, f, gamma, 4.0, blades);
        let (aif, depth) = canvas(14, &values, &depths);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = apply_forward_dof(&aif, &depth, 4, &s).unwrap();
        prop_assert_eq!((out.width, out.height), (6, 6));
        for p in &out.data {
            prop_assert!(p[0] >= lo - 1e-12 && p[0] <= hi + 1e-12);
        }
    }

    #[test]
    fn zero_aperture_is_the_identity(
        values in prop::collection::vec(0.0..1.0f64, 1..40),
        depths in prop::collection::vec(0.5..4.0f64, 1..30),
        f in 0.5..4.0f64,
    ) {
        let (aif, depth) = canvas(12, &values, &depths);
        let out = apply_forward_dof(&aif, &depth, 3, &settings(0.0, f, 1.0, 3.0, 0)).unwrap();
        prop_assert_eq!(out, aif.crop(3, 3, 6, 6));
    }

    #[test]
    fn volume_weights_form_a_partition_of_at_most_one(
        densities in prop::collection::vec(0.0..50.0f64, 2..40),
    ) {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            near: 0.5,
            far: 4.0,
            depth_scale: 1.0,
            pixel: (0, 0),
        };
        let n = densities.len();
        let depths: Vec<f64> = (0..n).map(|i| 0.5 + 3.5 * (i as f64 + 0.5) / n as f64).collect();
        let samples = RaySamples::from_densities(&ray, depths, vec![[1.0; 3]; n], &densities);
        let w = volume_coefficients(&samples);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        let total: f64 = w.iter().sum();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!((composite_pinhole(&samples)[0] - total).abs() < 1e-12);
    }
}
