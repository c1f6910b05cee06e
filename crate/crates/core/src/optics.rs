//! Thin-lens geometry: circle-of-confusion laws, the soft scatter kernel and
//! polygonal aperture shaping.
//!
//! Units follow the training convention: the aperture parameter `K` is the
//! product of focal length and aperture diameter, already scaled so that
//! [`coc_diameter`] comes out in pixels. Depths are scene units measured
//! along the camera ray.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical lens description used by the exact Gaussian-optics CoC law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensSpec {
    pub focal_length: f64,
    pub aperture_diameter: f64,
}

impl LensSpec {
    pub fn new(focal_length: f64, aperture_diameter: f64) -> Result<Self> {
        if !(focal_length > 0.0) || !focal_length.is_finite() {
            return Err(Error::Domain(format!(
                "focal length must be positive, got {focal_length}"
            )));
        }
        if !(aperture_diameter >= 0.0) || !aperture_diameter.is_finite() {
            return Err(Error::Domain(format!(
                "aperture diameter must be non-negative, got {aperture_diameter}"
            )));
        }
        Ok(LensSpec {
            focal_length,
            aperture_diameter,
        })
    }

    /// The aperture parameter `K = f * D`.
    pub fn aperture_parameter(&self) -> f64 {
        self.focal_length * self.aperture_diameter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ApertureShape {
    #[default]
    Circular,
    Polygonal {
        blades: u32,
        rotation: f64,
    },
}

impl ApertureShape {
    pub fn polygonal(blades: u32, rotation: f64) -> Result<Self> {
        if blades < 3 {
            return Err(Error::Domain(format!(
                "a polygonal aperture needs at least 3 blades, got {blades}"
            )));
        }
        if !rotation.is_finite() {
            return Err(Error::Domain("aperture rotation must be finite".into()));
        }
        Ok(ApertureShape::Polygonal { blades, rotation })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ApertureShape::Circular => Ok(()),
            ApertureShape::Polygonal { blades, rotation } => Self::polygonal(blades, rotation).map(|_| ()),
        }
    }

    /// Radius scale toward the pixel offset `(dx, dy)`; always 1 for a circle.
    #[inline]
    pub fn radius_factor(&self, dx: f64, dy: f64) -> f64 {
        match *self {
            ApertureShape::Circular => 1.0,
            ApertureShape::Polygonal { blades, rotation } => polygon_factor(blades, rotation, dx, dy),
        }
    }
}

fn check_depth(name: &str, value: f64) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::Domain(format!(
            "{name} must be positive and finite, got {value}"
        )));
    }
    Ok(())
}

/// CoC diameter in pixels: `K * |1/F - 1/h|`.
pub fn coc_diameter(aperture: f64, focus: f64, depth: f64) -> Result<f64> {
    Ok(signed_defocus(aperture, focus, depth)?.abs())
}

/// Exact thin-lens CoC diameter `f D |h - F| / (h (F - f))`, in scene units.
pub fn coc_diameter_exact(lens: &LensSpec, focus: f64, depth: f64) -> Result<f64> {
    let f = lens.focal_length;
    if !(focus > f) {
        return Err(Error::Domain(format!(
            "focus distance {focus} must exceed the focal length {f}"
        )));
    }
    if !(depth > f) {
        return Err(Error::Domain(format!(
            "object depth {depth} must exceed the focal length {f}"
        )));
    }
    Ok(f * lens.aperture_diameter * (depth - focus).abs() / (depth * (focus - f)))
}

/// Signed defocus `K * (1/h_c - 1/F)`: positive in front of the focal plane.
pub fn signed_defocus(aperture: f64, focus: f64, depth: f64) -> Result<f64> {
    check_depth("focus distance", focus)?;
    check_depth("depth", depth)?;
    if !aperture.is_finite() {
        return Err(Error::Domain(format!(
            "aperture parameter must be finite, got {aperture}"
        )));
    }
    Ok(aperture * (1.0 / depth - 1.0 / focus))
}

/// Soft disc kernel: `(0.5 + 0.5 tanh(4 (r - l))) / (r^2 + 0.2)`.
#[inline]
pub fn scatter_weight(radius: f64, distance: f64) -> f64 {
    (0.5 + 0.5 * (4.0 * (radius - distance)).tanh()) / (radius * radius + 0.2)
}

/// Kernel value and its derivative with respect to the radius, for a radius
/// that is pre-scaled by `shape_factor` inside the tanh term only.
#[inline]
pub(crate) fn scatter_weight_with_grad(radius: f64, shape_factor: f64, distance: f64) -> (f64, f64) {
    let t = (4.0 * (shape_factor * radius - distance)).tanh();
    let edge = 0.5 + 0.5 * t;
    let inv_q = 1.0 / (radius * radius + 0.2);
    let w = edge * inv_q;
    let d_edge = 2.0 * (1.0 - t * t) * shape_factor;
    (w, d_edge * inv_q - w * 2.0 * radius * inv_q)
}

/// Radius scale of a regular `blades`-gon (circumradius 1) toward the offset
/// `(dx, dy)`, rotated by `rotation`. Lies in `[cos(pi/n), 1]`.
pub fn polygon_factor(blades: u32, rotation: f64, dx: f64, dy: f64) -> f64 {
    if dx == 0.0 && dy == 0.0 {
        return 1.0;
    }
    let n = blades as f64;
    let sector = 2.0 * PI / n;
    let base = FRAC_PI_2 - PI / n;
    let m = (dy.atan2(dx) + rotation).abs().rem_euclid(sector);
    base.sin() / (base + m).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coc_examples() {
        assert_eq!(coc_diameter(15.0, 2.0, 2.0).unwrap(), 0.0);
        assert!((coc_diameter(15.0, 2.0, 4.0).unwrap() - 3.75).abs() < 1e-12);
        assert_eq!(coc_diameter(0.0, 1.0, 7.3).unwrap(), 0.0);
    }

    #[test]
    fn coc_rejects_non_positive_depths() {
        assert!(matches!(coc_diameter(1.0, 0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(coc_diameter(1.0, 1.0, -2.0), Err(Error::Domain(_))));
        assert!(coc_diameter(1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn exact_coc_examples() {
        let lens = LensSpec::new(0.035, 0.01).unwrap();
        assert_eq!(coc_diameter_exact(&lens, 2.0, 2.0).unwrap(), 0.0);
        let expected = 0.035 * 0.01 * 2.0 / (4.0 * 1.965);
        assert!((coc_diameter_exact(&lens, 2.0, 4.0).unwrap() - expected).abs() < 1e-18);
        assert!((expected - 8.906e-5).abs() < 1e-8);
        assert!(coc_diameter_exact(&lens, 0.035, 4.0).is_err());
        assert!(coc_diameter_exact(&lens, 2.0, 0.01).is_err());
    }

    #[test]
    fn approximation_gap_shrinks_with_focus_ratio() {
        let f = 0.05;
        let lens = LensSpec::new(f, 0.02).unwrap();
        let gap = |ratio: f64| {
            let focus = ratio * f;
            let depth = 3.0 * focus;
            let exact = coc_diameter_exact(&lens, focus, depth).unwrap();
            let approx = coc_diameter(lens.aperture_parameter(), focus, depth).unwrap();
            (approx - exact).abs() / exact
        };
        let gaps = [gap(10.0), gap(100.0), gap(1000.0)];
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn signed_defocus_examples() {
        assert!((signed_defocus(10.0, 2.0, 1.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(signed_defocus(10.0, 2.0, 2.0).unwrap(), 0.0);
        assert!((signed_defocus(10.0, 2.0, 4.0).unwrap() + 2.5).abs() < 1e-12);
    }

    #[test]
    fn scatter_weight_examples() {
        let expected = (0.5 + 0.5 * 4f64.tanh()) / 1.2;
        assert!((scatter_weight(1.0, 0.0) - expected).abs() < 1e-15);
        assert!((scatter_weight(1.0, 0.0) - 0.833_053_9).abs() < 1e-7);
        assert!((scatter_weight(0.0, 0.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn scatter_weight_radius_derivative_matches_central_differences() {
        for &(r, l, k) in &[(0.0, 0.0, 1.0), (0.3, 1.0, 1.0), (2.7, 2.5, 0.9), (5.0, 1.4, 0.87)] {
            let (_, analytic) = scatter_weight_with_grad(r, k, l);
            let h = 1e-6;
            let f = |r: f64| scatter_weight_with_grad(r, k, l).0;
            let numeric = (f(r + h) - f(r - h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-6, "r={r} l={l}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn polygon_factor_examples() {
        // Vertex direction.
        assert!((polygon_factor(6, 0.0, 1.0, 0.0) - 1.0).abs() < 1e-15);
        // Edge midpoint direction.
        let angle = PI / 6.0;
        let k = polygon_factor(6, 0.0, angle.cos(), angle.sin());
        assert!((k - (PI / 6.0).cos()).abs() < 1e-12);
        assert!((k - 0.86603).abs() < 1e-5);
        assert_eq!(polygon_factor(5, 0.3, 0.0, 0.0), 1.0);
    }

    #[test]
    fn many_blades_approach_a_circle() {
        let worst = (0..10_000)
            .map(|i| {
                let a = i as f64 * 2.0 * PI / 10_000.0;
                (polygon_factor(64, 0.0, a.cos(), a.sin()) - 1.0).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 0.0013, "{worst}");
    }

    #[test]
    fn polygonal_shape_requires_three_blades() {
        assert!(ApertureShape::polygonal(2, 0.0).is_err());
        assert!(ApertureShape::polygonal(3, 0.0).is_ok());
    }
}
