//! Symmetric quadrature rules on triangles.
//!
//! Points are barycentric coordinates and weights are normalized to sum to
//! one, so `area * sum(w_q f(x_q))` approximates the integral over any
//! triangle.

use crate::error::{Error, Result};

/// Exactness degree used by every assembly routine unless stated otherwise.
/// The skew-symmetric convection integrand of quadratic velocities is a
/// degree-5 polynomial, so this rule integrates it exactly.
pub const DEFAULT_DEGREE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    pub degree: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integral of `f(x, y)` over the reference triangle (0,0), (1,0), (0,1).
    pub fn integrate_reference(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        0.5 * self
            .points
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w * f(l[1], l[2]))
            .sum::<f64>()
    }
}

fn centroid(w: f64) -> Vec<([f64; 3], f64)> {
    vec![([1.0 / 3.0; 3], w)]
}

// (a, a, 1 - 2a) and its two rotations
fn orbit3(a: f64, w: f64) -> Vec<([f64; 3], f64)> {
    let b = 1.0 - 2.0 * a;
    vec![([a, a, b], w), ([a, b, a], w), ([b, a, a], w)]
}

// all six permutations of (a, b, 1 - a - b)
fn orbit6(a: f64, b: f64, w: f64) -> Vec<([f64; 3], f64)> {
    let c = 1.0 - a - b;
    vec![
        ([a, b, c], w),
        ([a, c, b], w),
        ([b, a, c], w),
        ([b, c, a], w),
        ([c, a, b], w),
        ([c, b, a], w),
    ]
}

/// Returns a rule exact for all polynomials of total degree
/// `<= exactness_degree` (at most 6).
pub fn quadrature_rule(exactness_degree: usize) -> Result<QuadRule> {
    let parts: Vec<([f64; 3], f64)> = match exactness_degree {
        0 | 1 => centroid(1.0),
        2 => orbit3(1.0 / 6.0, 1.0 / 3.0),
        3 | 4 => {
            let mut p = orbit3(0.445_948_490_915_964_886_32, 0.223_381_589_678_011_465_70);
            p.extend(orbit3(0.091_576_213_509_770_743_46, 0.109_951_743_655_321_867_64));
            p
        }
        5 => {
            let s = 15f64.sqrt();
            let mut p = centroid(9.0 / 40.0);
            p.extend(orbit3((6.0 - s) / 21.0, (155.0 - s) / 1200.0));
            p.extend(orbit3((6.0 + s) / 21.0, (155.0 + s) / 1200.0));
            p
        }
        6 => {
            let mut p = orbit3(0.249_286_745_170_910_421_29, 0.116_786_275_726_379_366_03);
            p.extend(orbit3(0.063_089_014_491_502_228_34, 0.050_844_906_370_206_816_92));
            p.extend(orbit6(
                0.053_145_049_844_816_947_35,
                0.310_352_451_033_784_405_42,
                0.082_851_075_618_373_575_19,
            ));
            p
        }
        d => {
            return Err(Error::config(format!(
                "no quadrature rule of exactness degree {d} (maximum 6)"
            )))
        }
    };
    let degree = exactness_degree.max(1);
    let (points, weights) = parts.into_iter().unzip();
    Ok(QuadRule {
        degree,
        points,
        weights,
    })
}
