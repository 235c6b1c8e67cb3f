//! Periodic horizontal interpolation (Catmull–Rom bicubic, order 4).

use super::{ScalarField2D, ScalarField3D};
use crate::error::{Error, Result};

/// Catmull–Rom weights for the four stencil points at offsets −1..2.
#[inline]
fn cr_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[inline]
fn wrap_index(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// Sample `f` at the (periodically wrapped) point `(x, y)`.
pub fn sample_2d(f: &ScalarField2D, x: f64, y: f64) -> f64 {
    let g = f.grid;
    let gx = (x.rem_euclid(1.0)) * g.nx as f64;
    let gy = (y.rem_euclid(1.0)) * g.ny as f64;
    let i0 = gx.floor() as i64;
    let j0 = gy.floor() as i64;
    let tx = gx - i0 as f64;
    let ty = gy - j0 as f64;
    let wx = cr_weights(tx);
    let wy = cr_weights(ty);
    let mut acc = 0.0;
    for (dj, wyj) in wy.iter().enumerate() {
        let j = wrap_index(j0 + dj as i64 - 1, g.ny);
        let mut row = 0.0;
        for (di, wxi) in wx.iter().enumerate() {
            let i = wrap_index(i0 + di as i64 - 1, g.nx);
            row += wxi * f.at(i, j);
        }
        acc += wyj * row;
    }
    acc
}

/// Interpolate `f` at arbitrary horizontal points (wrapped into the
/// periodic cell). Non-finite points are rejected.
pub fn interpolate_h(f: &ScalarField2D, points: &[(f64, f64)]) -> Result<Vec<f64>> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite {
            what: "interpolation points",
        });
    }
    Ok(points.iter().map(|&(x, y)| sample_2d(f, x, y)).collect())
}

/// Compose a 2D field with a horizontal map given by position fields:
/// `out(i,j) = f(px(i,j), py(i,j))`.
pub fn compose_2d(f: &ScalarField2D, px: &ScalarField2D, py: &ScalarField2D) -> ScalarField2D {
    let g = f.grid;
    assert_eq!(g, px.grid, "grid mismatch (programmer error)");
    let mut out = ScalarField2D::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            *out.at_mut(i, j) = sample_2d(f, px.at(i, j), py.at(i, j));
        }
    }
    out
}

/// Compose a 3D field with a horizontal map, level by level (the map does
/// not act on z).
pub fn compose_3d(f: &ScalarField3D, px: &ScalarField2D, py: &ScalarField2D) -> ScalarField3D {
    let g = f.grid;
    assert_eq!(g, px.grid, "grid mismatch (programmer error)");
    let mut out = ScalarField3D::zeros(g);
    for k in 0..g.nz {
        let lvl = f.level_field(k);
        for j in 0..g.ny {
            for i in 0..g.nx {
                *out.at_mut(i, j, k) = sample_2d(&lvl, px.at(i, j), py.at(i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use std::f64::consts::PI;

    #[test]
    fn nodal_values_exact() {
        let g = GridSpec::new(8, 8, 3).unwrap();
        let f = ScalarField2D::from_fn(g, |x, y| x * 2.0 + (2.0 * PI * y).sin());
        for j in 0..g.ny {
            for i in 0..g.nx {
                let v = sample_2d(&f, g.x(i), g.y(j));
                assert!((v - f.at(i, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sine_quarter_point() {
        let g = GridSpec::new(32, 32, 3).unwrap();
        let f = ScalarField2D::from_fn(g, |x, _| (2.0 * PI * x).sin());
        let v = sample_2d(&f, 0.25, 0.11);
        assert!((v - 1.0).abs() < 1e-4, "v = {v}");
    }

    #[test]
    fn wrapping_is_periodic() {
        let g = GridSpec::new(8, 8, 3).unwrap();
        let f = ScalarField2D::from_fn(g, |x, y| (2.0 * PI * x).cos() + (2.0 * PI * y).sin());
        let a = sample_2d(&f, 0.3, 0.7);
        let b = sample_2d(&f, 0.3 + 3.0, 0.7 - 2.0);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn nan_point_rejected() {
        let g = GridSpec::new(8, 8, 3).unwrap();
        let f = ScalarField2D::zeros(g);
        assert!(interpolate_h(&f, &[(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn fourth_order_refinement() {
        let err = |n: usize| {
            let g = GridSpec::new(n, n, 3).unwrap();
            let f = ScalarField2D::from_fn(g, |x, y| {
                (2.0 * PI * x).sin() * (2.0 * PI * y).cos()
            });
            let mut e = 0.0_f64;
            for s in 0..13 {
                let x = 0.013 + 0.071 * s as f64;
                let y = 0.37 + 0.041 * s as f64;
                let exact = (2.0 * PI * x).sin() * (2.0 * PI * y % (2.0 * PI)).cos();
                e = e.max((sample_2d(&f, x, y) - exact).abs());
            }
            e
        };
        let ratio = err(16) / err(32);
        assert!(ratio > 8.0, "ratio = {ratio}");
    }
}
