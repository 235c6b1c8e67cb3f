//! Discretization of the torus layer `T² × (0,1)` and field storage.
//!
//! Horizontal: uniform periodic grid (period 1 in each direction) with
//! Fourier-transform differentiation. Vertical: `nz` uniform nodes including
//! both endpoints, second-order centered differences with ghost-node
//! reflection for the Neumann conditions `∂_z f|_{z=0,1} = 0`, trapezoid
//! quadrature for `∫₀ᶻ` and `∫₀¹`.
//!
//! 3D values are stored x-fastest: `idx = (k·ny + j)·nx + i` for node
//! `(x_i, y_j, z_k)`; 2D fields drop the `k` index.

mod dump;
mod interp;
mod spectral;

pub use dump::{read_field2, read_field3, write_field2, write_field3, DumpHeader};
pub use interp::{compose_2d, compose_3d, interpolate_h, sample_2d};

pub(crate) use spectral::{
    fft_modes_2d, fft_modes_3d, ifft_modes_3d, mode_wavenumbers,
    mode_wavenumbers_deriv,
};
pub use spectral::{
    dealias_2d, dealias_3d, div_h_2d, div_h_3d, dx_2d, dy_2d, grad_h_2d, grad_h_3d, grad_h_div_h,
    laplacian3, laplacian_h_2d, laplacian_h_3d, second_derivative_h_3d,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Discretization parameters for `Ω = T² × (0,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Horizontal point counts; the torus has period 1 in each direction.
    pub nx: usize,
    pub ny: usize,
    /// Vertical node count on `[0,1]`, both endpoints included.
    pub nz: usize,
    /// Apply the 2/3-rule spectral filter to nonlinear products in the
    /// solvers. Off by default; the desk-scale runs are smooth enough that
    /// aliasing sits at the spectral tail.
    #[serde(default)]
    pub dealias: bool,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx < 4 || ny < 4 || nx % 2 != 0 || ny % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "nx, ny must be even and >= 4 (got {nx} x {ny})"
            )));
        }
        if nz < 3 {
            return Err(Error::InvalidGrid(format!("nz must be >= 3 (got {nz})")));
        }
        Ok(GridSpec {
            nx,
            ny,
            nz,
            dealias: false,
        })
    }

    pub fn with_dealias(mut self, on: bool) -> Self {
        self.dealias = on;
        self
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.nx as f64
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        j as f64 / self.ny as f64
    }

    /// Vertical spacing `h = 1/(nz−1)`.
    #[inline]
    pub fn hz(&self) -> f64 {
        1.0 / (self.nz - 1) as f64
    }

    #[inline]
    pub fn z(&self, k: usize) -> f64 {
        k as f64 * self.hz()
    }

    #[inline]
    pub fn horizontal_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn len3(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Trapezoid quadrature weights over the vertical nodes.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.hz();
        let mut w = vec![h; self.nz];
        w[0] = 0.5 * h;
        w[self.nz - 1] = 0.5 * h;
        w
    }

    /// Cell area element for horizontal means: `1/(nx·ny)`.
    #[inline]
    pub fn horizontal_weight(&self) -> f64 {
        1.0 / (self.nx * self.ny) as f64
    }
}

macro_rules! same_grid {
    ($a:expr, $b:expr) => {
        assert_eq!(
            $a.grid, $b.grid,
            "grid mismatch between operands (programmer error)"
        );
    };
}

/// Scalar samples on the 2D torus.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField2D {
    pub grid: GridSpec,
    values: Vec<f64>,
}

/// Scalar samples on `T² × (0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField3D {
    pub grid: GridSpec,
    values: Vec<f64>,
}

/// Horizontal vector field on the torus (two 2D components).
#[derive(Clone, Debug, PartialEq)]
pub struct HVectorField2D {
    pub x: ScalarField2D,
    pub y: ScalarField2D,
}

/// Horizontal vector field on the layer (two 3D components).
#[derive(Clone, Debug, PartialEq)]
pub struct HVectorField3D {
    pub x: ScalarField3D,
    pub y: ScalarField3D,
}

macro_rules! field_common {
    ($ty:ident) => {
        impl $ty {
            #[inline]
            pub fn values(&self) -> &[f64] {
                &self.values
            }

            #[inline]
            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self {
                    grid: self.grid,
                    values: self.values.iter().map(|&v| f(v)).collect(),
                }
            }

            pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
                same_grid!(self, other);
                Self {
                    grid: self.grid,
                    values: self
                        .values
                        .iter()
                        .zip(&other.values)
                        .map(|(&a, &b)| f(a, b))
                        .collect(),
                }
            }

            pub fn add(&self, other: &Self) -> Self {
                self.zip_map(other, |a, b| a + b)
            }

            pub fn sub(&self, other: &Self) -> Self {
                self.zip_map(other, |a, b| a - b)
            }

            pub fn mul(&self, other: &Self) -> Self {
                self.zip_map(other, |a, b| a * b)
            }

            pub fn scale(&self, c: f64) -> Self {
                self.map(|v| c * v)
            }

            pub fn add_scaled_in_place(&mut self, c: f64, other: &Self) {
                same_grid!(self, other);
                for (a, &b) in self.values.iter_mut().zip(&other.values) {
                    *a += c * b;
                }
            }

            pub fn shift(&self, c: f64) -> Self {
                self.map(|v| v + c)
            }

            pub fn linf(&self) -> f64 {
                self.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
            }

            pub fn min(&self) -> f64 {
                self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
            }

            pub fn max(&self) -> f64 {
                self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            }

            pub fn validate_finite(&self, what: &'static str) -> Result<()> {
                if self.values.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::NonFinite { what })
                }
            }

            /// Reciprocal guarded against degenerate denominators.
            pub fn guarded_recip(&self, what: &'static str) -> Result<Self> {
                let min = self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
                if min < crate::error::POSITIVITY_GUARD {
                    return Err(Error::Degenerate { what, min });
                }
                Ok(self.map(|v| 1.0 / v))
            }
        }
    };
}

field_common!(ScalarField2D);
field_common!(ScalarField3D);

impl ScalarField2D {
    pub fn zeros(grid: GridSpec) -> Self {
        ScalarField2D {
            grid,
            values: vec![0.0; grid.horizontal_len()],
        }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        ScalarField2D {
            grid,
            values: vec![c; grid.horizontal_len()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.horizontal_len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(grid.x(i), grid.y(j)));
            }
        }
        ScalarField2D { grid, values }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.horizontal_len());
        ScalarField2D { grid, values }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.grid.nx + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nx + i]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.values[j * self.grid.nx + i]
    }

    /// Mean over the torus (the discrete `∫_{T²}`, since the cell has area 1).
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.horizontal_weight()
    }

    /// Broadcast to a 3D field constant in z.
    pub fn broadcast_z(&self) -> ScalarField3D {
        let n2 = self.grid.horizontal_len();
        let mut values = Vec::with_capacity(self.grid.len3());
        for _ in 0..self.grid.nz {
            values.extend_from_slice(&self.values[..n2]);
        }
        ScalarField3D {
            grid: self.grid,
            values,
        }
    }
}

impl ScalarField3D {
    pub fn zeros(grid: GridSpec) -> Self {
        ScalarField3D {
            grid,
            values: vec![0.0; grid.len3()],
        }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        ScalarField3D {
            grid,
            values: vec![c; grid.len3()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len3());
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    values.push(f(grid.x(i), grid.y(j), grid.z(k)));
                }
            }
        }
        ScalarField3D { grid, values }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len3());
        ScalarField3D { grid, values }
    }

    /// Field depending on z only.
    pub fn from_profile(grid: GridSpec, profile: &[f64]) -> Self {
        assert_eq!(profile.len(), grid.nz);
        let n2 = grid.horizontal_len();
        let mut values = Vec::with_capacity(grid.len3());
        for k in 0..grid.nz {
            for _ in 0..n2 {
                values.push(profile[k]);
            }
        }
        ScalarField3D { grid, values }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.grid.ny + j) * self.grid.nx + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.grid.ny + j) * self.grid.nx + i]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        let idx = (k * self.grid.ny + j) * self.grid.nx + i;
        &mut self.values[idx]
    }

    #[inline]
    pub fn level(&self, k: usize) -> &[f64] {
        let n2 = self.grid.horizontal_len();
        &self.values[k * n2..(k + 1) * n2]
    }

    #[inline]
    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        let n2 = self.grid.horizontal_len();
        &mut self.values[k * n2..(k + 1) * n2]
    }

    /// Extract one horizontal level as a 2D field.
    pub fn level_field(&self, k: usize) -> ScalarField2D {
        ScalarField2D {
            grid: self.grid,
            values: self.level(k).to_vec(),
        }
    }

    /// Gather the vertical column over node `(i,j)` into `out`.
    pub fn column_into(&self, i: usize, j: usize, out: &mut [f64]) {
        let n2 = self.grid.horizontal_len();
        let base = j * self.grid.nx + i;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.values[base + k * n2];
        }
    }

    pub fn set_column(&mut self, i: usize, j: usize, col: &[f64]) {
        let n2 = self.grid.horizontal_len();
        let base = j * self.grid.nx + i;
        for (k, &v) in col.iter().enumerate() {
            self.values[base + k * n2] = v;
        }
    }

    /// Multiply by a 2D field, broadcast over z.
    pub fn mul_2d(&self, f: &ScalarField2D) -> ScalarField3D {
        assert_eq!(self.grid, f.grid, "grid mismatch (programmer error)");
        let n2 = self.grid.horizontal_len();
        let mut values = self.values.clone();
        for k in 0..self.grid.nz {
            for (v, &w) in values[k * n2..(k + 1) * n2].iter_mut().zip(f.values()) {
                *v *= w;
            }
        }
        ScalarField3D {
            grid: self.grid,
            values,
        }
    }

    /// Multiply by a z-profile, broadcast horizontally.
    pub fn mul_profile(&self, profile: &[f64]) -> ScalarField3D {
        assert_eq!(profile.len(), self.grid.nz);
        let n2 = self.grid.horizontal_len();
        let mut values = self.values.clone();
        for k in 0..self.grid.nz {
            for v in values[k * n2..(k + 1) * n2].iter_mut() {
                *v *= profile[k];
            }
        }
        ScalarField3D {
            grid: self.grid,
            values,
        }
    }

    /// Mean over `Ω` (trapezoid vertically, exact mean horizontally).
    pub fn omega_integral(&self) -> f64 {
        let w = self.grid.trapezoid_weights();
        let hw = self.grid.horizontal_weight();
        let mut total = 0.0;
        for k in 0..self.grid.nz {
            let s: f64 = self.level(k).iter().sum();
            total += w[k] * s * hw;
        }
        total
    }
}

impl HVectorField2D {
    pub fn zeros(grid: GridSpec) -> Self {
        HVectorField2D {
            x: ScalarField2D::zeros(grid),
            y: ScalarField2D::zeros(grid),
        }
    }

    pub fn grid(&self) -> GridSpec {
        same_grid!(self.x, self.y);
        self.x.grid
    }

    pub fn add(&self, o: &Self) -> Self {
        HVectorField2D {
            x: self.x.add(&o.x),
            y: self.y.add(&o.y),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        HVectorField2D {
            x: self.x.sub(&o.x),
            y: self.y.sub(&o.y),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        HVectorField2D {
            x: self.x.scale(c),
            y: self.y.scale(c),
        }
    }

    pub fn linf(&self) -> f64 {
        self.x.linf().max(self.y.linf())
    }
}

impl HVectorField3D {
    pub fn zeros(grid: GridSpec) -> Self {
        HVectorField3D {
            x: ScalarField3D::zeros(grid),
            y: ScalarField3D::zeros(grid),
        }
    }

    pub fn grid(&self) -> GridSpec {
        same_grid!(self.x, self.y);
        self.x.grid
    }

    pub fn add(&self, o: &Self) -> Self {
        HVectorField3D {
            x: self.x.add(&o.x),
            y: self.y.add(&o.y),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        HVectorField3D {
            x: self.x.sub(&o.x),
            y: self.y.sub(&o.y),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        HVectorField3D {
            x: self.x.scale(c),
            y: self.y.scale(c),
        }
    }

    pub fn linf(&self) -> f64 {
        self.x.linf().max(self.y.linf())
    }

    pub fn validate_finite(&self, what: &'static str) -> Result<()> {
        self.x.validate_finite(what)?;
        self.y.validate_finite(what)
    }
}

/// `F(x,y,z_k) ≈ ∫₀^{z_k} f(x,y,η) dη` by trapezoid rule; `F(·,·,0) = 0`
/// exactly.
pub fn vertical_cumulative_integral(f: &ScalarField3D) -> ScalarField3D {
    let grid = f.grid;
    let n2 = grid.horizontal_len();
    let h = grid.hz();
    let mut out = ScalarField3D::zeros(grid);
    for k in 1..grid.nz {
        let (lo, hi) = out.values.split_at_mut(k * n2);
        let prev = &lo[(k - 1) * n2..];
        let fk = f.level(k);
        let fkm = f.level(k - 1);
        for idx in 0..n2 {
            hi[idx] = prev[idx] + 0.5 * h * (fkm[idx] + fk[idx]);
        }
    }
    out
}

/// `∫₀¹ f(·,η) dη` per column; identical to the cumulative integral
/// evaluated at z = 1.
pub fn vertical_mean(f: &ScalarField3D) -> ScalarField2D {
    let grid = f.grid;
    let n2 = grid.horizontal_len();
    let w = grid.trapezoid_weights();
    let mut values = vec![0.0; n2];
    for k in 0..grid.nz {
        let lvl = f.level(k);
        let wk = w[k];
        for (v, &l) in values.iter_mut().zip(lvl) {
            *v += wk * l;
        }
    }
    ScalarField2D { grid, values }
}

/// Vertical derivative: centered interior, one-sided second order at the
/// endpoints. Use [`dzz_neumann`]/[`laplacian3`] for fields carrying the
/// Neumann boundary conditions.
pub fn dz(f: &ScalarField3D) -> ScalarField3D {
    let grid = f.grid;
    let n2 = grid.horizontal_len();
    let nz = grid.nz;
    let h = grid.hz();
    let mut out = ScalarField3D::zeros(grid);
    for k in 0..nz {
        let dst_range = k * n2..(k + 1) * n2;
        if k == 0 {
            let (f0, f1, f2) = (f.level(0), f.level(1), f.level(2));
            for (idx, d) in out.values[dst_range].iter_mut().enumerate() {
                *d = (-3.0 * f0[idx] + 4.0 * f1[idx] - f2[idx]) / (2.0 * h);
            }
        } else if k == nz - 1 {
            let (f0, f1, f2) = (f.level(nz - 1), f.level(nz - 2), f.level(nz - 3));
            for (idx, d) in out.values[dst_range].iter_mut().enumerate() {
                *d = (3.0 * f0[idx] - 4.0 * f1[idx] + f2[idx]) / (2.0 * h);
            }
        } else {
            let (fm, fp) = (f.level(k - 1), f.level(k + 1));
            for (idx, d) in out.values[dst_range].iter_mut().enumerate() {
                *d = (fp[idx] - fm[idx]) / (2.0 * h);
            }
        }
    }
    out
}

/// Second vertical derivative with ghost-node reflection implementing
/// `∂_z f|_{z=0,1} = 0`.
pub fn dzz_neumann(f: &ScalarField3D) -> ScalarField3D {
    let grid = f.grid;
    let n2 = grid.horizontal_len();
    let nz = grid.nz;
    let h2 = grid.hz() * grid.hz();
    let mut out = ScalarField3D::zeros(grid);
    for k in 0..nz {
        let dst_range = k * n2..(k + 1) * n2;
        if k == 0 {
            let (f0, f1) = (f.level(0), f.level(1));
            for (idx, d) in out.values[dst_range].iter_mut().enumerate() {
                *d = 2.0 * (f1[idx] - f0[idx]) / h2;
            }
        } else if k == nz - 1 {
            let (f0, f1) = (f.level(nz - 1), f.level(nz - 2));
            for (idx, d) in out.values[dst_range].iter_mut().enumerate() {
                *d = 2.0 * (f1[idx] - f0[idx]) / h2;
            }
        } else {
            let (fm, f0, fp) = (f.level(k - 1), f.level(k), f.level(k + 1));
            for (idx, d) in out.values[dst_range].iter_mut().enumerate() {
                *d = (fp[idx] - 2.0 * f0[idx] + fm[idx]) / h2;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(nz: usize) -> GridSpec {
        GridSpec::new(8, 8, nz).unwrap()
    }

    #[test]
    fn cumulative_integral_exact_for_affine() {
        let g = grid(9);
        let f = ScalarField3D::constant(g, 1.0);
        let ff = vertical_cumulative_integral(&f);
        for k in 0..g.nz {
            assert!((ff.at(0, 0, k) - g.z(k)).abs() < 1e-15);
        }
        assert_eq!(ff.at(3, 2, 0), 0.0);
    }

    #[test]
    fn cumulative_integral_second_order() {
        // f(z) = 2z integrates to z^2; trapezoid is exact for affine
        // integrands, so 2z is exact too. Use e^{-z} for the order check.
        let err = |nz: usize| {
            let g = grid(nz);
            let f = ScalarField3D::from_fn(g, |_, _, z| (-z).exp());
            let ff = vertical_cumulative_integral(&f);
            (ff.at(0, 0, g.nz - 1) - (1.0 - (-1.0_f64).exp())).abs()
        };
        let e65 = err(65);
        let e129 = err(129);
        assert!(err(129) < 1e-4, "e129 = {e129:.3e}");
        let ratio = e65 / e129;
        assert!((3.0..5.0).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn quadratic_cumint_close() {
        let g = grid(65);
        let f = ScalarField3D::from_fn(g, |_, _, z| 2.0 * z);
        let ff = vertical_cumulative_integral(&f);
        // exact at every node for trapezoid on a linear integrand
        assert!((ff.at(0, 0, g.nz - 1) - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn vertical_mean_matches_spec_values() {
        let g = grid(129);
        let c = ScalarField3D::constant(g, 3.5);
        assert!((vertical_mean(&c).at(0, 0) - 3.5).abs() < 1e-14);

        let lin = ScalarField3D::from_fn(g, |_, _, z| z);
        assert!((vertical_mean(&lin).at(0, 0) - 0.5).abs() < 1e-12);

        let ex = ScalarField3D::from_fn(g, |_, _, z| (-z).exp());
        assert!((vertical_mean(&ex).at(0, 0) - 0.6321206).abs() < 1e-5);
    }

    #[test]
    fn mean_equals_cumint_at_top() {
        let g = grid(17);
        let f = ScalarField3D::from_fn(g, |x, y, z| (2.0 * PI * x).sin() + z * y);
        let m = vertical_mean(&f);
        let c = vertical_cumulative_integral(&f);
        for j in 0..g.ny {
            for i in 0..g.nx {
                assert!((m.at(i, j) - c.at(i, j, g.nz - 1)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dzz_neumann_cos_profile() {
        let err = |nz: usize| {
            let g = grid(nz);
            let f = ScalarField3D::from_fn(g, |_, _, z| (PI * z).cos());
            let d = dzz_neumann(&f);
            let mut e = 0.0_f64;
            for k in 0..g.nz {
                let exact = -PI * PI * (PI * g.z(k)).cos();
                e = e.max((d.at(0, 0, k) - exact).abs());
            }
            e
        };
        let (e33, e65) = (err(33), err(65));
        let ratio = e33 / e65;
        assert!(e65 < 1e-2);
        assert!((3.0..5.0).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn dz_second_order_generic_profile() {
        let err = |nz: usize| {
            let g = grid(nz);
            let f = ScalarField3D::from_fn(g, |_, _, z| (-z).exp());
            let d = dz(&f);
            let mut e = 0.0_f64;
            for k in 0..g.nz {
                e = e.max((d.at(0, 0, k) + (-g.z(k)).exp()).abs());
            }
            e
        };
        let ratio = err(33) / err(65);
        assert!((3.0..5.1).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn constant_field_derivatives_vanish() {
        let g = grid(9);
        let f = ScalarField3D::constant(g, 2.0);
        assert_eq!(dz(&f).linf(), 0.0);
        assert_eq!(dzz_neumann(&f).linf(), 0.0);
    }
}
