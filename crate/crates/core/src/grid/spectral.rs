//! Fourier differentiation on the periodic horizontal directions.
//!
//! Plans are cached per transform length in a thread-local table; fields are
//! transformed level by level. First derivatives zero the Nyquist mode (the
//! standard real-output convention); pure second derivatives keep it.

use super::{dzz_neumann, GridSpec, HVectorField2D, HVectorField3D, ScalarField2D, ScalarField3D};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn fft_1d(data: &mut [Complex<f64>], inverse: bool) {
    let plan = PLANS.with(|p| {
        p.borrow_mut()
            .entry((data.len(), inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(data.len())
                } else {
                    planner.plan_fft_forward(data.len())
                }
            })
            .clone()
    });
    plan.process(data);
}

/// In-place 2D FFT of one `nx × ny` level (x contiguous).
fn fft2(spec: &mut [Complex<f64>], nx: usize, ny: usize, inverse: bool) {
    for row in spec.chunks_exact_mut(nx) {
        fft_1d(row, inverse);
    }
    let mut col = vec![Complex::new(0.0, 0.0); ny];
    for i in 0..nx {
        for j in 0..ny {
            col[j] = spec[j * nx + i];
        }
        fft_1d(&mut col, inverse);
        for j in 0..ny {
            spec[j * nx + i] = col[j];
        }
    }
    if inverse {
        let scale = 1.0 / (nx * ny) as f64;
        for v in spec.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward 2D FFT of every level: returns complex modes laid out like the
/// field, `(k·ny + n)·nx + m`.
pub(crate) fn fft_modes_3d(f: &ScalarField3D) -> Vec<Complex<f64>> {
    let g = f.grid;
    let mut out = Vec::with_capacity(g.len3());
    for k in 0..g.nz {
        let mut spec: Vec<Complex<f64>> =
            f.level(k).iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut spec, g.nx, g.ny, false);
        out.extend(spec);
    }
    out
}

pub(crate) fn ifft_modes_3d(grid: GridSpec, modes: &mut [Complex<f64>]) -> ScalarField3D {
    let n2 = grid.horizontal_len();
    let mut values = Vec::with_capacity(grid.len3());
    for k in 0..grid.nz {
        let spec = &mut modes[k * n2..(k + 1) * n2];
        fft2(spec, grid.nx, grid.ny, true);
        values.extend(spec.iter().map(|c| c.re));
    }
    ScalarField3D::from_values(grid, values)
}

pub(crate) fn fft_modes_2d(f: &ScalarField2D) -> Vec<Complex<f64>> {
    let g = f.grid;
    let mut spec: Vec<Complex<f64>> = f.values().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spec, g.nx, g.ny, false);
    spec
}

/// Wavenumber pair `(k_x, k_y)` of mode `(m, n)` for even-order symbols.
pub(crate) fn mode_wavenumbers(grid: GridSpec, m: usize, n: usize) -> (f64, f64) {
    (k_full(m, grid.nx), k_full(n, grid.ny))
}

/// Wavenumbers with the Nyquist zeroed, for first-derivative symbols.
pub(crate) fn mode_wavenumbers_deriv(grid: GridSpec, m: usize, n: usize) -> (f64, f64) {
    (k_deriv(m, grid.nx), k_deriv(n, grid.ny))
}

/// Signed integer frequency of mode index `m` on an `n`-point grid.
#[inline]
fn freq(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Wavenumber for first derivatives: `2π·m` with the Nyquist mode zeroed.
#[inline]
fn k_deriv(m: usize, n: usize) -> f64 {
    if m == n / 2 {
        0.0
    } else {
        2.0 * PI * freq(m, n) as f64
    }
}

/// Wavenumber for even derivatives (Nyquist kept).
#[inline]
fn k_full(m: usize, n: usize) -> f64 {
    2.0 * PI * freq(m, n) as f64
}

fn apply_symbol_level(
    level: &[f64],
    grid: GridSpec,
    symbol: &impl Fn(usize, usize) -> Complex<f64>,
) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut spec: Vec<Complex<f64>> = level.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spec, nx, ny, false);
    for n in 0..ny {
        for m in 0..nx {
            spec[n * nx + m] *= symbol(m, n);
        }
    }
    fft2(&mut spec, nx, ny, true);
    spec.iter().map(|c| c.re).collect()
}

fn apply_symbol_2d(
    f: &ScalarField2D,
    symbol: impl Fn(usize, usize) -> Complex<f64>,
) -> ScalarField2D {
    ScalarField2D::from_values(f.grid, apply_symbol_level(f.values(), f.grid, &symbol))
}

fn apply_symbol_3d(
    f: &ScalarField3D,
    symbol: impl Fn(usize, usize) -> Complex<f64>,
) -> ScalarField3D {
    let grid = f.grid;
    let mut values = Vec::with_capacity(grid.len3());
    for k in 0..grid.nz {
        values.extend(apply_symbol_level(f.level(k), grid, &symbol));
    }
    ScalarField3D::from_values(grid, values)
}

pub fn dx_2d(f: &ScalarField2D) -> ScalarField2D {
    let g = f.grid;
    apply_symbol_2d(f, move |m, _| Complex::new(0.0, k_deriv(m, g.nx)))
}

pub fn dy_2d(f: &ScalarField2D) -> ScalarField2D {
    let g = f.grid;
    apply_symbol_2d(f, move |_, n| Complex::new(0.0, k_deriv(n, g.ny)))
}

fn dx_3d(f: &ScalarField3D) -> ScalarField3D {
    let g = f.grid;
    apply_symbol_3d(f, move |m, _| Complex::new(0.0, k_deriv(m, g.nx)))
}

fn dy_3d(f: &ScalarField3D) -> ScalarField3D {
    let g = f.grid;
    apply_symbol_3d(f, move |_, n| Complex::new(0.0, k_deriv(n, g.ny)))
}

pub fn grad_h_2d(f: &ScalarField2D) -> HVectorField2D {
    HVectorField2D {
        x: dx_2d(f),
        y: dy_2d(f),
    }
}

pub fn grad_h_3d(f: &ScalarField3D) -> HVectorField3D {
    HVectorField3D {
        x: dx_3d(f),
        y: dy_3d(f),
    }
}

pub fn div_h_2d(f: &HVectorField2D) -> ScalarField2D {
    dx_2d(&f.x).add(&dy_2d(&f.y))
}

pub fn div_h_3d(f: &HVectorField3D) -> ScalarField3D {
    dx_3d(&f.x).add(&dy_3d(&f.y))
}

pub fn laplacian_h_2d(f: &ScalarField2D) -> ScalarField2D {
    let g = f.grid;
    apply_symbol_2d(f, move |m, n| {
        let kx = k_full(m, g.nx);
        let ky = k_full(n, g.ny);
        Complex::new(-(kx * kx + ky * ky), 0.0)
    })
}

pub fn laplacian_h_3d(f: &ScalarField3D) -> ScalarField3D {
    let g = f.grid;
    apply_symbol_3d(f, move |m, n| {
        let kx = k_full(m, g.nx);
        let ky = k_full(n, g.ny);
        Complex::new(-(kx * kx + ky * ky), 0.0)
    })
}

/// Full Laplacian `Δ = Δ_H + ∂_zz` for fields satisfying the Neumann
/// conditions `∂_z f|_{z=0,1} = 0`.
pub fn laplacian3(f: &ScalarField3D) -> ScalarField3D {
    laplacian_h_3d(f).add(&dzz_neumann(f))
}

/// `∂²f/∂y_a∂y_b` with `(a,b) ∈ {(0,0),(0,1),(1,0),(1,1)}` mapping to
/// `(x,y)` pairs. Mixed derivatives zero the Nyquist mode in each odd factor.
pub fn second_derivative_h_3d(f: &ScalarField3D, a: usize, b: usize) -> ScalarField3D {
    let g = f.grid;
    apply_symbol_3d(f, move |m, n| {
        let ka = if a == 0 { k_deriv(m, g.nx) } else { k_deriv(n, g.ny) };
        let kb = if b == 0 { k_deriv(m, g.nx) } else { k_deriv(n, g.ny) };
        if a == b {
            let k = if a == 0 { k_full(m, g.nx) } else { k_full(n, g.ny) };
            Complex::new(-k * k, 0.0)
        } else {
            Complex::new(-ka * kb, 0.0)
        }
    })
}

/// `∇_H(div_H F)` componentwise.
pub fn grad_h_div_h(f: &HVectorField3D) -> HVectorField3D {
    let d = div_h_3d(f);
    grad_h_3d(&d)
}

/// 2/3-rule spectral filter: zero all modes with |freq| > n/3.
pub fn dealias_2d(f: &ScalarField2D) -> ScalarField2D {
    let g = f.grid;
    apply_symbol_2d(f, move |m, n| {
        let fx = freq(m, g.nx).unsigned_abs() as usize;
        let fy = freq(n, g.ny).unsigned_abs() as usize;
        if 3 * fx > g.nx || 3 * fy > g.ny {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(1.0, 0.0)
        }
    })
}

pub fn dealias_3d(f: &ScalarField3D) -> ScalarField3D {
    let g = f.grid;
    apply_symbol_3d(f, move |m, n| {
        let fx = freq(m, g.nx).unsigned_abs() as usize;
        let fy = freq(n, g.ny).unsigned_abs() as usize;
        if 3 * fx > g.nx || 3 * fy > g.ny {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(1.0, 0.0)
        }
    })
}
