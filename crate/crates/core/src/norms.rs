//! Discrete Sobolev norm proxies used by the reports: spectral Sobolev
//! weights horizontally, trapezoid L² with difference quotients vertically,
//! grid max plus first derivatives for W^{1,∞}.

use crate::grid::{dz, ScalarField2D, ScalarField3D};

/// `‖f‖_{L²(T²)}` (cell area 1).
pub fn l2_torus(f: &ScalarField2D) -> f64 {
    (f.values().iter().map(|v| v * v).sum::<f64>() * f.grid.horizontal_weight()).sqrt()
}

/// `‖f‖_{L²(Ω)}` with trapezoid weights vertically.
pub fn l2_omega(f: &ScalarField3D) -> f64 {
    f.mul(f).omega_integral().max(0.0).sqrt()
}

/// Spectral `H^s(T²)` norm: `(Σ (1+|k|²)^s |f̂_k|²)^{1/2}`.
pub fn sobolev_torus(f: &ScalarField2D, s: f64) -> f64 {
    let g = f.grid;
    let modes = crate::grid::fft_modes_2d(f);
    let mut acc = 0.0;
    let norm = (g.nx * g.ny) as f64;
    for n in 0..g.ny {
        for m in 0..g.nx {
            let (kx, ky) = crate::grid::mode_wavenumbers(g, m, n);
            let k2 = kx * kx + ky * ky;
            let c = modes[n * g.nx + m] / norm;
            acc += (1.0 + k2).powf(s) * c.norm_sqr();
        }
    }
    acc.sqrt()
}

/// Anisotropic `H^s(Ω)` proxy:
/// `(Σ_{j≤s} ∫₀¹ ‖∂_z^j f(·,z)‖²_{H^{s−j}(T²)} dz)^{1/2}`.
pub fn sobolev_omega(f: &ScalarField3D, s: usize) -> f64 {
    let g = f.grid;
    let w = g.trapezoid_weights();
    let mut acc = 0.0;
    let mut current = f.clone();
    for j in 0..=s {
        let horiz_order = (s - j) as f64;
        for k in 0..g.nz {
            let lvl = current.level_field(k);
            let n = sobolev_torus(&lvl, horiz_order);
            acc += w[k] * n * n;
        }
        if j < s {
            current = dz(&current);
        }
    }
    acc.sqrt()
}

/// `W^{1,∞}` proxy: grid max of values and first derivatives.
pub fn w1inf_omega(f: &ScalarField3D) -> f64 {
    let gh = crate::grid::grad_h_3d(f);
    f.linf().max(gh.linf()).max(dz(f).linf())
}
