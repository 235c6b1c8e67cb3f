//! Property tests for the structural invariants that hold for *any*
//! admissible input, not just the hand-picked cases.

use cpe_core::grid::{
    dx_2d, grad_h_3d, vertical_cumulative_integral, vertical_mean, GridSpec, ScalarField2D,
    ScalarField3D,
};
use cpe_core::linear::{apply_l, apply_l_inverse};
use cpe_core::thermo::{bhat_quadnorm, dbhat_equilibrium, Equilibrium};
use proptest::prelude::*;
use std::f64::consts::PI;

fn small_grid() -> GridSpec {
    GridSpec::new(8, 8, 9).unwrap()
}

/// A smooth field from a handful of bounded random mode amplitudes.
fn field_from(amps: &[f64], grid: GridSpec) -> ScalarField3D {
    ScalarField3D::from_fn(grid, |x, y, z| {
        amps[0]
            + amps[1] * (2.0 * PI * x).cos() * (PI * z).cos()
            + amps[2] * (2.0 * PI * y).sin()
            + amps[3] * (4.0 * PI * (x + y)).cos() * (2.0 * PI * z).cos()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cumulative_integral_exact_for_affine(a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let g = small_grid();
        let f = ScalarField3D::from_fn(g, |_, _, _| b);
        let cum = vertical_cumulative_integral(&f);
        for k in 0..g.nz {
            let exact = b * g.z(k);
            prop_assert!((cum.at(0, 0, k) - exact).abs() < 1e-13 * (1.0 + b.abs()));
        }
        // affine integrand a + 2bz integrates to az + bz² exactly under
        // trapezoid
        let f2 = ScalarField3D::from_fn(g, |_, _, z| a + 2.0 * b * z);
        let cum2 = vertical_cumulative_integral(&f2);
        for k in 0..g.nz {
            let z = g.z(k);
            let exact = a * z + b * z * z;
            prop_assert!((cum2.at(3, 4, k) - exact).abs() < 1e-12 * (1.0 + a.abs() + b.abs()));
        }
    }

    #[test]
    fn mean_commutes_with_horizontal_gradient(
        amps in prop::array::uniform4(-2.0..2.0f64),
    ) {
        let g = small_grid();
        let f = field_from(&amps, g);
        let a = vertical_mean(&grad_h_3d(&f).x);
        let b = dx_2d(&vertical_mean(&f));
        prop_assert!(a.sub(&b).linf() < 1e-11);
    }

    #[test]
    fn quadnorm_bhat_has_unit_column_integral(
        amps in prop::array::uniform4(0.0..0.1f64),
    ) {
        let g = small_grid();
        let theta = field_from(&amps, g).shift(1.0);
        prop_assume!(theta.min() > 0.5);
        let bq = bhat_quadnorm(&theta).unwrap();
        let m = vertical_mean(&bq);
        prop_assert!(m.map(|v| v - 1.0).linf() < 1e-13);
    }

    #[test]
    fn l_inverse_round_trips(amps in prop::array::uniform4(-3.0..3.0f64)) {
        let g = small_grid();
        let eq = Equilibrium::new(g, 1.0, 1.0).unwrap();
        let f = field_from(&amps, g);
        let round = apply_l_inverse(&apply_l(&f, &eq), &eq);
        prop_assert!(round.sub(&f).linf() < 1e-12 * (1.0 + f.linf()));
    }

    #[test]
    fn equilibrium_derivative_has_mean_zero(
        amps in prop::array::uniform4(-2.0..2.0f64),
        theta_star in 0.5..2.0f64,
    ) {
        let g = GridSpec::new(8, 8, 33).unwrap();
        let eq = Equilibrium::new(g, 1.0, theta_star).unwrap();
        let h = field_from(&amps, g);
        let d = dbhat_equilibrium(&eq, &h);
        let m = vertical_mean(&d).linf();
        // quadrature-order tolerance, scaled by the direction size
        prop_assert!(m < 2e-2 * (1.0 + h.linf()), "mean = {m}");
    }

    #[test]
    fn spectral_derivative_annihilates_means(c in -10.0..10.0f64) {
        let g = small_grid();
        let f = ScalarField2D::from_fn(g, |x, y| c + (2.0 * PI * x).sin() * (2.0 * PI * y).cos());
        prop_assert!(dx_2d(&f).mean().abs() < 1e-12 * (1.0 + c.abs()));
    }
}
