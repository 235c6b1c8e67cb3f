//! Structural functionals of the reformulation: pressure and density
//! representations, the vertical-profile functionals `B`, `B̄`, `B̂`, the
//! equilibrium profiles, the Fréchet derivative `DB̂` and the increments
//! `δB̂`, `δ(DB̂)`.
//!
//! All constants are normalized to one (R = c_ν = κ = g = 1). Exponentials
//! of cumulative integrals are always computed from the quadrature of `Θ⁻¹`,
//! never by multiplying incremental factors.
//!
//! Two discrete normalizations of `B̂` coexist:
//! - [`bhat`] divides by the closed form `B̄ = 1 − exp(−∫₀¹Θ⁻¹)`; its
//!   discrete column integral is `1 + O(nz⁻²)`.
//! - [`bhat_quadnorm`] divides by the trapezoid mean of `B`; its discrete
//!   column integral is 1 to machine precision, which is what makes the
//!   diagnostic vertical velocity vanish at `z = 1` exactly whenever the
//!   averaged continuity equation holds discretely. The solver and the
//!   Eulerian diagnostics use this variant; the two differ by `O(nz⁻²)`.

use crate::error::{Error, Result, POSITIVITY_GUARD};
use crate::grid::{
    dz, vertical_cumulative_integral, vertical_mean, GridSpec, ScalarField2D, ScalarField3D,
};

/// Constant equilibrium `(ρ̄*, Θ*)` with its induced vertical profiles:
/// `B̂(Θ*)(z) = exp(−z/Θ*)/(Θ*(1−exp(−1/Θ*)))`, `α = (ρ̄* B̂(Θ*))⁻¹` and
/// `β(z) = exp((z−1)/Θ*)/(Θ*(1−exp(−1/Θ*))) = B̂(Θ*)(1−z)`.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub rho_bar_star: f64,
    pub theta_star: f64,
    pub grid: GridSpec,
    bhat_star: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Equilibrium {
    pub fn new(grid: GridSpec, rho_bar_star: f64, theta_star: f64) -> Result<Self> {
        if rho_bar_star <= 0.0 {
            return Err(Error::NonPositive {
                what: "rho_bar_star",
                min: rho_bar_star,
            });
        }
        if theta_star <= 0.0 {
            return Err(Error::NonPositive {
                what: "theta_star",
                min: theta_star,
            });
        }
        let denom = theta_star * (1.0 - (-1.0 / theta_star).exp());
        let mut bhat_star = Vec::with_capacity(grid.nz);
        let mut alpha = Vec::with_capacity(grid.nz);
        let mut beta = Vec::with_capacity(grid.nz);
        for k in 0..grid.nz {
            let z = grid.z(k);
            let b = (-z / theta_star).exp() / denom;
            bhat_star.push(b);
            alpha.push(1.0 / (rho_bar_star * b));
            beta.push(((z - 1.0) / theta_star).exp() / denom);
        }
        Ok(Equilibrium {
            rho_bar_star,
            theta_star,
            grid,
            bhat_star,
            alpha,
            beta,
        })
    }

    pub fn bhat_star(&self) -> &[f64] {
        &self.bhat_star
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn bhat_star_field(&self) -> ScalarField3D {
        ScalarField3D::from_profile(self.grid, &self.bhat_star)
    }

    /// Coefficient of the `∫₀¹h` term in the linearized derivative (4.8):
    /// `exp(−1/Θ*) / (Θ*² (1−exp(−1/Θ*)))`.
    pub fn dbhat_mean_coefficient(&self) -> f64 {
        let ts = self.theta_star;
        (-1.0 / ts).exp() / (ts * ts * (1.0 - (-1.0 / ts).exp()))
    }

    /// Temperature bracket `[Θ*/2, 3Θ*/2]` of the validity regime.
    pub fn theta_bracket(&self) -> (f64, f64) {
        (0.5 * self.theta_star, 1.5 * self.theta_star)
    }

    /// Pointwise bounds that `B̂(Θ)` satisfies for every in-regime Θ.
    pub fn bhat_bracket(&self) -> (f64, f64) {
        let ts = self.theta_star;
        let lo = 2.0 / (3.0 * ts) * (-2.0 / ts).exp() / (1.0 - (-2.0 / ts).exp());
        let hi = 2.0 / ts / (1.0 - (-2.0 / (3.0 * ts)).exp());
        (lo, hi)
    }
}

/// Temperature field with optional surface pressure, the thermodynamic part
/// of a state.
#[derive(Clone, Debug)]
pub struct ThermoState {
    pub theta: ScalarField3D,
    pub p_s: Option<ScalarField2D>,
}

impl ThermoState {
    pub fn in_regime(&self, eq: &Equilibrium) -> Result<()> {
        check_in_regime(&self.theta, eq)
    }
}

/// Errors unless `Θ*/2 ≤ Θ ≤ 3Θ*/2` everywhere. Out-of-regime fields are
/// rejected rather than clamped: silent clamping would mask solver
/// divergence.
pub fn check_in_regime(theta: &ScalarField3D, eq: &Equilibrium) -> Result<()> {
    let (lo, hi) = eq.theta_bracket();
    let g = theta.grid;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut first_bad = None;
    for k in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let v = theta.at(i, j, k);
                min = min.min(v);
                max = max.max(v);
                if (v < lo || v > hi) && first_bad.is_none() {
                    first_bad = Some((i, j, k));
                }
            }
        }
    }
    match first_bad {
        None => Ok(()),
        Some(at) => Err(Error::OutOfRegime {
            what: "theta",
            min,
            max,
            lo,
            hi,
            at,
        }),
    }
}

fn check_positive(theta: &ScalarField3D) -> Result<()> {
    let min = theta.min();
    if min <= POSITIVITY_GUARD {
        return Err(Error::NonPositive {
            what: "theta",
            min,
        });
    }
    Ok(())
}

/// `A(Θ)(z) = ∫₀ᶻ Θ⁻¹ dη`.
fn cumulative_inv_theta(theta: &ScalarField3D) -> Result<ScalarField3D> {
    check_positive(theta)?;
    Ok(vertical_cumulative_integral(&theta.map(|t| 1.0 / t)))
}

/// `B(Θ)(z) = Θ(z)⁻¹ exp(−∫₀ᶻ Θ⁻¹ dη)`.
pub fn b_of_theta(theta: &ScalarField3D) -> Result<ScalarField3D> {
    let a = cumulative_inv_theta(theta)?;
    Ok(a.zip_map(theta, |av, tv| (-av).exp() / tv))
}

/// `B̄(Θ) = 1 − exp(−∫₀¹ Θ⁻¹ dη)`; coincides with the vertical mean of
/// `B(Θ)` up to quadrature error.
pub fn bbar(theta: &ScalarField3D) -> Result<ScalarField2D> {
    check_positive(theta)?;
    let a1 = vertical_mean(&theta.map(|t| 1.0 / t));
    Ok(a1.map(|a| 1.0 - (-a).exp()))
}

/// Normalized functional `B̂ = B/B̄` per column (paper normalization: the
/// discrete column integral is `1 + O(nz⁻²)`).
pub fn bhat(theta: &ScalarField3D) -> Result<ScalarField3D> {
    let b = b_of_theta(theta)?;
    let inv_bbar = bbar(theta)?.guarded_recip("bbar")?;
    Ok(b.mul_2d(&inv_bbar))
}

/// Quadrature-normalized variant `B/quad(B)`: discrete column integral is 1
/// to machine precision. Used by the Eulerian diagnostics and the solver.
pub fn bhat_quadnorm(theta: &ScalarField3D) -> Result<ScalarField3D> {
    let b = b_of_theta(theta)?;
    let inv_mean = vertical_mean(&b).guarded_recip("quad(B)")?;
    Ok(b.mul_2d(&inv_mean))
}

/// Pressure representation `p = p_s · exp(−∫₀ᶻ Θ⁻¹ dη)`.
pub fn pressure(p_s: &ScalarField2D, theta: &ScalarField3D) -> Result<ScalarField3D> {
    let a = cumulative_inv_theta(theta)?;
    Ok(a.map(|av| (-av).exp()).mul_2d(p_s))
}

/// Top pressure `p_t = p_s · exp(−∫₀¹ Θ⁻¹ dη)`; `ρ̄ = p_s − p_t`.
pub fn pressure_top(p_s: &ScalarField2D, theta: &ScalarField3D) -> Result<ScalarField2D> {
    check_positive(theta)?;
    let a1 = vertical_mean(&theta.map(|t| 1.0 / t));
    Ok(p_s.zip_map(&a1, |ps, a| ps * (-a).exp()))
}

/// Density representation `ρ = ρ̄ · B̂(Θ)` (paper normalization).
pub fn density(rho_bar: &ScalarField2D, theta: &ScalarField3D) -> Result<ScalarField3D> {
    Ok(bhat(theta)?.mul_2d(rho_bar))
}

/// The Fréchet derivative `(DB̂)(Θ)[h]`: with `A(z) = ∫₀ᶻΘ⁻¹`,
/// `I = 1 − exp(−A(1))` and `N = exp(−A)/Θ`,
///
/// ```text
/// (DB̂)(Θ)[h] = exp(−A)/I · ( −h/Θ² + Θ⁻¹ ∫₀ᶻ h/Θ² )
///            + N/I² · exp(−A(1)) · ∫₀¹ h/Θ².
/// ```
pub fn frechet_dbhat(theta: &ScalarField3D, h: &ScalarField3D) -> Result<ScalarField3D> {
    let a = cumulative_inv_theta(theta)?;
    let e = a.map(|v| (-v).exp());
    let h_over_t2 = h.zip_map(theta, |hv, tv| hv / (tv * tv));
    let g = vertical_cumulative_integral(&h_over_t2);
    let g1 = vertical_mean(&h_over_t2);
    let i_field = bbar(theta)?;
    let inv_i = i_field.guarded_recip("I(theta)")?;
    // exp(−A(1)) = 1 − I
    let e1 = i_field.map(|v| 1.0 - v);

    // first part: (E/I)(−h/Θ² + (1/Θ) G)
    let part1 = e
        .zip_map(&h_over_t2, |ev, hv| -ev * hv)
        .add(&e.zip_map(&g.zip_map(theta, |gv, tv| gv / tv), |ev, gv| ev * gv))
        .mul_2d(&inv_i);
    // second part: (N/I²)·exp(−A(1))·G1
    let n = e.zip_map(theta, |ev, tv| ev / tv);
    let coeff = inv_i
        .zip_map(&inv_i, |a, b| a * b)
        .zip_map(&e1, |ii, e1v| ii * e1v)
        .zip_map(&g1, |c, g1v| c * g1v);
    Ok(part1.add(&n.mul_2d(&coeff)))
}

/// Fréchet derivative of the quadrature-normalized functional `B/quad(B)`.
pub fn frechet_dbhat_quadnorm(theta: &ScalarField3D, h: &ScalarField3D) -> Result<ScalarField3D> {
    let b = b_of_theta(theta)?;
    let q = vertical_mean(&b);
    let inv_q = q.guarded_recip("quad(B)")?;
    // DB[h] = exp(−A)·((1/Θ)∫₀ᶻ h/Θ² − h/Θ²)
    let a = cumulative_inv_theta(theta)?;
    let e = a.map(|v| (-v).exp());
    let h_over_t2 = h.zip_map(theta, |hv, tv| hv / (tv * tv));
    let g = vertical_cumulative_integral(&h_over_t2);
    let db = e.mul(&g.zip_map(theta, |gv, tv| gv / tv).sub(&h_over_t2));
    let qdb = vertical_mean(&db);
    // DB/q − B·quad(DB)/q²
    let term1 = db.mul_2d(&inv_q);
    let coeff = qdb.zip_map(&inv_q, |qd, iq| qd * iq * iq);
    Ok(term1.sub(&b.mul_2d(&coeff)))
}

/// The linearization at the equilibrium, eq. (4.8):
///
/// ```text
/// (DB̂)(Θ*)[h] = B̂(Θ*)·( −h/Θ* + (Θ*)⁻² ∫₀ᶻ h
///               + exp(−1/Θ*)/((Θ*)²(1−exp(−1/Θ*))) ∫₀¹ h ).
/// ```
pub fn dbhat_equilibrium(eq: &Equilibrium, h: &ScalarField3D) -> ScalarField3D {
    let ts = eq.theta_star;
    let c = eq.dbhat_mean_coefficient();
    let hint = vertical_cumulative_integral(h);
    let hmean = vertical_mean(h);
    let inner = h
        .scale(-1.0 / ts)
        .add(&hint.scale(1.0 / (ts * ts)))
        .add(&hmean.scale(c).broadcast_z());
    inner.mul_profile(eq.bhat_star())
}

/// `δB̂(Θ^L, Θ*) = B̂(Θ^L + Θ*) − B̂(Θ*)`.
pub fn delta_bhat(theta_l: &ScalarField3D, eq: &Equilibrium) -> Result<ScalarField3D> {
    let total = theta_l.shift(eq.theta_star);
    check_in_regime(&total, eq)?;
    Ok(bhat(&total)?.sub(&eq.bhat_star_field()))
}

/// `δ(DB̂)(Θ^L, Θ*)[h] = (DB̂)(Θ^L + Θ*)[h] − (DB̂)(Θ*)[h]`.
pub fn delta_dbhat(
    theta_l: &ScalarField3D,
    eq: &Equilibrium,
    h: &ScalarField3D,
) -> Result<ScalarField3D> {
    let total = theta_l.shift(eq.theta_star);
    check_in_regime(&total, eq)?;
    Ok(frechet_dbhat(&total, h)?.sub(&dbhat_equilibrium(eq, h)))
}

/// Residual of the hydrostatic identity `∂_z(B̂(Θ)Θ) = −B̂(Θ)` per column.
pub fn hydrostatic_identity_residual(theta: &ScalarField3D) -> Result<ScalarField3D> {
    let bh = bhat(theta)?;
    Ok(dz(&bh.mul(theta)).add(&bh))
}
