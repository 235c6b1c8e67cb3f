//! Eulerian diagnostics of the recast system: the averaged flux `b`, the
//! diagnostic vertical velocity, per-equation residuals of both the recast
//! form and the original system, the energy budget, and the pressure-work
//! identity.
//!
//! All diagnostics use the quadrature-normalized `B̂` (see [`crate::thermo`])
//! so the discrete `(ρ̄B̂w)(·,1)` is exactly the cumulative quadrature of the
//! averaged-continuity residual.

use crate::error::Result;
use crate::grid::{
    div_h_2d, div_h_3d, dz, grad_h_2d, grad_h_3d, grad_h_div_h, laplacian3,
    vertical_cumulative_integral, vertical_mean, GridSpec, HVectorField2D, HVectorField3D,
    ScalarField2D, ScalarField3D,
};
use crate::thermo::{bhat_quadnorm, check_in_regime, frechet_dbhat_quadnorm, Equilibrium};
use std::io::Write;

/// Prognostic triple at one time level.
#[derive(Clone, Debug)]
pub struct State {
    pub rho_bar: ScalarField2D,
    pub v: HVectorField3D,
    pub theta: ScalarField3D,
    pub time: f64,
}

impl State {
    pub fn equilibrium(grid: GridSpec, eq: &Equilibrium) -> State {
        State {
            rho_bar: ScalarField2D::constant(grid, eq.rho_bar_star),
            v: HVectorField3D::zeros(grid),
            theta: ScalarField3D::constant(grid, eq.theta_star),
            time: 0.0,
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.theta.grid
    }

    pub fn validate(&self, eq: &Equilibrium) -> Result<()> {
        self.rho_bar.validate_finite("rho_bar")?;
        self.v.validate_finite("v")?;
        self.theta.validate_finite("theta")?;
        check_in_regime(&self.theta, eq)
    }

    /// Max one-sided `|∂_z v|`, `|∂_z Θ|` at `z ∈ {0,1}` — the discrete
    /// Neumann defect, which stays at discretization-zero along valid runs.
    pub fn boundary_neumann_defect(&self) -> (f64, f64) {
        let g = self.grid();
        let dv = dz(&self.v.x);
        let dv2 = dz(&self.v.y);
        let dt = dz(&self.theta);
        let mut v_max = 0.0_f64;
        let mut t_max = 0.0_f64;
        for k in [0, g.nz - 1] {
            for val in dv.level(k).iter().chain(dv2.level(k)) {
                v_max = v_max.max(val.abs());
            }
            for val in dt.level(k) {
                t_max = t_max.max(val.abs());
            }
        }
        (v_max, t_max)
    }

    /// Maximum-norm distance to another state over all prognostic fields.
    pub fn linf_distance(&self, other: &State) -> f64 {
        self.rho_bar
            .sub(&other.rho_bar)
            .linf()
            .max(self.v.sub(&other.v).linf())
            .max(self.theta.sub(&other.theta).linf())
    }
}

/// Time-derivative carrier for the prognostic triple.
#[derive(Clone, Debug)]
pub struct Tendencies {
    pub d_rho_bar: ScalarField2D,
    pub d_v: HVectorField3D,
    pub d_theta: ScalarField3D,
}

impl Tendencies {
    pub fn zeros(grid: GridSpec) -> Self {
        Tendencies {
            d_rho_bar: ScalarField2D::zeros(grid),
            d_v: HVectorField3D::zeros(grid),
            d_theta: ScalarField3D::zeros(grid),
        }
    }
}

/// Which viscous-heating closure is active in the temperature equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiVariant {
    /// No viscous heating (drops the closure; energy is then not conserved).
    Off,
    /// `Φ = μ|∇v|² + μ′|div_H v|²` with the full 3D gradient — the closure
    /// under which the total energy is conserved.
    FullGradient,
    /// `Φ = μ|∇_H v|² + μ′|div_H v|²` (horizontal gradient only).
    HorizontalGradient,
}

/// Per-equation source fields (prescribed heating, viscous dissipation,
/// manufactured sources), already evaluated at the state's time.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub mass: Option<ScalarField2D>,
    pub momentum: Option<HVectorField3D>,
    pub heat: Option<ScalarField3D>,
}

impl Sources {
    pub fn none() -> Self {
        Sources::default()
    }
}

/// Viscous dissipation `Φ(v)` for the selected variant.
pub fn phi_dissipation(
    v: &HVectorField3D,
    mu: f64,
    mu_prime: f64,
    variant: PhiVariant,
) -> ScalarField3D {
    let grid = v.grid();
    match variant {
        PhiVariant::Off => ScalarField3D::zeros(grid),
        PhiVariant::FullGradient | PhiVariant::HorizontalGradient => {
            let gx = grad_h_3d(&v.x);
            let gy = grad_h_3d(&v.y);
            let mut sq = gx
                .x
                .mul(&gx.x)
                .add(&gx.y.mul(&gx.y))
                .add(&gy.x.mul(&gy.x))
                .add(&gy.y.mul(&gy.y));
            if variant == PhiVariant::FullGradient {
                let dzx = dz(&v.x);
                let dzy = dz(&v.y);
                sq = sq.add(&dzx.mul(&dzx)).add(&dzy.mul(&dzy));
            }
            let divv = div_h_3d(v);
            sq.scale(mu).add(&divv.mul(&divv).scale(mu_prime))
        }
    }
}

/// Averaged flux `b = ∫₀¹ B̂(Θ) v dη` componentwise.
pub fn b_field(state: &State) -> Result<HVectorField2D> {
    let bh = bhat_quadnorm(&state.theta)?;
    Ok(HVectorField2D {
        x: vertical_mean(&bh.mul(&state.v.x)),
        y: vertical_mean(&bh.mul(&state.v.y)),
    })
}

/// Diagnostic vertical velocity together with the quantities the solver and
/// the residual evaluators reuse.
pub struct VerticalVelocity {
    pub w: ScalarField3D,
    /// `(ρ̄ B̂ w)(z)`, the cumulative integral before division.
    pub rho_bhat_w: ScalarField3D,
    /// `∂_z w` evaluated through the derivative of the defining integral
    /// (the integrand), not by differencing the cumulative integral; the
    /// two agree at quadrature order.
    pub dz_w: ScalarField3D,
}

/// `(ρ̄B̂w)(z) = −∫₀ᶻ [∂_t(ρ̄B̂) + div_H(ρ̄B̂v)] dη`, then `w = (ρ̄B̂w)/(ρ̄B̂)`.
///
/// With `∂_t ρ̄` taken from the averaged continuity equation this is exactly
/// the expanded kernel `B̂(v−b)·∇_H ρ̄ + ρ̄(∂_tB̂ + div_H(B̂v) − B̂ div_H b)`;
/// passing the actual tendency keeps `w(·,·,1)` proportional to the discrete
/// averaged-continuity residual. `w(·,·,0) = 0` exactly.
pub fn vertical_velocity_full(
    state: &State,
    d_rho_bar_dt: &ScalarField2D,
    d_theta_dt: &ScalarField3D,
) -> Result<VerticalVelocity> {
    let bh = bhat_quadnorm(&state.theta)?;
    let dbh_dt = frechet_dbhat_quadnorm(&state.theta, d_theta_dt)?;
    let d_rho3 = bh.mul_2d(d_rho_bar_dt).add(&dbh_dt.mul_2d(&state.rho_bar));
    let flux = HVectorField3D {
        x: bh.mul(&state.v.x).mul_2d(&state.rho_bar),
        y: bh.mul(&state.v.y).mul_2d(&state.rho_bar),
    };
    let integrand = d_rho3.add(&div_h_3d(&flux));
    let rho_bhat_w = vertical_cumulative_integral(&integrand).scale(-1.0);
    let rho_bh = bh.mul_2d(&state.rho_bar);
    let inv = rho_bh.guarded_recip("rho_bar * bhat")?;
    let w = rho_bhat_w.mul(&inv);
    let dz_rho_bh = dz(&bh).mul_2d(&state.rho_bar);
    let dz_w = integrand.scale(-1.0).sub(&w.mul(&dz_rho_bh)).mul(&inv);
    Ok(VerticalVelocity {
        w,
        rho_bhat_w,
        dz_w,
    })
}

pub fn vertical_velocity(
    state: &State,
    d_rho_bar_dt: &ScalarField2D,
    d_theta_dt: &ScalarField3D,
) -> Result<ScalarField3D> {
    Ok(vertical_velocity_full(state, d_rho_bar_dt, d_theta_dt)?.w)
}

/// The substituted kernel of the paper's diagnostic formula (the form with
/// `∂_t ρ̄` eliminated through the averaged continuity equation), used as a
/// transcription audit against [`vertical_velocity_full`].
pub fn rho_bhat_w_substituted_kernel(
    state: &State,
    d_theta_dt: &ScalarField3D,
) -> Result<ScalarField3D> {
    let bh = bhat_quadnorm(&state.theta)?;
    let dbh_dt = frechet_dbhat_quadnorm(&state.theta, d_theta_dt)?;
    let b = b_field(state)?;
    let grad_rb = grad_h_2d(&state.rho_bar);
    let term1 = bh.mul(
        &state
            .v
            .x
            .sub(&b.x.broadcast_z())
            .mul(&grad_rb.x.broadcast_z())
            .add(
                &state
                    .v
                    .y
                    .sub(&b.y.broadcast_z())
                    .mul(&grad_rb.y.broadcast_z()),
            ),
    );
    let div_bv = div_h_3d(&HVectorField3D {
        x: bh.mul(&state.v.x),
        y: bh.mul(&state.v.y),
    });
    let div_b = div_h_2d(&b);
    let term2 = dbh_dt
        .add(&div_bv)
        .sub(&bh.mul_2d(&div_b))
        .mul_2d(&state.rho_bar);
    Ok(vertical_cumulative_integral(&term1.add(&term2)).scale(-1.0))
}

/// `u·∇f = v·∇_H f + w ∂_z f`.
pub fn u_dot_grad(v: &HVectorField3D, w: &ScalarField3D, f: &ScalarField3D) -> ScalarField3D {
    let gf = grad_h_3d(f);
    v.x.mul(&gf.x).add(&v.y.mul(&gf.y)).add(&w.mul(&dz(f)))
}

/// Residual fields of the recast system (one per prognostic equation).
pub struct RecastResiduals {
    pub mass: ScalarField2D,
    pub momentum: HVectorField3D,
    pub heat: ScalarField3D,
    pub w: ScalarField3D,
}

impl RecastResiduals {
    pub fn linf(&self) -> f64 {
        self.mass
            .linf()
            .max(self.momentum.linf())
            .max(self.heat.linf())
    }
}

/// Left-hand sides of the recast prognostic system evaluated on
/// `(state, tendencies)` minus sources; zero for exact solutions.
pub fn residual_recast_system(
    state: &State,
    tend: &Tendencies,
    mu: f64,
    mu_prime: f64,
    sources: &Sources,
) -> Result<RecastResiduals> {
    let bh = bhat_quadnorm(&state.theta)?;
    let rho = bh.mul_2d(&state.rho_bar);
    let b = b_field(state)?;
    let flux = HVectorField2D {
        x: state.rho_bar.mul(&b.x),
        y: state.rho_bar.mul(&b.y),
    };
    let mut mass = tend.d_rho_bar.add(&div_h_2d(&flux));
    if let Some(s) = &sources.mass {
        mass = mass.sub(s);
    }

    let vv = vertical_velocity_full(state, &tend.d_rho_bar, &tend.d_theta)?;
    let p3 = rho.mul(&state.theta);
    let grad_p = grad_h_3d(&p3);
    let gdiv = grad_h_div_h(&state.v);
    let mut mom = HVectorField3D {
        x: rho
            .mul(&tend.d_v.x.add(&u_dot_grad(&state.v, &vv.w, &state.v.x)))
            .sub(&laplacian3(&state.v.x).scale(mu))
            .sub(&gdiv.x.scale(mu_prime))
            .add(&grad_p.x),
        y: rho
            .mul(&tend.d_v.y.add(&u_dot_grad(&state.v, &vv.w, &state.v.y)))
            .sub(&laplacian3(&state.v.y).scale(mu))
            .sub(&gdiv.y.scale(mu_prime))
            .add(&grad_p.y),
    };
    if let Some(s) = &sources.momentum {
        mom = mom.sub(s);
    }

    let div_u = div_h_3d(&state.v).add(&vv.dz_w);
    let mut heat = rho
        .mul(&tend.d_theta.add(&u_dot_grad(&state.v, &vv.w, &state.theta)))
        .add(&p3.mul(&div_u))
        .sub(&laplacian3(&state.theta));
    if let Some(s) = &sources.heat {
        heat = heat.sub(s);
    }

    Ok(RecastResiduals {
        mass,
        momentum: mom,
        heat,
        w: vv.w,
    })
}

/// Residual fields of the original system assembled from the diagnostic
/// quantities `ρ = ρ̄B̂`, `p = ρΘ` and the recovered `w`. Vertical
/// derivatives here are honest finite differences, so this is an
/// independent route that agrees with the recast residual up to
/// discretization error.
pub struct CpeResiduals {
    pub mass: ScalarField3D,
    pub momentum: HVectorField3D,
    pub hydrostatic: ScalarField3D,
    pub gas_law: ScalarField3D,
    pub heat: ScalarField3D,
}

pub fn residual_full_cpe(
    state: &State,
    tend: &Tendencies,
    mu: f64,
    mu_prime: f64,
    sources: &Sources,
) -> Result<CpeResiduals> {
    let bh = bhat_quadnorm(&state.theta)?;
    let rho = bh.mul_2d(&state.rho_bar);
    let p = rho.mul(&state.theta);
    let vv = vertical_velocity_full(state, &tend.d_rho_bar, &tend.d_theta)?;
    let w = &vv.w;

    let dbh_dt = frechet_dbhat_quadnorm(&state.theta, &tend.d_theta)?;
    let d_rho = bh
        .mul_2d(&tend.d_rho_bar)
        .add(&dbh_dt.mul_2d(&state.rho_bar));
    let flux = HVectorField3D {
        x: rho.mul(&state.v.x),
        y: rho.mul(&state.v.y),
    };
    let mut mass = d_rho.add(&div_h_3d(&flux)).add(&dz(&rho.mul(w)));
    if let Some(s) = &sources.mass {
        // the 2D source acts on the averaged equation; lift through B̂
        mass = mass.sub(&bh.mul_2d(s));
    }

    let grad_p = grad_h_3d(&p);
    let gdiv = grad_h_div_h(&state.v);
    let mut mom = HVectorField3D {
        x: rho
            .mul(&tend.d_v.x.add(&u_dot_grad(&state.v, w, &state.v.x)))
            .sub(&laplacian3(&state.v.x).scale(mu))
            .sub(&gdiv.x.scale(mu_prime))
            .add(&grad_p.x),
        y: rho
            .mul(&tend.d_v.y.add(&u_dot_grad(&state.v, w, &state.v.y)))
            .sub(&laplacian3(&state.v.y).scale(mu))
            .sub(&gdiv.y.scale(mu_prime))
            .add(&grad_p.y),
    };
    if let Some(s) = &sources.momentum {
        mom = mom.sub(s);
    }

    let hydrostatic = dz(&p).add(&rho);
    let gas_law = p.sub(&rho.mul(&state.theta));

    let div_u = div_h_3d(&state.v).add(&dz(w));
    let mut heat = rho
        .mul(&tend.d_theta.add(&u_dot_grad(&state.v, w, &state.theta)))
        .add(&p.mul(&div_u))
        .sub(&laplacian3(&state.theta));
    if let Some(s) = &sources.heat {
        heat = heat.sub(s);
    }

    Ok(CpeResiduals {
        mass,
        momentum: mom,
        hydrostatic,
        gas_law,
        heat,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub kinetic: f64,
    pub internal: f64,
    pub potential: f64,
}

/// `ℰ = ∫_Ω (½ρ|v|² + ρΘ + ρz) dx` with normalized constants (c_ν = g = 1).
pub fn total_energy(state: &State) -> Result<EnergyBreakdown> {
    let g = state.grid();
    let rho = bhat_quadnorm(&state.theta)?.mul_2d(&state.rho_bar);
    let v2 = state.v.x.mul(&state.v.x).add(&state.v.y.mul(&state.v.y));
    let kinetic = rho.mul(&v2).scale(0.5).omega_integral();
    let internal = rho.mul(&state.theta).omega_integral();
    let zfield = ScalarField3D::from_fn(g, |_, _, z| z);
    let potential = rho.mul(&zfield).omega_integral();
    Ok(EnergyBreakdown {
        total: kinetic + internal + potential,
        kinetic,
        internal,
        potential,
    })
}

/// `dℰ/dt` evaluated from tendencies.
pub fn energy_rate(state: &State, tend: &Tendencies) -> Result<f64> {
    let g = state.grid();
    let bh = bhat_quadnorm(&state.theta)?;
    let rho = bh.mul_2d(&state.rho_bar);
    let dbh_dt = frechet_dbhat_quadnorm(&state.theta, &tend.d_theta)?;
    let d_rho = bh
        .mul_2d(&tend.d_rho_bar)
        .add(&dbh_dt.mul_2d(&state.rho_bar));
    let v2 = state.v.x.mul(&state.v.x).add(&state.v.y.mul(&state.v.y));
    let zfield = ScalarField3D::from_fn(g, |_, _, z| z);
    let carrier = v2.scale(0.5).add(&state.theta).add(&zfield);
    let term1 = d_rho.mul(&carrier);
    let term2 = rho.mul(
        &state
            .v
            .x
            .mul(&tend.d_v.x)
            .add(&state.v.y.mul(&tend.d_v.y))
            .add(&tend.d_theta),
    );
    Ok(term1.add(&term2).omega_integral())
}

/// Residual of the hydrostatic pressure-work identity
/// `p ∂_z w = (∂_zΘ + 1) ρ w + Θ ∂_z(ρw)`, both sides with diagnostic ρ, p.
pub fn pressure_work_identity(state: &State, w: &ScalarField3D) -> Result<ScalarField3D> {
    let rho = bhat_quadnorm(&state.theta)?.mul_2d(&state.rho_bar);
    let p = rho.mul(&state.theta);
    let lhs = p.mul(&dz(w));
    let rho_w = rho.mul(w);
    let rhs = dz(&state.theta)
        .shift(1.0)
        .mul(&rho_w)
        .add(&state.theta.mul(&dz(&rho_w)));
    Ok(lhs.sub(&rhs))
}

/// CSV time-series writer: one row per diagnostic step.
pub struct DiagnosticsCsv<W: Write> {
    out: W,
}

impl<W: Write> DiagnosticsCsv<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(
            out,
            "time,energy,kinetic,internal,potential,max_w_top,res_mass,res_momentum,res_heat"
        )?;
        Ok(DiagnosticsCsv { out })
    }

    pub fn write_row(
        &mut self,
        time: f64,
        energy: &EnergyBreakdown,
        max_w_top: f64,
        residuals: (f64, f64, f64),
    ) -> Result<()> {
        writeln!(
            self.out,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            time,
            energy.total,
            energy.kinetic,
            energy.internal,
            energy.potential,
            max_w_top,
            residuals.0,
            residuals.1,
            residuals.2
        )?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
