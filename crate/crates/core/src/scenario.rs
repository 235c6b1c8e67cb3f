//! Initial-condition library. Every scenario respects the compatibility
//! conditions `∂_z v₀|_{z=0,1} = ∂_z Θ₀|_{z=0,1} = 0` analytically
//! (vertical structure built from `cos(kπz)`).

use crate::diagnostics::State;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, HVectorField3D, ScalarField2D, ScalarField3D};
use crate::mms::ManufacturedSolution;
use crate::thermo::Equilibrium;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Equilibrium,
    /// Single vertical cosine mode times a horizontal cosine in Θ.
    ThetaBump,
    /// z-uniform horizontal shear in v.
    ShearV,
    /// Closed-form fields with appended sources (order verification).
    Manufactured1,
    /// Seeded smooth random perturbation of all three fields.
    RandomSmooth,
}

impl Scenario {
    pub fn from_name(name: &str) -> Result<Scenario> {
        match name {
            "equilibrium" => Ok(Scenario::Equilibrium),
            "theta-bump" => Ok(Scenario::ThetaBump),
            "shear-v" => Ok(Scenario::ShearV),
            "manufactured-1" => Ok(Scenario::Manufactured1),
            "random-smooth" => Ok(Scenario::RandomSmooth),
            other => Err(Error::InvalidConfig(format!(
                "unknown scenario '{other}' (known: equilibrium, theta-bump, shear-v, manufactured-1, random-smooth)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Equilibrium => "equilibrium",
            Scenario::ThetaBump => "theta-bump",
            Scenario::ShearV => "shear-v",
            Scenario::Manufactured1 => "manufactured-1",
            Scenario::RandomSmooth => "random-smooth",
        }
    }
}

/// The manufactured solution a `manufactured-1` run uses, with amplitudes
/// scaled so the perturbation size is `eps`.
pub fn manufactured_for(eq: &Equilibrium, eps: f64, mu: f64, mu_prime: f64) -> ManufacturedSolution {
    let base = ManufacturedSolution::standard(eq.rho_bar_star, eq.theta_star, mu, mu_prime);
    let scale = eps / base.a_theta.max(1e-300);
    base.scaled(scale)
}

pub fn initial_state(
    scenario: Scenario,
    grid: GridSpec,
    eq: &Equilibrium,
    eps: f64,
    seed: u64,
    mu: f64,
    mu_prime: f64,
) -> Result<State> {
    let state = match scenario {
        Scenario::Equilibrium => State::equilibrium(grid, eq),
        Scenario::ThetaBump => State {
            rho_bar: ScalarField2D::constant(grid, eq.rho_bar_star),
            v: HVectorField3D::zeros(grid),
            theta: ScalarField3D::from_fn(grid, |x, y, z| {
                eq.theta_star + eps * (2.0 * PI * x).cos() * (2.0 * PI * y).cos() * (PI * z).cos()
            }),
            time: 0.0,
        },
        Scenario::ShearV => State {
            rho_bar: ScalarField2D::constant(grid, eq.rho_bar_star),
            v: HVectorField3D {
                x: ScalarField3D::from_fn(grid, |_, y, _| eps * (2.0 * PI * y).sin()),
                y: ScalarField3D::zeros(grid),
            },
            theta: ScalarField3D::constant(grid, eq.theta_star),
            time: 0.0,
        },
        Scenario::Manufactured1 => manufactured_for(eq, eps, mu, mu_prime).state(grid, 0.0),
        Scenario::RandomSmooth => random_state(grid, eq, eps, seed),
    };
    state.validate(eq)?;
    Ok(state)
}

/// Smooth random field: a few low horizontal modes times `cos(kπz)`,
/// normalized to max amplitude 1.
pub fn random_smooth_3d(grid: GridSpec, seed: u64) -> ScalarField3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::new();
    for _ in 0..6 {
        let mx = rng.random_range(0..3) as f64;
        let my = rng.random_range(0..3) as f64;
        let kz = rng.random_range(0..3) as f64;
        let amp: f64 = rng.random_range(-1.0..1.0);
        let phx: f64 = rng.random_range(0.0..(2.0 * PI));
        let phy: f64 = rng.random_range(0.0..(2.0 * PI));
        modes.push((mx, my, kz, amp, phx, phy));
    }
    let f = ScalarField3D::from_fn(grid, |x, y, z| {
        modes
            .iter()
            .map(|(mx, my, kz, amp, phx, phy)| {
                amp * (2.0 * PI * mx * x + phx).cos()
                    * (2.0 * PI * my * y + phy).cos()
                    * (PI * kz * z).cos()
            })
            .sum::<f64>()
    });
    let m = f.linf().max(1e-300);
    f.scale(1.0 / m)
}

pub fn random_smooth_2d(grid: GridSpec, seed: u64) -> ScalarField2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::new();
    for _ in 0..5 {
        let mx = rng.random_range(0..3) as f64;
        let my = rng.random_range(0..3) as f64;
        let amp: f64 = rng.random_range(-1.0..1.0);
        let phx: f64 = rng.random_range(0.0..(2.0 * PI));
        let phy: f64 = rng.random_range(0.0..(2.0 * PI));
        modes.push((mx, my, amp, phx, phy));
    }
    let f = ScalarField2D::from_fn(grid, |x, y| {
        modes
            .iter()
            .map(|(mx, my, amp, phx, phy)| {
                amp * (2.0 * PI * mx * x + phx).cos() * (2.0 * PI * my * y + phy).cos()
            })
            .sum::<f64>()
    });
    let m = f.linf().max(1e-300);
    f.scale(1.0 / m)
}

/// Random in-regime temperature: `Θ* (1 + a·shape)` with `|a·shape| ≤ a`.
pub fn random_theta_in_regime(
    grid: GridSpec,
    eq: &Equilibrium,
    relative_amplitude: f64,
    seed: u64,
) -> ScalarField3D {
    assert!(relative_amplitude < 0.5);
    random_smooth_3d(grid, seed)
        .scale(relative_amplitude * eq.theta_star)
        .shift(eq.theta_star)
}

fn random_state(grid: GridSpec, eq: &Equilibrium, eps: f64, seed: u64) -> State {
    State {
        rho_bar: random_smooth_2d(grid, seed ^ 0x9e37)
            .scale(eps * eq.rho_bar_star)
            .shift(eq.rho_bar_star),
        v: HVectorField3D {
            x: random_smooth_3d(grid, seed ^ 0x51ed).scale(eps),
            y: random_smooth_3d(grid, seed ^ 0xc0fe).scale(eps),
        },
        theta: random_smooth_3d(grid, seed)
            .scale(eps * eq.theta_star)
            .shift(eq.theta_star),
        time: 0.0,
    }
}
