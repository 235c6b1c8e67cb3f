//! Run configuration: a single JSON file with nested blocks. Unknown fields
//! are rejected so typos surface with line/column positions.

use crate::diagnostics::PhiVariant;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::solver::{Scheme, SolverConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    #[serde(default)]
    pub dealias: bool,
}

fn default_phi() -> PhiVariant {
    PhiVariant::FullGradient
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsBlock {
    pub rho_bar_star: f64,
    pub theta_star: f64,
    pub mu: f64,
    pub mu_prime: f64,
    #[serde(default = "default_phi")]
    pub phi: PhiVariant,
    #[serde(default)]
    pub q: QSpec,
}

/// Prescribed diabatic heating.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QSpec {
    #[default]
    None,
    /// `Q = amplitude · cos(2πx)cos(2πy)cos(πz)`.
    Cosine { amplitude: f64 },
    /// `Q = amplitude` everywhere.
    Uniform { amplitude: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    pub scenario: String,
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_time_order() -> usize {
    1
}

fn default_picard_tol() -> f64 {
    1e-9
}

fn default_picard_iters() -> usize {
    12
}

fn default_store_every() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    #[serde(default = "default_time_order")]
    pub time_order: usize,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_iters")]
    pub picard_max_iters: usize,
    #[serde(default = "default_store_every")]
    pub store_every: usize,
}

fn default_cadence() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: String,
    /// Field dumps every this many steps (0 = no dumps).
    #[serde(default = "default_cadence")]
    pub dump_cadence: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridBlock,
    pub physics: PhysicsBlock,
    pub initial: InitialBlock,
    pub solver: SolverBlock,
    pub output: OutputBlock,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.grid.nx, self.grid.ny, self.grid.nz)?;
        crate::scenario::Scenario::from_name(&self.initial.scenario)?;
        if self.physics.rho_bar_star <= 0.0 || self.physics.theta_star <= 0.0 {
            return Err(Error::InvalidConfig(
                "rho_bar_star and theta_star must be positive".into(),
            ));
        }
        self.solver_config().validate()
    }

    pub fn grid_spec(&self) -> GridSpec {
        let mut g = GridSpec::new(self.grid.nx, self.grid.ny, self.grid.nz)
            .expect("validated grid");
        g.dealias = self.grid.dealias;
        g
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            dt: self.solver.dt,
            t_end: self.solver.t_end,
            scheme: self.solver.scheme,
            time_order: self.solver.time_order,
            picard_tol: self.solver.picard_tol,
            picard_max_iters: self.solver.picard_max_iters,
            mu: self.physics.mu,
            mu_prime: self.physics.mu_prime,
            phi: self.physics.phi,
            store_every: self.solver.store_every,
        }
    }

    /// Desk-scale template used by the CLI and the tests.
    pub fn example() -> RunConfig {
        RunConfig {
            grid: GridBlock {
                nx: 32,
                ny: 32,
                nz: 33,
                dealias: false,
            },
            physics: PhysicsBlock {
                rho_bar_star: 1.0,
                theta_star: 1.0,
                mu: 1e-2,
                mu_prime: 1e-2,
                phi: PhiVariant::FullGradient,
                q: QSpec::None,
            },
            initial: InitialBlock {
                scenario: "theta-bump".into(),
                amplitude: 1e-3,
                seed: 1,
            },
            solver: SolverBlock {
                dt: 1e-3,
                t_end: 0.1,
                scheme: Scheme::EulerianImex,
                time_order: 1,
                picard_tol: 1e-9,
                picard_max_iters: 12,
                store_every: 10,
            },
            output: OutputBlock {
                dir: "out".into(),
                dump_cadence: 50,
            },
        }
    }
}
