//! Periodic homogenization of time-dependent convolution-type operators.
//!
//! The crate discretizes the unit-cell generator of a nonlocal jump process
//! with space-time periodic rates, solves the periodic corrector problems,
//! assembles the effective diffusion matrix, and runs the diffusive-scaling
//! experiments that exhibit the convergence rate. A counter-based Monte
//! Carlo oracle cross-checks the effective matrix from path simulations.

pub mod cell;
pub mod effective;
pub mod eps;
pub mod error;
pub mod fft;
pub mod kernel;
pub mod mc;
pub mod medium;
pub mod scalar;
pub mod torus;

pub use cell::{
    monodromy, propagate, solve_corrector, solve_periodic, CellSolver, Corrector,
    PeriodicSolveReport, SecondCorrector, SolverOptions,
};
pub use effective::{effective_matrix, rhs_q, variational_value, EffectiveMatrix};
pub use eps::{
    build_ansatz, convergence_sweep, evolve_eps, evolve_homogenized, residual_norm, BoxDomain,
    BoxField, EpsOperator, EpsTrajectory, SweepConfig, SweepResult, SweepRow,
};
pub use error::{Error, Result};
pub use kernel::{Kernel, KernelFamily};
pub use mc::{simulate_diffusivity, McResult, WalkConfig};
pub use medium::{ConditionReport, Medium, MediumForm, TrigSeries, Wave};
pub use scalar::Scalar;
pub use torus::{SpaceTimeField, TorusField, TorusGrid};

/// Crate version, for run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Concrete double-precision aliases; the generic API accepts any [`Scalar`].
pub type Kernel64 = Kernel<f64>;
pub type Medium64 = Medium<f64>;
pub type TorusField64 = TorusField<f64>;
pub type SpaceTimeField64 = SpaceTimeField<f64>;

/// Single-precision aliases, mainly for quick exploratory runs.
pub type Kernel32 = Kernel<f32>;
pub type Medium32 = Medium<f32>;
pub type TorusField32 = TorusField<f32>;
pub type SpaceTimeField32 = SpaceTimeField<f32>;
