//! Command-line driver. All numerics live in `perihom`; this crate only
//! parses configuration, dispatches, and writes artifacts.
//!
//! Exit codes: 0 success, 2 configuration or validation failure, 3 solver
//! non-convergence, 4 demo gate failure.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "perihom", version, about = "Periodic homogenization of convolution-type diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, Subcommand)]
pub enum Cmd {
    /// Audit the configuration without solving anything
    Validate,
    /// Solve the first corrector and export its components
    Corrector,
    /// Assemble the effective diffusivity matrix
    Effective,
    /// Solve the second corrector on top of the effective matrix
    Kappa,
    /// Compare scaled evolutions against the homogenized limit over an epsilon list
    Converge,
    /// Evaluate expansion residuals on per-epsilon grids
    Residual,
    /// Estimate the diffusivity from random walks
    Mc,
    /// Full pipeline with pass/fail gates
    Demo,
}

impl Cmd {
    fn dispatch(self, cfg: &RunConfig) -> Result<()> {
        match self {
            Cmd::Validate => commands::validate(cfg),
            Cmd::Corrector => commands::corrector(cfg),
            Cmd::Effective => commands::effective(cfg),
            Cmd::Kappa => commands::kappa(cfg),
            Cmd::Converge => commands::converge(cfg),
            Cmd::Residual => commands::residual(cfg),
            Cmd::Mc => commands::mc(cfg),
            Cmd::Demo => commands::demo(cfg),
        }
    }
}

/// Flags shared by every subcommand. Anything set here wins over the file.
#[derive(Args)]
pub struct Overrides {
    /// JSON run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (default: out_dir from the config)
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to PERIHOM_THREADS, then all cores
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Cell grid as N,NT
    #[arg(long, global = true, value_name = "N,NT", value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Evolution box as L,NX
    #[arg(long = "box", global = true, value_name = "L,NX", value_parser = parse_box)]
    pub r#box: Option<(f64, usize)>,
    /// Comma-separated epsilon list
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Relative perturbation of the effective matrix (negative control)
    #[arg(long, global = true, value_name = "FRACTION")]
    pub perturb_aeff: Option<f64>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected N,NT")?;
    Ok((
        a.trim().parse().map_err(|e| format!("bad N: {e}"))?,
        b.trim().parse().map_err(|e| format!("bad NT: {e}"))?,
    ))
}

fn parse_box(s: &str) -> Result<(f64, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected L,NX")?;
    Ok((
        a.trim().parse().map_err(|e| format!("bad L: {e}"))?,
        b.trim().parse().map_err(|e| format!("bad NX: {e}"))?,
    ))
}

/// Raised when the demo pipeline completes but a gate fails.
#[derive(Debug)]
pub struct DemoFailure {
    pub failed: Vec<String>,
}

impl fmt::Display for DemoFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "demo gates failed: {}", self.failed.join(", "))
    }
}

impl std::error::Error for DemoFailure {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<DemoFailure>().is_some() {
        return 4;
    }
    if let Some(e) = err.downcast_ref::<perihom::Error>() {
        return match e {
            perihom::Error::NonConvergence { .. }
            | perihom::Error::CompatibilityViolation { .. }
            | perihom::Error::PositivityViolation { .. }
            | perihom::Error::InefficientThinning { .. } => 3,
            _ => 2,
        };
    }
    2
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PERIHOM_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                perihom::Error::InvalidConfig(format!("PERIHOM_THREADS = {v:?} is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(perihom::Error::InvalidConfig("thread count must be positive".into()).into());
        }
        // A second build_global in the same process is harmless; first wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.overrides.threads)?;
    let path = cli
        .overrides
        .config
        .as_deref()
        .ok_or_else(|| perihom::Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    apply_overrides(&mut cfg, &cli.overrides);
    cli.command.dispatch(&cfg)
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some((n, nt)) = ov.grid {
        cfg.grid.n = n;
        cfg.grid.nt = nt;
    }
    if let Some((half_width, nx)) = ov.r#box {
        cfg.domain.half_width = half_width;
        cfg.domain.nx = nx;
    }
    if let Some(eps) = &ov.eps {
        cfg.eps = eps.clone();
    }
    if let Some(p) = ov.perturb_aeff {
        cfg.perturb_aeff = p;
    }
}
