//! Run configuration. One JSON document drives every subcommand; flags
//! override file values, file values override defaults. The resolved document
//! is what gets hashed into the manifest, so the same effective settings give
//! the same `config_sha256` no matter how the values arrived.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use perihom::medium::modulated_sine_medium;
use perihom::{Kernel, Medium, MediumForm, SolverOptions, SweepConfig, TrigSeries, Wave};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Spatial jump kernel, tagged by family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelSpec {
    Boxcar { dim: usize, radius: f64 },
    Gaussian { dim: usize, sigma: f64 },
    Exponential { dim: usize, lambda: f64 },
    Tabulated { dim: usize, radii: Vec<f64>, values: Vec<f64> },
}

impl KernelSpec {
    pub fn dim(&self) -> usize {
        match self {
            KernelSpec::Boxcar { dim, .. }
            | KernelSpec::Gaussian { dim, .. }
            | KernelSpec::Exponential { dim, .. }
            | KernelSpec::Tabulated { dim, .. } => *dim,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            KernelSpec::Boxcar { .. } => "boxcar",
            KernelSpec::Gaussian { .. } => "gaussian",
            KernelSpec::Exponential { .. } => "exponential",
            KernelSpec::Tabulated { .. } => "tabulated",
        }
    }

    pub fn build(&self) -> perihom::Result<Kernel<f64>> {
        match self {
            KernelSpec::Boxcar { dim, radius } => Kernel::boxcar(*dim, *radius),
            KernelSpec::Gaussian { dim, sigma } => Kernel::gaussian(*dim, *sigma),
            KernelSpec::Exponential { dim, lambda } => Kernel::exponential(*dim, *lambda),
            KernelSpec::Tabulated { dim, radii, values } => {
                Kernel::tabulated(*dim, radii.clone(), values.clone())
            }
        }
    }
}

/// One time-harmonic of a purely time-modulated medium.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveSpec {
    pub k_time: i64,
    pub amp: f64,
    #[serde(default)]
    pub phase: f64,
}

/// One separable factor
/// `c cos(2 pi k.xi + phi) cos(2 pi k.eta + phi) (1 + a cos(2 pi s + psi))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProductTermSpec {
    pub coeff: f64,
    pub k: Vec<i64>,
    #[serde(default)]
    pub space_phase: f64,
    #[serde(default)]
    pub time_amp: f64,
    #[serde(default)]
    pub time_phase: f64,
}

/// Rate modulation `mu`, tagged by form. `bounds` are the declared
/// ellipticity constants; `validate` audits them against samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum MediumSpec {
    Constant {
        dim: usize,
        value: f64,
    },
    /// The stock d = 1 benchmark medium `scale (1 + amp sin(2 pi xi) sin(2 pi eta) (1 + time_amp sin(2 pi s)))`.
    ModulatedSine {
        scale: f64,
        amp: f64,
        time_amp: f64,
    },
    TimeOnly {
        dim: usize,
        waves: Vec<WaveSpec>,
        bounds: [f64; 2],
    },
    ProductSum {
        dim: usize,
        constant: f64,
        terms: Vec<ProductTermSpec>,
        bounds: [f64; 2],
    },
    /// Grid samples, layout `values[(t * n^d + eta) * n^d + xi]`.
    Tabulated {
        dim: usize,
        n: usize,
        nt: usize,
        values: Vec<f64>,
        bounds: [f64; 2],
    },
}

impl MediumSpec {
    pub fn dim(&self) -> usize {
        match self {
            MediumSpec::ModulatedSine { .. } => 1,
            MediumSpec::Constant { dim, .. }
            | MediumSpec::TimeOnly { dim, .. }
            | MediumSpec::ProductSum { dim, .. }
            | MediumSpec::Tabulated { dim, .. } => *dim,
        }
    }

    pub fn form_name(&self) -> &'static str {
        match self {
            MediumSpec::Constant { .. } => "constant",
            MediumSpec::ModulatedSine { .. } => "modulated-sine",
            MediumSpec::TimeOnly { .. } => "time-only",
            MediumSpec::ProductSum { .. } => "product-sum",
            MediumSpec::Tabulated { .. } => "tabulated",
        }
    }

    pub fn build(&self) -> perihom::Result<Medium<f64>> {
        match self {
            MediumSpec::Constant { dim, value } => Medium::constant(*dim, *value),
            MediumSpec::ModulatedSine { scale, amp, time_amp } => {
                modulated_sine_medium(*scale, *amp, *time_amp)
            }
            MediumSpec::TimeOnly { dim, waves, bounds } => {
                let series = TrigSeries {
                    waves: waves
                        .iter()
                        .map(|w| Wave {
                            k_space: vec![0; *dim],
                            k_time: w.k_time,
                            amp: w.amp,
                            phase: w.phase,
                        })
                        .collect(),
                };
                Medium::new(*dim, MediumForm::TimeOnly(series), bounds[0], bounds[1])
            }
            MediumSpec::ProductSum { dim, constant, terms, bounds } => {
                let mut factors = vec![(*constant, TrigSeries::constant(1.0, *dim))];
                for t in terms {
                    factors.extend(Medium::product_term(
                        t.coeff,
                        t.k.clone(),
                        t.space_phase,
                        t.time_amp,
                        t.time_phase,
                    ));
                }
                Medium::new(*dim, MediumForm::SeparableSum(factors), bounds[0], bounds[1])
            }
            MediumSpec::Tabulated { dim, n, nt, values, bounds } => Medium::new(
                *dim,
                MediumForm::Tabulated { n: *n, nt: *nt, values: values.clone() },
                bounds[0],
                bounds[1],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub nt: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { n: 64, nt: 128 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub half_width: f64,
    pub nx: usize,
}

impl Default for BoxSpec {
    fn default() -> Self {
        BoxSpec { half_width: 10.0, nx: 2000 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Residual target for the periodic cell solves.
    pub solver: f64,
    /// Ceiling on the compatibility defect of cell right-hand sides.
    pub compat: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { solver: 1e-11, compat: 1e-10 }
    }
}

fn d_eps() -> Vec<f64> {
    vec![0.4, 0.2, 0.1]
}
fn d_t_final() -> f64 {
    0.5
}
fn d_snapshots() -> usize {
    16
}
fn d_sigma() -> f64 {
    1.0
}
fn d_residual_points() -> usize {
    80
}
fn d_substeps() -> usize {
    4
}
fn d_paths() -> usize {
    100_000
}
fn d_horizon() -> f64 {
    100.0
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelSpec,
    pub medium: MediumSpec,
    /// Periodicity-cell discretization (spatial nodes per axis, time steps).
    #[serde(default)]
    pub grid: GridSpec,
    /// Truncated domain `[-L, L]^d` for the scaled evolutions.
    #[serde(rename = "box", default)]
    pub domain: BoxSpec,
    #[serde(default = "d_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "d_t_final")]
    pub t_final: f64,
    #[serde(default = "d_snapshots")]
    pub snapshots: usize,
    /// Width of the Gaussian initial datum.
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    /// Nodes per periodicity cell on the residual grids.
    #[serde(default = "d_residual_points")]
    pub residual_points: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// RK4 substeps per cell time step.
    #[serde(default = "d_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_paths")]
    pub paths: usize,
    #[serde(default = "d_horizon")]
    pub horizon: f64,
    /// Relative perturbation of the effective matrix in sweeps; the negative
    /// control that convergence claims are checked against.
    #[serde(default)]
    pub perturb_aeff: f64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Hash of the resolved configuration, after flag overrides.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Cheap shape checks that do not need any library object.
    pub fn check_basics(&self) -> perihom::Result<()> {
        let bad = |msg: String| Err(perihom::Error::InvalidConfig(msg));
        if self.kernel.dim() != self.medium.dim() {
            return bad(format!(
                "kernel dimension {} does not match medium dimension {}",
                self.kernel.dim(),
                self.medium.dim()
            ));
        }
        if !(self.tolerances.solver > 0.0) || !(self.tolerances.compat > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return bad("t_final must be positive".into());
        }
        if self.snapshots == 0 {
            return bad("need at least one snapshot".into());
        }
        if self.substeps == 0 {
            return bad("substeps must be positive".into());
        }
        if self.eps.is_empty() {
            return bad("eps list must not be empty".into());
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions<f64> {
        SolverOptions {
            substeps: self.substeps,
            tol: self.tolerances.solver,
            compat_tol: self.tolerances.compat,
            ..SolverOptions::default()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig<f64> {
        SweepConfig {
            eps_list: self.eps.clone(),
            half_width: self.domain.half_width,
            nx: self.domain.nx,
            t_final: self.t_final,
            snapshots: self.snapshots,
            sigma: self.sigma,
            perturb_aeff: self.perturb_aeff,
            residual_points: self.residual_points,
            ..SweepConfig::default()
        }
    }
}
