//! Subcommand bodies. Every command resolves its inputs from one `RunConfig`,
//! writes its artifacts under `out_dir`, and finishes with a `manifest.json`
//! recording the config hash, versions, and stage timings. The manifest is
//! the only output allowed to differ between identical runs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use perihom::effective::effective_matrix;
use perihom::mc::{MIN_SHIPPED_HORIZON, MIN_SHIPPED_PATHS};
use perihom::torus::{write_field, Generator};
use perihom::{
    convergence_sweep, simulate_diffusivity, BoxDomain, BoxField, CellSolver, Corrector,
    EffectiveMatrix, EpsOperator, Error, Kernel, Medium, SecondCorrector, SpaceTimeField,
    SweepResult, TorusGrid, WalkConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::DemoFailure;

/// Ceiling on the second-corrector compatibility defect in the demo gate.
const DEMO_COMPAT_TOL: f64 = 1e-8;
/// The finest sweep error must land below this for the demo to pass.
const DEMO_ERROR_CEILING: f64 = 0.05;
/// Initial data must keep its mass this far away from the box boundary.
const BOUNDARY_TOL: f64 = 1e-12;
/// Sample nodes per axis when auditing the medium conditions.
const AUDIT_DENSITY: usize = 64;

struct Stopwatch {
    last: Instant,
    start: Instant,
    laps: Vec<(String, f64)>,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Stopwatch { last: now, start: now, laps: Vec::new() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.laps.push((stage.into(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn finish(mut self) -> Vec<(String, f64)> {
        let total = self.start.elapsed().as_secs_f64();
        self.laps.push(("total".into(), total));
        self.laps
    }
}

#[derive(Serialize)]
struct Lap {
    stage: String,
    seconds: f64,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    config_sha256: String,
    versions: BTreeMap<&'static str, &'static str>,
    timings_secs: Vec<Lap>,
}

fn write_manifest(out: &Path, command: &'static str, cfg: &RunConfig, watch: Stopwatch) -> Result<()> {
    let manifest = Manifest {
        command,
        config_sha256: cfg.sha256(),
        versions: BTreeMap::from([
            ("cli", env!("CARGO_PKG_VERSION")),
            ("lib", perihom::VERSION),
        ]),
        timings_secs: watch
            .finish()
            .into_iter()
            .map(|(stage, seconds)| Lap { stage, seconds })
            .collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn ensure_out(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    Ok(cfg.out_dir.clone())
}

/// Corrector components go to one file each: CSV in d = 1, the binary field
/// format in d = 2.
fn write_field_file(out: &Path, name: &str, field: &SpaceTimeField<f64>) -> Result<String> {
    let ext = if field.grid.dim == 1 { "csv" } else { "bin" };
    let file = format!("{name}.{ext}");
    let mut w = BufWriter::new(File::create(out.join(&file))?);
    write_field(&mut w, field)?;
    Ok(file)
}

fn matrix_rows(d: usize, flat: &[f64]) -> Vec<Vec<f64>> {
    (0..d).map(|i| flat[i * d..(i + 1) * d].to_vec()).collect()
}

fn component_report(name: &str, file: &str, rep: &perihom::PeriodicSolveReport<f64>) -> serde_json::Value {
    json!({
        "name": name,
        "file": file,
        "iterations": rep.iterations,
        "final_residual": rep.final_residual,
        "compatibility_defect": rep.compatibility_defect,
        "used_krylov": rep.used_krylov,
    })
}

/// The cell problem artifacts every deeper command starts from.
struct Assembly {
    kernel: Kernel<f64>,
    medium: Medium<f64>,
    matrix: EffectiveMatrix<f64>,
    chi: Corrector<f64>,
}

fn assemble(cfg: &RunConfig) -> Result<Assembly> {
    cfg.check_basics()?;
    let kernel = cfg.kernel.build()?;
    let medium = cfg.medium.build()?;
    let grid = TorusGrid::new(medium.dim(), cfg.grid.n, cfg.grid.nt)?;
    let (matrix, chi) = {
        let gen = Generator::new(&kernel, &medium, grid)?;
        let solver = CellSolver::new(&gen, cfg.solver_options())?;
        effective_matrix(&solver)?
    };
    Ok(Assembly { kernel, medium, matrix, chi })
}

fn solve_kappa(cfg: &RunConfig, asm: &Assembly) -> Result<SecondCorrector<f64>> {
    let grid = TorusGrid::new(asm.medium.dim(), cfg.grid.n, cfg.grid.nt)?;
    let gen = Generator::new(&asm.kernel, &asm.medium, grid)?;
    let solver = CellSolver::new(&gen, cfg.solver_options())?;
    Ok(solver.solve_second_corrector(&asm.chi, &asm.matrix.a_hat)?)
}

fn write_effective_json(out: &Path, m: &EffectiveMatrix<f64>) -> Result<()> {
    write_json(
        &out.join("effective.json"),
        &json!({
            "a_hat": matrix_rows(m.dim, &m.a_hat),
            "a_eff": matrix_rows(m.dim, &m.a_eff),
            "min_eig": m.min_eig,
            "grid": {
                "n": m.grid_n,
                "nt": m.grid_nt,
                "truncation_radius": m.truncation_radius,
            },
        }),
    )
}

fn write_chi(out: &Path, chi: &Corrector<f64>) -> Result<Vec<serde_json::Value>> {
    let mut reports = Vec::new();
    for (j, (field, rep)) in chi.components.iter().zip(&chi.reports).enumerate() {
        let name = format!("chi_{}", j + 1);
        let file = write_field_file(out, &name, field)?;
        reports.push(component_report(&name, &file, rep));
    }
    Ok(reports)
}

fn write_kappa(out: &Path, d: usize, kappa: &SecondCorrector<f64>) -> Result<Vec<serde_json::Value>> {
    let mut reports = Vec::new();
    for (idx, (field, rep)) in kappa.components.iter().zip(&kappa.reports).enumerate() {
        let name = format!("kappa_{}{}", idx / d + 1, idx % d + 1);
        let file = write_field_file(out, &name, field)?;
        reports.push(component_report(&name, &file, rep));
    }
    Ok(reports)
}

/// Audits the configuration without solving anything: library invariants on
/// kernel and medium, sampled ellipticity and symmetry, grid constructibility,
/// and commensurability of every requested epsilon with the box and the
/// residual grids.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();

    cfg.check_basics()?;
    let kernel = cfg.kernel.build()?;
    let medium = cfg.medium.build()?;
    let audit = medium.verify_conditions(AUDIT_DENSITY)?;
    watch.lap("audit");

    TorusGrid::new(medium.dim(), cfg.grid.n, cfg.grid.nt)?;
    let domain = BoxDomain::new(medium.dim(), cfg.domain.half_width, cfg.domain.nx)?;
    for &eps in &cfg.eps {
        domain.check_epsilon(eps)?;
        // The evolution grid must also resolve each cell exactly.
        let steps = eps * cfg.domain.nx as f64 / (2.0 * cfg.domain.half_width);
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Commensurability(format!(
                "box grid step does not divide eps = {eps} (eps/h = {steps:.6})"
            ))
            .into());
        }
        residual_nx(cfg, eps)?;
    }
    watch.lap("grids");

    let (lo, hi) = medium.bounds();
    write_json(
        &out.join("report.json"),
        &json!({
            "kernel": {
                "family": cfg.kernel.family_name(),
                "dim": kernel.dim(),
                "mass": kernel.mass(),
                "second_moment_radial": kernel.second_moment_radial(),
                "truncation_radius": kernel.truncation_radius(1e-12),
            },
            "medium": {
                "form": cfg.medium.form_name(),
                "dim": medium.dim(),
                "declared_bounds": [lo, hi],
                "observed_min": audit.mu_min,
                "observed_max": audit.mu_max,
                "max_symmetry_defect": audit.max_symmetry_defect,
            },
            "grid": { "n": cfg.grid.n, "nt": cfg.grid.nt },
            "box": { "half_width": cfg.domain.half_width, "nx": cfg.domain.nx },
            "eps": cfg.eps,
            "pass": true,
        }),
    )?;
    write_manifest(&out, "validate", cfg, watch)
}

pub fn corrector(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();
    let asm = assemble(cfg)?;
    watch.lap("chi");
    let reports = write_chi(&out, &asm.chi)?;
    write_json(&out.join("corrector.json"), &json!({ "components": reports }))?;
    watch.lap("write");
    write_manifest(&out, "corrector", cfg, watch)
}

pub fn effective(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();
    let asm = assemble(cfg)?;
    watch.lap("assemble");
    write_effective_json(&out, &asm.matrix)?;
    write_chi(&out, &asm.chi)?;
    watch.lap("write");
    write_manifest(&out, "effective", cfg, watch)
}

pub fn kappa(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();
    let asm = assemble(cfg)?;
    watch.lap("assemble");
    let kappa = solve_kappa(cfg, &asm)?;
    watch.lap("kappa");
    write_effective_json(&out, &asm.matrix)?;
    write_chi(&out, &asm.chi)?;
    let reports = write_kappa(&out, asm.matrix.dim, &kappa)?;
    write_json(
        &out.join("kappa.json"),
        &json!({
            "a_hat": matrix_rows(asm.matrix.dim, &asm.matrix.a_hat),
            "components": reports,
        }),
    )?;
    watch.lap("write");
    write_manifest(&out, "kappa", cfg, watch)
}

fn sweep_json(sweep: &SweepResult<f64>, d: usize) -> serde_json::Value {
    json!({
        "rows": sweep.rows.iter().map(|r| json!({
            "epsilon": r.epsilon,
            "sup_error": r.sup_error,
            "final_error": r.final_error,
            "residual": r.residual,
        })).collect::<Vec<_>>(),
        "a_eff_used": matrix_rows(d, &sweep.a_eff_used),
    })
}

fn run_sweep(
    cfg: &RunConfig,
    watch: &mut Stopwatch,
) -> Result<(Assembly, SecondCorrector<f64>, SweepResult<f64>)> {
    let asm = assemble(cfg)?;
    watch.lap("assemble");
    let kappa = solve_kappa(cfg, &asm)?;
    watch.lap("kappa");
    let sweep = convergence_sweep(
        &asm.kernel,
        &asm.medium,
        &asm.matrix.a_eff,
        &asm.chi.components,
        &kappa.components,
        &cfg.sweep_config(),
    )?;
    watch.lap("sweep");
    Ok((asm, kappa, sweep))
}

pub fn converge(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();
    let (asm, _, sweep) = run_sweep(cfg, &mut watch)?;
    fs::write(out.join("sweep.csv"), sweep.to_csv())?;
    write_json(&out.join("sweep.json"), &sweep_json(&sweep, asm.matrix.dim))?;
    write_manifest(&out, "converge", cfg, watch)
}

fn residual_nx(cfg: &RunConfig, eps: f64) -> Result<usize> {
    let real = 2.0 * cfg.domain.half_width * cfg.residual_points as f64 / eps;
    let nx = real.round();
    if (real - nx).abs() > 1e-9 * real.max(1.0) {
        return Err(Error::Commensurability(format!(
            "residual grid does not tile the box at eps = {eps} (2 L points / eps = {real:.6})"
        ))
        .into());
    }
    Ok(nx as usize)
}

fn gaussian_datum(domain: BoxDomain<f64>, sigma: f64) -> Result<BoxField<f64>> {
    let sig2 = sigma * sigma;
    let u0 = BoxField::from_fn(domain, |x: &[f64]| {
        let r2: f64 = x.iter().map(|&c| c * c).sum();
        (-r2 / (2.0 * sig2)).exp()
    });
    let frac = u0.boundary_mass_fraction();
    if frac > BOUNDARY_TOL {
        return Err(Error::ConditionViolation(format!(
            "initial mass fraction {frac:.2e} beyond 0.9 L; widen the box or shrink sigma"
        ))
        .into());
    }
    Ok(u0)
}

/// Expansion residuals on per-epsilon grids that resolve the kernel support
/// the same number of nodes regardless of epsilon.
pub fn residual(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();
    let asm = assemble(cfg)?;
    watch.lap("assemble");
    let kappa = solve_kappa(cfg, &asm)?;
    watch.lap("kappa");

    let d = asm.medium.dim();
    let t0 = cfg.t_final / 2.0;
    let mut csv = String::from("epsilon,nx,residual\n");
    for &eps in &cfg.eps {
        let nx = residual_nx(cfg, eps)?;
        let domain = BoxDomain::new(d, cfg.domain.half_width, nx)?;
        let u0 = gaussian_datum(domain, cfg.sigma)?;
        let op = EpsOperator::new(&asm.kernel, &asm.medium, domain, eps)?;
        let r = perihom::residual_norm(
            &op,
            &asm.matrix.a_eff,
            &u0,
            &asm.chi.components,
            &kappa.components,
            t0,
        )?;
        csv.push_str(&format!("{:.6e},{nx},{:.9e}\n", eps, r));
    }
    watch.lap("residuals");
    fs::write(out.join("residual.csv"), csv)?;
    write_manifest(&out, "residual", cfg, watch)
}

pub fn mc(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();
    cfg.check_basics()?;
    let result = run_walks(cfg)?;
    watch.lap("walks");
    write_json(&out.join("mc.json"), &mc_json(cfg, &result))?;
    write_manifest(&out, "mc", cfg, watch)
}

fn run_walks(cfg: &RunConfig) -> Result<perihom::McResult<f64>> {
    if cfg.paths < MIN_SHIPPED_PATHS {
        return Err(Error::InvalidConfig(format!(
            "paths = {} is below the shipped floor {MIN_SHIPPED_PATHS}",
            cfg.paths
        ))
        .into());
    }
    if cfg.horizon < MIN_SHIPPED_HORIZON {
        return Err(Error::InvalidConfig(format!(
            "horizon = {} is below the shipped floor {MIN_SHIPPED_HORIZON}",
            cfg.horizon
        ))
        .into());
    }
    let kernel = cfg.kernel.build()?;
    let medium = cfg.medium.build()?;
    let walk = WalkConfig::new(cfg.horizon, cfg.paths, cfg.seed)?;
    Ok(simulate_diffusivity(&kernel, &medium, &walk)?)
}

fn mc_json(cfg: &RunConfig, r: &perihom::McResult<f64>) -> serde_json::Value {
    let d = cfg.medium.dim();
    json!({
        "a_mc": matrix_rows(d, &r.a_mc),
        "se": matrix_rows(d, &r.se),
        "drift": r.drift,
        "drift_se": r.drift_se,
        "accept_rate": r.accept_rate,
        "paths": r.paths,
        "horizon": cfg.horizon,
        "seed": cfg.seed,
    })
}

/// The whole pipeline on one configuration, with pass/fail gates at the end.
/// Failing a gate is exit code 4; everything upstream keeps its usual codes.
pub fn demo(cfg: &RunConfig) -> Result<()> {
    let out = ensure_out(cfg)?;
    let mut watch = Stopwatch::new();

    cfg.check_basics()?;
    let medium = cfg.medium.build()?;
    medium.verify_conditions(AUDIT_DENSITY)?;
    watch.lap("audit");

    let (asm, kappa, sweep) = run_sweep(cfg, &mut watch)?;
    let walk = run_walks(cfg)?;
    watch.lap("walks");

    write_effective_json(&out, &asm.matrix)?;
    write_chi(&out, &asm.chi)?;
    write_kappa(&out, asm.matrix.dim, &kappa)?;
    write_json(&out.join("mc.json"), &mc_json(cfg, &walk))?;
    fs::write(out.join("sweep.csv"), sweep.to_csv())?;
    write_json(&out.join("sweep.json"), &sweep_json(&sweep, asm.matrix.dim))?;

    let d = asm.matrix.dim;
    let worst_compat = kappa
        .reports
        .iter()
        .map(|r| r.compatibility_defect)
        .fold(0.0f64, f64::max);
    let walk_gap = (0..d * d)
        .map(|i| (walk.a_mc[i] - asm.matrix.a_eff[i]).abs() - 3.0 * walk.se[i])
        .fold(f64::MIN, f64::max);
    let sup_errors: Vec<f64> = sweep.rows.iter().map(|r| r.sup_error).collect();
    let residuals: Vec<f64> = sweep.rows.iter().map(|r| r.residual).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);

    let gates = [
        ("positive_definite", asm.matrix.min_eig > 0.0,
         format!("min_eig = {:.3e}", asm.matrix.min_eig)),
        ("kappa_compatible", worst_compat <= DEMO_COMPAT_TOL,
         format!("worst defect = {worst_compat:.3e}")),
        ("walks_agree", walk_gap <= 0.0,
         format!("worst |a_mc - a_eff| - 3 se = {walk_gap:.3e}")),
        ("errors_decrease", sup_errors.len() < 2 || decreasing(&sup_errors),
         format!("sup errors = {sup_errors:?}")),
        ("error_small", sup_errors.last().is_some_and(|&e| e < DEMO_ERROR_CEILING),
         format!("finest error = {:.3e}", sup_errors.last().copied().unwrap_or(f64::NAN))),
        ("residuals_decrease", residuals.len() < 2 || decreasing(&residuals),
         format!("residuals = {residuals:?}")),
    ];

    let failed: Vec<String> = gates
        .iter()
        .filter(|(_, pass, _)| !pass)
        .map(|(name, _, _)| (*name).to_string())
        .collect();
    write_json(
        &out.join("demo.json"),
        &json!({
            "gates": gates.iter().map(|(name, pass, detail)| json!({
                "name": name,
                "pass": pass,
                "detail": detail,
            })).collect::<Vec<_>>(),
            "pass": failed.is_empty(),
        }),
    )?;
    write_manifest(&out, "demo", cfg, watch)?;

    if failed.is_empty() {
        Ok(())
    } else {
        Err(DemoFailure { failed }.into())
    }
}
