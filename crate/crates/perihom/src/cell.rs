//! Time-periodic cell problems: Cauchy propagation of
//! `ds gamma = A(s) gamma + theta` by classical RK4, the period (monodromy)
//! map `S`, the periodic solve of `ds beta - A(s) beta = theta`, and the
//! first and second correctors.
//!
//! The periodic solve iterates `nu <- P0 (S nu + phi_hat)` on the zero-mean
//! subspace; the spectral gap makes `S` a strict contraction there. A
//! matrix-free GMRES on `(I - S) nu = phi_hat` takes over when the observed
//! contraction factor is too close to one.

use std::sync::Arc;

use num_complex::Complex;

use crate::effective;
use crate::error::{Error, Result};
use crate::fft::{fft_nd, upsample_spectrum, FftCache};
use crate::medium::MediumForm;
use crate::scalar::{lit, pairwise_sum, pairwise_sum_by, Scalar};
use crate::torus::{Generator, SampledPair, SpaceTimeField, TorusField};

/// Precomputing the stage wheel trades memory for speed. Past this budget
/// (d = 2 on fine grids) stages are sampled on the fly instead.
const STAGE_CACHE_BYTES: usize = 128 << 20;

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions<T> {
    /// RK4 substeps per time-grid interval.
    pub substeps: usize,
    /// Fixed-point increment tolerance, relative to `max(1, ||theta||)`.
    pub tol: T,
    pub max_iter: usize,
    /// Observed contraction factor beyond which GMRES takes over.
    pub krylov_threshold: T,
    /// Compatibility tolerance on `|int int theta|`, same relative scaling.
    pub compat_tol: T,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions {
            substeps: 4,
            tol: lit::<T>(1e-11),
            max_iter: 10_000,
            krylov_threshold: lit::<T>(0.9),
            compat_tol: lit::<T>(1e-10),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PeriodicSolveReport<T> {
    pub iterations: usize,
    pub final_residual: T,
    /// `|int int theta|`, the compatibility defect.
    pub compatibility_defect: T,
    /// Space-time mean of the raw trajectory, removed by normalization.
    pub pre_normalization_mean: T,
    pub used_krylov: bool,
}

/// First corrector: one zero-mean space-time field per direction.
pub struct Corrector<T> {
    pub components: Vec<SpaceTimeField<T>>,
    pub reports: Vec<PeriodicSolveReport<T>>,
}

/// Second corrector: `d x d` zero-mean fields, row-major.
pub struct SecondCorrector<T> {
    pub components: Vec<SpaceTimeField<T>>,
    pub reports: Vec<PeriodicSolveReport<T>>,
}

/// Sampled generator and `G` field at one node of the half-substep wheel.
struct Stage<T> {
    pairs: Vec<SampledPair<T>>,
    g: Vec<T>,
}

/// Right-hand side interpolated onto the half-substep wheel (RK4 needs the
/// midpoint values, which are not on the `Nt` grid).
struct ThetaWheel<T> {
    data: Vec<T>,
    space: usize,
}

impl<T: Scalar> ThetaWheel<T> {
    fn slice(&self, stage: usize) -> &[T] {
        &self.data[stage * self.space..(stage + 1) * self.space]
    }
}

pub struct CellSolver<'a, T: Scalar> {
    gen: &'a Generator<T>,
    opts: SolverOptions<T>,
    /// One entry per wheel node (`2 * nt * substeps`); `None` on the dense
    /// medium path, which samples on the fly.
    stages: Option<Vec<Stage<T>>>,
    total_steps: usize,
    delta: T,
    cache: Arc<FftCache<T>>,
}

struct Work<T> {
    k: [Vec<T>; 4],
    tmp: Vec<T>,
}

impl<T: Scalar> Work<T> {
    fn new(len: usize) -> Self {
        Work {
            k: std::array::from_fn(|_| vec![T::zero(); len]),
            tmp: vec![T::zero(); len],
        }
    }
}

impl<'a, T: Scalar> CellSolver<'a, T> {
    pub fn new(gen: &'a Generator<T>, opts: SolverOptions<T>) -> Result<Self> {
        if opts.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be positive".into()));
        }
        let grid = gen.grid();
        let total_steps = grid.nt * opts.substeps;
        let delta = T::one() / lit::<T>(total_steps as f64);
        let (_, mu_plus) = gen.medium().bounds();
        // ||A(s)|| <= 2 mu_plus; outside this region RK4 amplifies.
        if delta * (mu_plus + mu_plus) > T::one() {
            return Err(Error::StabilityGuard(format!(
                "step {delta:e} times 2*mu_plus = {:e} exceeds 1; increase Nt or substeps",
                (mu_plus + mu_plus).to_f64().unwrap()
            )));
        }
        let wheel = 2 * total_steps;
        let space = grid.space_len();
        let pair_count = gen.medium().factor_pairs().map_or(0, |p| p.len());
        let stage_bytes = wheel * (2 * pair_count + 1) * space * std::mem::size_of::<T>();
        let stages = if gen.is_separable() && stage_bytes <= STAGE_CACHE_BYTES {
            Some(
                (0..wheel)
                    .map(|k| {
                        let s = lit::<T>(k as f64 / wheel as f64);
                        let pairs = gen.sampled_pairs(s).unwrap();
                        let g = gen.g_from_pairs(&pairs);
                        Stage { pairs, g }
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(CellSolver {
            gen,
            opts,
            stages,
            total_steps,
            delta,
            cache: gen.fft_cache(),
        })
    }

    pub fn options(&self) -> &SolverOptions<T> {
        &self.opts
    }

    pub fn generator(&self) -> &Generator<T> {
        self.gen
    }

    fn space_len(&self) -> usize {
        self.gen.grid().space_len()
    }

    fn weighted_l2(&self, v: &[T]) -> T {
        (pairwise_sum_by(v.len(), |i| v[i] * v[i]) * self.gen.grid().cell_weight::<T>()).sqrt()
    }

    fn apply_a(&self, stage: usize, v: &[T], out: &mut [T]) {
        match &self.stages {
            Some(st) => {
                let s = &st[stage];
                self.gen.apply_sampled(&s.pairs, &s.g, v, out);
            }
            None => {
                let s = lit::<T>(stage as f64 / (2 * self.total_steps) as f64);
                self.gen.apply_into(s, v, out);
            }
        }
    }

    /// One RK4 substep; `wheel` holds the three stage node indices in
    /// evaluation order, mirrored for the adjoint direction.
    fn substep(
        &self,
        wheel: (usize, usize, usize),
        gamma: &mut [T],
        theta: Option<&ThetaWheel<T>>,
        w: &mut Work<T>,
    ) {
        let len = gamma.len();
        let half = self.delta * lit::<T>(0.5);
        let sixth = self.delta / lit::<T>(6.0);
        let add_theta = |stage: usize, k: &mut [T]| {
            if let Some(th) = theta {
                let row = th.slice(stage);
                for i in 0..len {
                    k[i] += row[i];
                }
            }
        };
        let (s0, s1, s2) = wheel;

        let (k1, rest) = w.k.split_at_mut(1);
        let (k2, rest) = rest.split_at_mut(1);
        let (k3, k4) = rest.split_at_mut(1);
        let (k1, k2, k3, k4) = (&mut k1[0], &mut k2[0], &mut k3[0], &mut k4[0]);

        self.apply_a(s0, gamma, k1);
        add_theta(s0, k1);
        for i in 0..len {
            w.tmp[i] = gamma[i] + half * k1[i];
        }
        self.apply_a(s1, &w.tmp, k2);
        add_theta(s1, k2);
        for i in 0..len {
            w.tmp[i] = gamma[i] + half * k2[i];
        }
        self.apply_a(s1, &w.tmp, k3);
        add_theta(s1, k3);
        for i in 0..len {
            w.tmp[i] = gamma[i] + self.delta * k3[i];
        }
        self.apply_a(s2, &w.tmp, k4);
        add_theta(s2, k4);
        let two = lit::<T>(2.0);
        for i in 0..len {
            gamma[i] += sixth * (k1[i] + two * (k2[i] + k3[i]) + k4[i]);
        }
    }

    fn wheel_len(&self) -> usize {
        2 * self.total_steps
    }

    /// Runs the substeps covering grid interval `t` forward.
    fn run_interval_forward(
        &self,
        t: usize,
        gamma: &mut [T],
        theta: Option<&ThetaWheel<T>>,
        w: &mut Work<T>,
    ) {
        for u in 0..self.opts.substeps {
            let j = t * self.opts.substeps + u;
            let base = 2 * j;
            self.substep(
                (base, base + 1, (base + 2) % self.wheel_len()),
                gamma,
                theta,
                w,
            );
        }
    }

    /// Runs the substeps covering grid interval `t` in the adjoint direction
    /// (from node `t+1` down to node `t`); stage nodes are mirrored, which
    /// makes the map the exact transpose of the forward step.
    fn run_interval_adjoint(
        &self,
        t: usize,
        gamma: &mut [T],
        theta: Option<&ThetaWheel<T>>,
        w: &mut Work<T>,
    ) {
        for u in (0..self.opts.substeps).rev() {
            let j = t * self.opts.substeps + u;
            let base = 2 * j;
            self.substep(
                ((base + 2) % self.wheel_len(), base + 1, base),
                gamma,
                theta,
                w,
            );
        }
    }

    fn build_wheel(&self, theta: &SpaceTimeField<T>) -> ThetaWheel<T> {
        let grid = self.gen.grid();
        let space = grid.space_len();
        let nt = grid.nt;
        let m = self.wheel_len();
        let mut data = vec![T::zero(); m * space];
        let mut series = vec![Complex::new(T::zero(), T::zero()); nt];
        for i in 0..space {
            for t in 0..nt {
                series[t] = Complex::new(theta.data[t * space + i], T::zero());
            }
            fft_nd(&self.cache, &mut series, &[nt], true);
            let mut up = upsample_spectrum(&series, m);
            fft_nd(&self.cache, &mut up, &[m], false);
            for k in 0..m {
                data[k * space + i] = up[k].re;
            }
        }
        ThetaWheel { data, space }
    }

    /// Cauchy propagation from grid node `i0` to `i1`, returning every
    /// intermediate grid-node slice (length `i1 - i0 + 1`).
    pub fn propagate_nodes(
        &self,
        nu: &TorusField<T>,
        theta: Option<&SpaceTimeField<T>>,
        i0: usize,
        i1: usize,
    ) -> Result<Vec<TorusField<T>>> {
        let grid = self.gen.grid();
        if i0 >= i1 || i1 > grid.nt {
            return Err(Error::InvalidConfig(format!(
                "propagation range [{i0}, {i1}] is not an increasing pair of grid nodes"
            )));
        }
        let wheel = theta.map(|th| self.build_wheel(th));
        let mut gamma = nu.data.clone();
        let mut w = Work::new(self.space_len());
        let mut out = Vec::with_capacity(i1 - i0 + 1);
        out.push(nu.clone());
        for t in i0..i1 {
            self.run_interval_forward(t, &mut gamma, wheel.as_ref(), &mut w);
            out.push(TorusField {
                grid,
                data: gamma.clone(),
            });
        }
        Ok(out)
    }

    /// Full-period map final slice: `S nu` for `theta = None`, otherwise
    /// `S nu + phi_hat` by linearity.
    fn period_map(&self, nu: &[T], wheel: Option<&ThetaWheel<T>>, w: &mut Work<T>) -> Vec<T> {
        let mut gamma = nu.to_vec();
        for t in 0..self.gen.grid().nt {
            self.run_interval_forward(t, &mut gamma, wheel, w);
        }
        gamma
    }

    fn period_map_adjoint(&self, nu: &[T], wheel: Option<&ThetaWheel<T>>, w: &mut Work<T>) -> Vec<T> {
        let mut gamma = nu.to_vec();
        for t in (0..self.gen.grid().nt).rev() {
            self.run_interval_adjoint(t, &mut gamma, wheel, w);
        }
        gamma
    }

    pub fn monodromy(&self, nu: &TorusField<T>) -> TorusField<T> {
        let mut w = Work::new(self.space_len());
        TorusField {
            grid: self.gen.grid(),
            data: self.period_map(&nu.data, None, &mut w),
        }
    }

    /// Periodic solve of `ds beta - A(s) beta = theta`, zero space-time mean.
    pub fn solve_periodic(
        &self,
        theta: &SpaceTimeField<T>,
    ) -> Result<(SpaceTimeField<T>, PeriodicSolveReport<T>)> {
        self.solve_periodic_direction(theta, false)
    }

    /// Periodic solve of the adjoint equation `-ds w - A(s) w = theta`,
    /// integrated in the stable (decreasing-`s`) direction.
    pub fn solve_periodic_adjoint(
        &self,
        theta: &SpaceTimeField<T>,
    ) -> Result<(SpaceTimeField<T>, PeriodicSolveReport<T>)> {
        self.solve_periodic_direction(theta, true)
    }

    fn solve_periodic_direction(
        &self,
        theta: &SpaceTimeField<T>,
        adjoint: bool,
    ) -> Result<(SpaceTimeField<T>, PeriodicSolveReport<T>)> {
        let grid = self.gen.grid();
        let len = self.space_len();
        let theta_norm = theta.l2_norm();
        let scale = theta_norm.max(T::one());
        let defect = theta.mean().abs();
        let compat_tol = self.opts.compat_tol * scale;
        if defect > compat_tol {
            return Err(Error::CompatibilityViolation {
                defect: defect.to_f64().unwrap(),
                tol: compat_tol.to_f64().unwrap(),
            });
        }
        let wheel = self.build_wheel(theta);
        let tol = self.opts.tol * scale;
        let mut w = Work::new(len);

        let map = |nu: &[T], with_theta: bool, w: &mut Work<T>| -> Vec<T> {
            let th = if with_theta { Some(&wheel) } else { None };
            if adjoint {
                self.period_map_adjoint(nu, th, w)
            } else {
                self.period_map(nu, th, w)
            }
        };

        let mut nu = vec![T::zero(); len];
        let mut iterations = 0usize;
        let mut residual;
        let mut used_krylov = false;
        let mut ratios: Vec<T> = Vec::new();
        let mut prev_inc = T::nan();
        loop {
            let mut next = map(&nu, true, &mut w);
            let m = pairwise_sum(&next) / lit::<T>(len as f64);
            for v in next.iter_mut() {
                *v -= m;
            }
            let inc = self.weighted_l2(
                &next.iter().zip(&nu).map(|(a, b)| *a - *b).collect::<Vec<_>>(),
            );
            nu = next;
            iterations += 1;
            residual = inc;
            if inc <= tol {
                break;
            }
            if prev_inc.is_finite() && prev_inc > T::zero() {
                ratios.push(inc / prev_inc);
            }
            prev_inc = inc;
            if ratios.len() >= 4 {
                let recent = &ratios[ratios.len() - 3..];
                let est = recent.iter().fold(T::zero(), |a, &r| a + r) / lit::<T>(3.0);
                if est > self.opts.krylov_threshold {
                    used_krylov = true;
                    let (x, gm_res, gm_iters) = self.gmres(&nu, &wheel, adjoint, tol, &mut w)?;
                    nu = x;
                    residual = gm_res;
                    iterations += gm_iters;
                    break;
                }
            }
            if iterations >= self.opts.max_iter {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: inc.to_f64().unwrap(),
                });
            }
        }

        // Re-propagate from the converged initial slice, storing the
        // trajectory, then normalize to zero space-time mean.
        let mut beta = SpaceTimeField::zeros(grid);
        let mut gamma = nu.clone();
        if adjoint {
            for t in (0..grid.nt).rev() {
                self.run_interval_adjoint(t, &mut gamma, Some(&wheel), &mut w);
                beta.slice_mut(t).copy_from_slice(&gamma);
            }
        } else {
            beta.slice_mut(0).copy_from_slice(&gamma);
            for t in 0..grid.nt - 1 {
                self.run_interval_forward(t, &mut gamma, Some(&wheel), &mut w);
                beta.slice_mut(t + 1).copy_from_slice(&gamma);
            }
        }
        let pre_mean = beta.mean();
        for v in beta.data.iter_mut() {
            *v -= pre_mean;
        }
        Ok((
            beta,
            PeriodicSolveReport {
                iterations,
                final_residual: residual,
                compatibility_defect: defect,
                pre_normalization_mean: pre_mean,
                used_krylov,
            },
        ))
    }

    /// Matrix-free GMRES on `(I - S) x = phi_hat` over the zero-mean
    /// subspace, warm-started at `x0`.
    fn gmres(
        &self,
        x0: &[T],
        wheel: &ThetaWheel<T>,
        adjoint: bool,
        tol: T,
        w: &mut Work<T>,
    ) -> Result<(Vec<T>, T, usize)> {
        let len = x0.len();
        let project = |v: &mut Vec<T>| {
            let m = pairwise_sum(v) / lit::<T>(len as f64);
            for x in v.iter_mut() {
                *x -= m;
            }
        };
        let apply_op = |v: &[T], w: &mut Work<T>| -> Vec<T> {
            let sv = if adjoint {
                self.period_map_adjoint(v, None, w)
            } else {
                self.period_map(v, None, w)
            };
            v.iter().zip(&sv).map(|(a, b)| *a - *b).collect()
        };
        // phi_hat = period map of zero with theta.
        let zero = vec![T::zero(); len];
        let mut b = if adjoint {
            self.period_map_adjoint(&zero, Some(wheel), w)
        } else {
            self.period_map(&zero, Some(wheel), w)
        };
        project(&mut b);

        let ax0 = apply_op(x0, w);
        let mut r0: Vec<T> = b.iter().zip(&ax0).map(|(a, b)| *a - *b).collect();
        project(&mut r0);
        let hd = self.gen.grid().cell_weight::<T>();
        let norm = |v: &[T]| (pairwise_sum_by(v.len(), |i| v[i] * v[i]) * hd).sqrt();
        let dotp = |a: &[T], c: &[T]| pairwise_sum_by(a.len(), |i| a[i] * c[i]) * hd;

        let beta0 = norm(&r0);
        if beta0 <= tol {
            return Ok((x0.to_vec(), beta0, 0));
        }
        let max_dim = 300.min(len);
        let mut basis: Vec<Vec<T>> = vec![r0.iter().map(|&v| v / beta0).collect()];
        let mut h: Vec<Vec<T>> = Vec::new(); // h[j] holds column j (len j+2)
        let mut cs: Vec<(T, T)> = Vec::new();
        let mut g = vec![beta0];
        let mut converged_dim = None;
        for j in 0..max_dim {
            let mut v = apply_op(&basis[j], w);
            let mut col = Vec::with_capacity(j + 2);
            for b_i in basis.iter() {
                let hij = dotp(&v, b_i);
                for (x, y) in v.iter_mut().zip(b_i) {
                    *x -= hij * *y;
                }
                col.push(hij);
            }
            let hh = norm(&v);
            col.push(hh);
            // Apply accumulated Givens rotations to the new column.
            for (i, &(c, s)) in cs.iter().enumerate() {
                let t0 = c * col[i] + s * col[i + 1];
                let t1 = -s * col[i] + c * col[i + 1];
                col[i] = t0;
                col[i + 1] = t1;
            }
            let (c, s) = {
                let denom = (col[j] * col[j] + col[j + 1] * col[j + 1]).sqrt();
                if denom == T::zero() {
                    (T::one(), T::zero())
                } else {
                    (col[j] / denom, col[j + 1] / denom)
                }
            };
            let t0 = c * col[j] + s * col[j + 1];
            col[j] = t0;
            col[j + 1] = T::zero();
            cs.push((c, s));
            g.push(-s * g[j]);
            g[j] = c * g[j];
            h.push(col);
            let res = g[j + 1].abs();
            if res <= tol || hh == T::zero() {
                converged_dim = Some(j + 1);
                break;
            }
            basis.push(v.iter().map(|&x| x / hh).collect());
        }
        let dim = match converged_dim {
            Some(d) => d,
            None => {
                return Err(Error::NonConvergence {
                    iterations: max_dim,
                    residual: g[g.len() - 1].abs().to_f64().unwrap(),
                })
            }
        };
        // Back-substitute the triangularized system.
        let mut y = vec![T::zero(); dim];
        for i in (0..dim).rev() {
            let mut acc = g[i];
            for k in i + 1..dim {
                acc -= h[k][i] * y[k];
            }
            y[i] = acc / h[i][i];
        }
        let mut x = x0.to_vec();
        for (k, yk) in y.iter().enumerate() {
            for (xi, bi) in x.iter_mut().zip(&basis[k]) {
                *xi += *yk * *bi;
            }
        }
        let mut xv = x;
        project(&mut xv);
        let res = g[dim].abs();
        Ok((xv, res, dim))
    }

    /// Re-steps every stored slice one grid interval and measures the worst
    /// mismatch with the next slice: the residual of the discrete equation.
    pub fn periodic_defect(&self, beta: &SpaceTimeField<T>, theta: &SpaceTimeField<T>) -> T {
        let grid = self.gen.grid();
        let wheel = self.build_wheel(theta);
        let mut w = Work::new(self.space_len());
        let mut worst = T::zero();
        for t in 0..grid.nt {
            let mut gamma = beta.slice(t).to_vec();
            self.run_interval_forward(t, &mut gamma, Some(&wheel), &mut w);
            let next = beta.slice((t + 1) % grid.nt);
            let diff: Vec<T> = gamma.iter().zip(next).map(|(a, b)| *a - *b).collect();
            worst = worst.max(self.weighted_l2(&diff));
        }
        worst
    }

    /// First corrector: `chi_j` solves the periodic problem with the local
    /// drift `q_j` on the right-hand side.
    pub fn solve_corrector(&self) -> Result<Corrector<T>> {
        let q = effective::rhs_q(self.gen)?;
        let mut components = Vec::with_capacity(q.len());
        let mut reports = Vec::with_capacity(q.len());
        for qj in &q {
            let (beta, rep) = self.solve_periodic(qj)?;
            components.push(beta);
            reports.push(rep);
        }
        Ok(Corrector {
            components,
            reports,
        })
    }

    /// Second corrector: `kappa_ij` solves the periodic problem with
    /// `theta_ij = F_ij - a_hat_ij`, where `F` is the flux assembled from
    /// `chi`. The compatibility defect of that right-hand side is exactly
    /// the consistency check on the supplied `a_hat`.
    pub fn solve_second_corrector(
        &self,
        chi: &Corrector<T>,
        a_hat: &[T],
    ) -> Result<SecondCorrector<T>> {
        let d = self.gen.grid().dim;
        assert_eq!(a_hat.len(), d * d);
        let f = effective::flux_components(self.gen, chi)?;
        let mut components = Vec::with_capacity(d * d);
        let mut reports = Vec::with_capacity(d * d);
        for (idx, fij) in f.into_iter().enumerate() {
            let mut theta = fij;
            for v in theta.data.iter_mut() {
                *v -= a_hat[idx];
            }
            let (kappa, rep) = self.solve_periodic(&theta)?;
            components.push(kappa);
            reports.push(rep);
        }
        Ok(SecondCorrector {
            components,
            reports,
        })
    }

    /// Stationary corrector `-A chi = q` for time-independent media, by
    /// conjugate gradients on the zero-mean subspace. Cross-validates the
    /// periodic solver: for such media the two correctors coincide.
    pub fn solve_corrector_stationary(&self) -> Result<Corrector<T>> {
        let time_independent = match self.gen.medium().form() {
            MediumForm::Constant(_) => true,
            _ => self
                .gen
                .medium()
                .factor_pairs()
                .map(|pairs| {
                    pairs.iter().all(|p| {
                        p.left.waves.iter().all(|w| w.k_time == 0)
                            && p.right.waves.iter().all(|w| w.k_time == 0)
                    })
                })
                .unwrap_or(false),
        };
        if !time_independent {
            return Err(Error::InvalidConfig(
                "stationary corrector requires a time-independent medium".into(),
            ));
        }
        let grid = self.gen.grid();
        let len = self.space_len();
        let q = effective::rhs_q(self.gen)?;
        let mut components = Vec::new();
        let mut reports = Vec::new();
        for qj in &q {
            let rhs = qj.slice(0).to_vec();
            let rhs_norm = self.weighted_l2(&rhs).max(T::one());
            let tol = lit::<T>(1e-12) * rhs_norm;
            let mut x = vec![T::zero(); len];
            let mut r = rhs.clone();
            let mut p = r.clone();
            let mut rs = pairwise_sum_by(len, |i| r[i] * r[i]);
            let mut ap = vec![T::zero(); len];
            let mut iters = 0usize;
            while rs.sqrt() * grid.cell_weight::<T>().sqrt() > tol {
                iters += 1;
                if iters > self.opts.max_iter {
                    return Err(Error::NonConvergence {
                        iterations: iters,
                        residual: rs.sqrt().to_f64().unwrap(),
                    });
                }
                self.apply_a(0, &p, &mut ap);
                for v in ap.iter_mut() {
                    *v = -*v;
                }
                let alpha = rs / pairwise_sum_by(len, |i| p[i] * ap[i]);
                for i in 0..len {
                    x[i] += alpha * p[i];
                    r[i] -= alpha * ap[i];
                }
                let rs_new = pairwise_sum_by(len, |i| r[i] * r[i]);
                let beta_cg = rs_new / rs;
                rs = rs_new;
                for i in 0..len {
                    p[i] = r[i] + beta_cg * p[i];
                }
            }
            let mean = pairwise_sum(&x) / lit::<T>(len as f64);
            for v in x.iter_mut() {
                *v -= mean;
            }
            let mut field = SpaceTimeField::zeros(grid);
            for t in 0..grid.nt {
                field.slice_mut(t).copy_from_slice(&x);
            }
            components.push(field);
            reports.push(PeriodicSolveReport {
                iterations: iters,
                final_residual: rs.sqrt() * grid.cell_weight::<T>().sqrt(),
                compatibility_defect: qj.mean().abs(),
                pre_normalization_mean: mean,
                used_krylov: true,
            });
        }
        Ok(Corrector {
            components,
            reports,
        })
    }
}

fn node_of<T: Scalar>(s: T, nt: usize) -> Result<usize> {
    let scaled = (s * lit::<T>(nt as f64)).to_f64().unwrap();
    let idx = scaled.round();
    if (scaled - idx).abs() > 1e-9 || !(0.0..=nt as f64).contains(&idx) {
        return Err(Error::InvalidConfig(format!(
            "time {scaled} / Nt is not aligned to the grid"
        )));
    }
    Ok(idx as usize)
}

/// One-off Cauchy propagation (see [`CellSolver::propagate_nodes`]);
/// `s0`, `s1` must lie on the time grid.
pub fn propagate<T: Scalar>(
    kernel: &crate::kernel::Kernel<T>,
    medium: &crate::medium::Medium<T>,
    nu: &TorusField<T>,
    theta: Option<&SpaceTimeField<T>>,
    s0: T,
    s1: T,
) -> Result<Vec<TorusField<T>>> {
    let gen = Generator::new(kernel, medium, nu.grid)?;
    let solver = CellSolver::new(&gen, SolverOptions::default())?;
    let i0 = node_of(s0, nu.grid.nt)?;
    let i1 = node_of(s1, nu.grid.nt)?;
    solver.propagate_nodes(nu, theta, i0, i1)
}

pub fn monodromy<T: Scalar>(
    kernel: &crate::kernel::Kernel<T>,
    medium: &crate::medium::Medium<T>,
    nu: &TorusField<T>,
) -> Result<TorusField<T>> {
    let gen = Generator::new(kernel, medium, nu.grid)?;
    let solver = CellSolver::new(&gen, SolverOptions::default())?;
    Ok(solver.monodromy(nu))
}

pub fn solve_periodic<T: Scalar>(
    kernel: &crate::kernel::Kernel<T>,
    medium: &crate::medium::Medium<T>,
    theta: &SpaceTimeField<T>,
) -> Result<(SpaceTimeField<T>, PeriodicSolveReport<T>)> {
    let gen = Generator::new(kernel, medium, theta.grid)?;
    let solver = CellSolver::new(&gen, SolverOptions::default())?;
    solver.solve_periodic(theta)
}

pub fn solve_corrector<T: Scalar>(
    kernel: &crate::kernel::Kernel<T>,
    medium: &crate::medium::Medium<T>,
    grid: crate::torus::TorusGrid,
) -> Result<Corrector<T>> {
    let gen = Generator::new(kernel, medium, grid)?;
    let solver = CellSolver::new(&gen, SolverOptions::default())?;
    solver.solve_corrector()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::medium::{modulated_sine_medium, Medium};
    use crate::torus::TorusGrid;
    use proptest::prelude::*;

    fn grid1(n: usize, nt: usize) -> TorusGrid {
        TorusGrid::new(1, n, nt).unwrap()
    }

    fn zero_mean_theta(grid: TorusGrid) -> SpaceTimeField<f64> {
        SpaceTimeField::<f64>::from_fn(grid, |x, s| {
            (2.0 * std::f64::consts::PI * x[0]).cos() * (2.0 * std::f64::consts::PI * s).cos()
                + 0.3 * (2.0 * std::f64::consts::PI * (x[0] + s)).sin()
        })
    }

    #[test]
    fn constants_are_invariant() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let nu = TorusField {
            grid,
            data: vec![2.5f64; 16],
        };
        let traj = propagate(&kernel, &medium, &nu, None, 0.0, 1.0).unwrap();
        assert_eq!(traj.len(), 9);
        for slice in &traj {
            for &v in &slice.data {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_theta_integrates_linearly() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let nu = TorusField::zeros(grid);
        let theta = SpaceTimeField {
            grid,
            data: vec![1.0f64; 16 * 8],
        };
        let traj = propagate(&kernel, &medium, &nu, Some(&theta), 0.0, 1.0).unwrap();
        for (t, slice) in traj.iter().enumerate() {
            let want = t as f64 / 8.0;
            for &v in &slice.data {
                assert!((v - want).abs() < 1e-12, "t={t}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn cosine_decays_at_the_quadrature_rate() {
        let grid = grid1(64, 16);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = Medium::constant(1, 1.0).unwrap();
        let nu = TorusField::<f64>::from_fn(grid, |x| (2.0 * std::f64::consts::PI * x[0]).cos());

        // Scalar ODE oracle: gamma(s) = exp(lambda s) cos, lambda from the
        // independently integrated kernel transform.
        let lambda_oracle = 2.0 / std::f64::consts::PI - 1.0;
        let traj = propagate(&kernel, &medium, &nu, None, 0.0, 1.0).unwrap();
        let final_slice = &traj[16];
        let got = final_slice.data[0] / nu.data[0];
        let want = lambda_oracle.exp();
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");

        // Internal consistency against the discrete eigenvalue is much tighter.
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let av = gen.apply(0.0, &nu);
        let lambda_h = av.data[0] / nu.data[0];
        assert!((got - lambda_h.exp()).abs() < 1e-9);
    }

    #[test]
    fn monodromy_preserves_mean_and_contracts() {
        let grid = grid1(32, 16);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let ones = TorusField {
            grid,
            data: vec![1.0f64; 32],
        };
        let s_ones = monodromy(&kernel, &medium, &ones).unwrap();
        for &v in &s_ones.data {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let mut state = 11u64;
        let mut unif = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..3 {
            let nu = TorusField {
                grid,
                data: (0..32).map(|_| unif() - 0.5).collect(),
            };
            let snu = monodromy(&kernel, &medium, &nu).unwrap();
            assert!((snu.mean() - nu.mean()).abs() < 1e-12);
            let centered = |f: &TorusField<f64>| {
                let m = f.mean();
                TorusField {
                    grid,
                    data: f.data.iter().map(|v| v - m).collect(),
                }
            };
            let num = centered(&snu).l2_norm();
            let den = centered(&nu).l2_norm();
            // Contraction factor for this kernel/medium is ~0.91; the test
            // only needs it bounded away from 1.
            assert!(num < 0.95 * den, "contraction {}", num / den);
        }
    }

    #[test]
    fn zero_theta_gives_zero() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let theta = SpaceTimeField::zeros(grid);
        let (beta, rep) = solve_periodic(&kernel, &medium, &theta).unwrap();
        assert!(beta.sup_norm() < 1e-12);
        assert!(rep.iterations <= 2);
    }

    #[test]
    fn constant_theta_violates_compatibility() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let theta = SpaceTimeField {
            grid,
            data: vec![1.0; 16 * 8],
        };
        match solve_periodic(&kernel, &medium, &theta) {
            Err(Error::CompatibilityViolation { defect, .. }) => {
                assert!((defect - 1.0).abs() < 1e-12)
            }
            other => panic!("expected compatibility violation, got {other:?}"),
        }
    }

    #[test]
    fn time_only_theta_has_closed_form() {
        // theta = cos(2 pi s): the spatial average obeys
        // ds beta_bar = theta, so beta = sin(2 pi s) / (2 pi).
        let grid = grid1(16, 64);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let theta =
            SpaceTimeField::<f64>::from_fn(grid, |_, s| (2.0 * std::f64::consts::PI * s).cos());
        let (beta, rep) = solve_periodic(&kernel, &medium, &theta).unwrap();
        assert!(rep.compatibility_defect < 1e-14);
        let two_pi = 2.0 * std::f64::consts::PI;
        for t in 0..64 {
            let want = (two_pi * t as f64 / 64.0).sin() / two_pi;
            for &v in beta.slice(t) {
                assert!((v - want).abs() < 1e-9, "t={t}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn discrete_equation_residual_is_small() {
        let grid = grid1(32, 16);
        let kernel = Kernel::gaussian(1, 0.2).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let solver = CellSolver::new(&gen, SolverOptions::default()).unwrap();
        let theta = zero_mean_theta(grid);
        let (beta, rep) = solver.solve_periodic(&theta).unwrap();
        let defect = solver.periodic_defect(&beta, &theta);
        let bound = 10.0 * solver.options().tol * theta.l2_norm().max(1.0);
        assert!(defect <= bound, "defect {defect} vs {bound}");
        assert!(!rep.used_krylov);
        assert!(beta.mean().abs() < 1e-10);
    }

    #[test]
    fn nearly_degenerate_medium_hits_iteration_cap() {
        // A very narrow kernel leaves low modes almost invariant, so the
        // plain iteration stalls.
        let grid = grid1(32, 8);
        let kernel = Kernel::gaussian(1, 0.05).unwrap();
        let medium = Medium::constant(1, 0.25).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let opts = SolverOptions {
            max_iter: 3,
            krylov_threshold: 2.0, // never engage
            ..SolverOptions::default()
        };
        let solver = CellSolver::new(&gen, opts).unwrap();
        let theta = zero_mean_theta(grid);
        assert!(matches!(
            solver.solve_periodic(&theta),
            Err(Error::NonConvergence { .. })
        ));
    }

    #[test]
    fn krylov_acceleration_engages_and_solves() {
        let grid = grid1(32, 8);
        let kernel = Kernel::gaussian(1, 0.05).unwrap();
        let medium = Medium::constant(1, 0.25).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let solver = CellSolver::new(&gen, SolverOptions::default()).unwrap();
        let theta = zero_mean_theta(grid);
        let (beta, rep) = solver.solve_periodic(&theta).unwrap();
        assert!(rep.used_krylov, "contraction ~0.99 must trigger GMRES");
        let defect = solver.periodic_defect(&beta, &theta);
        assert!(defect <= 10.0 * solver.options().tol * theta.l2_norm().max(1.0));
    }

    #[test]
    fn stability_guard_trips_on_coarse_grids() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = Medium::constant(1, 60.0).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let opts = SolverOptions {
            substeps: 1,
            ..SolverOptions::default()
        };
        assert!(matches!(
            CellSolver::new(&gen, opts),
            Err(Error::StabilityGuard(_))
        ));
    }

    #[test]
    fn misaligned_times_are_rejected() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = Medium::constant(1, 1.0).unwrap();
        let nu = TorusField::zeros(grid);
        assert!(matches!(
            propagate(&kernel, &medium, &nu, None, 0.3, 1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn adjoint_solve_matches_reversed_medium_solve() {
        let grid = grid1(16, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let theta = zero_mean_theta(grid);

        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let solver = CellSolver::new(&gen, SolverOptions::default()).unwrap();
        let (w, _) = solver.solve_periodic_adjoint(&theta).unwrap();

        // Forward solve with the time-reversed medium and slice-reversed
        // theta; its slice reversal solves the adjoint problem.
        let reversed = medium.time_reversed();
        let gen_rev = Generator::new(&kernel, &reversed, grid).unwrap();
        let solver_rev = CellSolver::new(&gen_rev, SolverOptions::default()).unwrap();
        let mut theta_rev = SpaceTimeField::zeros(grid);
        for t in 0..8 {
            theta_rev
                .slice_mut(t)
                .copy_from_slice(theta.slice((8 - t) % 8));
        }
        let (beta_rev, _) = solver_rev.solve_periodic(&theta_rev).unwrap();

        for t in 0..8 {
            let wt = w.slice(t);
            let bt = beta_rev.slice((8 - t) % 8);
            for (a, b) in wt.iter().zip(bt) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stationary_corrector_matches_periodic_for_static_media() {
        let grid = grid1(32, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        // Time amplitude zero: same modulation, no time dependence.
        let medium: Medium<f64> = modulated_sine_medium(1.0, 0.5, 0.0).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let solver = CellSolver::new(&gen, SolverOptions::default()).unwrap();
        let periodic = solver.solve_corrector().unwrap();
        let stationary = solver.solve_corrector_stationary().unwrap();
        for (a, b) in periodic.components.iter().zip(&stationary.components) {
            assert!(a.mean().abs() < 1e-10);
            assert!(b.mean().abs() < 1e-10);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-8, "{x} vs {y}");
            }
        }

        let time_dep = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let gen_td = Generator::new(&kernel, &time_dep, grid).unwrap();
        let solver_td = CellSolver::new(&gen_td, SolverOptions::default()).unwrap();
        assert!(solver_td.solve_corrector_stationary().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn monodromy_mass_and_contraction(
            scale in 0.5f64..2.0,
            amp in 0.0f64..0.5,
            time_amp in 0.0f64..0.9,
            seed in 0u64..1000,
        ) {
            let grid = grid1(16, 8);
            let kernel = Kernel::boxcar(1, 0.25).unwrap();
            let medium = modulated_sine_medium(scale, amp, time_amp).unwrap();
            let mut state = seed.wrapping_add(1);
            let mut unif = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            let nu = TorusField { grid, data: (0..16).map(|_| unif() - 0.5).collect() };
            let snu = monodromy(&kernel, &medium, &nu).unwrap();
            prop_assert!((snu.mean() - nu.mean()).abs() < 1e-12);
            let center = |f: &TorusField<f64>| {
                let m = f.mean();
                f.data.iter().map(|v| v - m).map(|v| v * v).sum::<f64>().sqrt()
            };
            prop_assert!(center(&snu) <= center(&nu));
        }
    }
}
