//! Physical-scale experiment: evolve the rescaled jump generator on a large
//! periodic box, evolve its diffusive limit spectrally, and measure how fast
//! the two flows approach each other as the scale separation grows.
//!
//! The box `[-L, L)^d` is treated as a torus of period `2L`. Commensurability
//! between the box step, the jump scale `eps`, and the unit cell is enforced
//! up front so that cell phases `x / eps mod 1` land on a finite lattice and
//! wrap-around never desynchronizes the medium.

use std::time::Instant;

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{fft_nd, Conv, FftCache, TrigSeries1};
use crate::kernel::Kernel;
use crate::medium::{Medium, TrigSeries};
use crate::scalar::{lit, pairwise_sum, pairwise_sum_by, Scalar};
use crate::torus::SpaceTimeField;

/// Relative slack for "is this ratio an integer" checks.
const COMMENSURABILITY_TOL: f64 = 1e-9;

/// Step-size factor in `dt = SAFETY * eps^2 / mu_plus`; the generator norm is
/// bounded by `2 mu_plus / eps^2`, so this keeps `|dt A| <= 0.2`.
const STEP_SAFETY: f64 = 0.1;

/// Kernel truncation tolerance when sampling the physical jump density.
const SUPPORT_TOL: f64 = 1e-12;

/// Fraction of `L` beyond which initial mass counts as "touching the boundary".
const BOUNDARY_BAND: f64 = 0.9;

fn wrap01<T: Scalar>(x: T) -> T {
    x - x.floor()
}

fn is_near_integer<T: Scalar>(x: T) -> bool {
    (x - x.round()).abs() <= lit::<T>(COMMENSURABILITY_TOL) * T::one().max(x.abs())
}

/// Uniform periodic grid on `[-L, L)^d` with `nx` nodes per axis, axis 0
/// fastest in the flat index.
#[derive(Clone, Copy, Debug)]
pub struct BoxDomain<T> {
    dim: usize,
    half_width: T,
    nx: usize,
}

impl<T: Scalar> BoxDomain<T> {
    pub fn new(dim: usize, half_width: T, nx: usize) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidConfig(format!("box dimension {dim} unsupported")));
        }
        if !(half_width > T::zero()) || !half_width.is_finite() {
            return Err(Error::InvalidConfig("box half-width must be positive".into()));
        }
        if nx < 16 || nx % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "Nx = {nx} must be even and at least 16"
            )));
        }
        Ok(BoxDomain { dim, half_width, nx })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> T {
        self.half_width
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn num_nodes(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    pub fn h(&self) -> T {
        (self.half_width + self.half_width) / lit::<T>(self.nx as f64)
    }

    /// h^d, the quadrature weight of one node.
    pub fn cell_weight(&self) -> T {
        let h = self.h();
        if self.dim == 1 {
            h
        } else {
            h * h
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.nx; self.dim]
    }

    fn axis_coord(&self, i: usize) -> T {
        lit::<T>(i as f64) * self.h() - self.half_width
    }

    pub fn coords(&self, idx: usize) -> Vec<T> {
        match self.dim {
            1 => vec![self.axis_coord(idx)],
            _ => vec![self.axis_coord(idx % self.nx), self.axis_coord(idx / self.nx)],
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.nx == other.nx
            && (self.half_width - other.half_width).abs()
                <= lit::<T>(COMMENSURABILITY_TOL) * self.half_width
    }

    /// A jump scale is admissible when the box period is an integer number of
    /// cells (`2L / eps` integer, so phases wrap cleanly) and the grid resolves
    /// each cell with an integer number of steps, at least eight.
    pub fn check_epsilon(&self, eps: T) -> Result<()> {
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        let periods = (self.half_width + self.half_width) / eps;
        if !is_near_integer(periods) {
            return Err(Error::Commensurability(format!(
                "box period 2L is not an integer multiple of eps (2L/eps = {:.6})",
                periods.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let per_cell = eps / self.h();
        if !is_near_integer(per_cell) {
            return Err(Error::Commensurability(format!(
                "grid step does not divide eps (eps/h = {:.6})",
                per_cell.to_f64().unwrap_or(f64::NAN)
            )));
        }
        if per_cell.round() < lit::<T>(8.0) {
            return Err(Error::Commensurability(format!(
                "fewer than 8 grid steps per cell (eps/h = {:.2})",
                per_cell.to_f64().unwrap_or(f64::NAN)
            )));
        }
        Ok(())
    }

    /// Grid steps per unit cell for an admissible `eps`.
    fn steps_per_cell(&self, eps: T) -> usize {
        (eps / self.h()).round().to_f64().unwrap() as usize
    }
}

/// Scalar samples over the box nodes.
#[derive(Clone, Debug)]
pub struct BoxField<T> {
    pub domain: BoxDomain<T>,
    pub data: Vec<T>,
}

impl<T: Scalar> BoxField<T> {
    pub fn zeros(domain: BoxDomain<T>) -> Self {
        BoxField {
            data: vec![T::zero(); domain.num_nodes()],
            domain,
        }
    }

    pub fn from_fn(domain: BoxDomain<T>, f: impl Fn(&[T]) -> T) -> Self {
        let data = (0..domain.num_nodes()).map(|i| f(&domain.coords(i))).collect();
        BoxField { domain, data }
    }

    pub fn mean(&self) -> T {
        pairwise_sum(&self.data) / lit::<T>(self.data.len() as f64)
    }

    pub fn l2_norm(&self) -> T {
        let n = self.data.len();
        (self.domain.cell_weight() * pairwise_sum_by(n, |i| self.data[i] * self.data[i])).sqrt()
    }

    pub fn sup_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.data.len(), other.data.len());
        self.domain.cell_weight() * pairwise_sum_by(self.data.len(), |i| self.data[i] * other.data[i])
    }

    /// Share of the squared mass sitting at `|x_a| > 0.9 L` on some axis.
    pub fn boundary_mass_fraction(&self) -> T {
        let band = lit::<T>(BOUNDARY_BAND) * self.domain.half_width;
        let total = pairwise_sum_by(self.data.len(), |i| self.data[i] * self.data[i]);
        if total == T::zero() {
            return T::zero();
        }
        let outer = pairwise_sum_by(self.data.len(), |i| {
            let x = self.domain.coords(i);
            if x.iter().any(|&c| c.abs() > band) {
                self.data[i] * self.data[i]
            } else {
                T::zero()
            }
        });
        outer / total
    }
}

/// One factor of a lowered medium, pre-evaluated on the box's cell phases:
/// `value(x, s) = sum_w [cx_w(x) cos(2 pi k_w s) - sx_w(x) sin(2 pi k_w s)]`.
struct SampledFactor<T> {
    waves: Vec<(i64, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> SampledFactor<T> {
    fn build(series: &TrigSeries<T>, phases: &[Vec<T>]) -> Self {
        let dim = phases.len();
        let nx = phases[0].len();
        let len = nx.pow(dim as u32);
        let two_pi = T::PI() + T::PI();
        let waves = series
            .waves
            .iter()
            .map(|w| {
                let mut cx = vec![T::zero(); len];
                let mut sx = vec![T::zero(); len];
                for i in 0..len {
                    let mut arg = w.phase;
                    if dim == 1 {
                        arg += two_pi * lit::<T>(w.k_space[0] as f64) * phases[0][i];
                    } else {
                        arg += two_pi * lit::<T>(w.k_space[0] as f64) * phases[0][i % nx];
                        arg += two_pi * lit::<T>(w.k_space[1] as f64) * phases[1][i / nx];
                    }
                    cx[i] = w.amp * arg.cos();
                    sx[i] = w.amp * arg.sin();
                }
                (w.k_time, cx, sx)
            })
            .collect();
        SampledFactor { waves }
    }

    fn eval_into(&self, s: T, out: &mut [T]) {
        let two_pi = T::PI() + T::PI();
        out.fill(T::zero());
        for (k_time, cx, sx) in &self.waves {
            let arg = two_pi * lit::<T>(*k_time as f64) * s;
            let (ct, st) = (arg.cos(), arg.sin());
            for ((o, &c), &sn) in out.iter_mut().zip(cx).zip(sx) {
                *o += c * ct - sn * st;
            }
        }
    }
}

/// The rescaled generator
/// `(A_eps u)(x) = eps^{-2} Int a(z) mu(x/eps, x/eps - z, t/eps^2) [u(x - eps z) - u(x)] dz`
/// discretized by point-sampling the jump density on the box grid. Weights are
/// renormalized to unit mass, which keeps constants in the kernel exactly and
/// makes the discrete operator conservative and self-adjoint (the sampled
/// density is even by radial symmetry).
pub struct EpsOperator<'a, T: Scalar> {
    medium: &'a Medium<T>,
    domain: BoxDomain<T>,
    eps: T,
    conv: Conv<T>,
    /// Nonzero sampled weights as (flat displacement, weight); the reference
    /// path and tabulated media walk this list directly.
    weights: Vec<(usize, T)>,
    /// Cell phase `x_i / eps mod 1` per axis node.
    phases: Vec<Vec<T>>,
    pairs: Option<Vec<(T, SampledFactor<T>, SampledFactor<T>)>>,
}

impl<'a, T: Scalar> EpsOperator<'a, T> {
    pub fn new(kernel: &Kernel<T>, medium: &'a Medium<T>, domain: BoxDomain<T>, eps: T) -> Result<Self> {
        if kernel.dim() != domain.dim || medium.dim() != domain.dim {
            return Err(Error::InvalidConfig(
                "kernel, medium and box dimensions disagree".into(),
            ));
        }
        domain.check_epsilon(eps)?;
        let radius = kernel.truncation_radius(lit::<T>(SUPPORT_TOL));
        if eps * radius > domain.half_width {
            return Err(Error::Commensurability(format!(
                "scaled kernel support {:.3} exceeds the box half-width",
                (eps * radius).to_f64().unwrap_or(f64::NAN)
            )));
        }

        let nx = domain.nx;
        let len = domain.num_nodes();
        let h = domain.h();
        let cut = radius * (T::one() + lit::<T>(1e-9));
        let mut weights_full = vec![T::zero(); len];
        let mut nonzero = Vec::new();
        let mut z = vec![T::zero(); domain.dim];
        for j in 0..len {
            for (a, za) in z.iter_mut().enumerate() {
                let idx = if a == 0 { j % nx } else { j / nx };
                let signed = if idx <= nx / 2 { idx as i64 } else { idx as i64 - nx as i64 };
                *za = lit::<T>(signed as f64) * h / eps;
            }
            let r2 = z.iter().fold(T::zero(), |acc, &za| acc + za * za);
            if r2.sqrt() > cut {
                continue;
            }
            let w = kernel.evaluate(&z);
            if w != T::zero() {
                weights_full[j] = w;
                nonzero.push(j);
            }
        }
        let mass = pairwise_sum(&weights_full);
        if !(mass > T::zero()) {
            return Err(Error::InvalidConfig(
                "sampled kernel has no mass on this grid; refine Nx".into(),
            ));
        }
        for w in weights_full.iter_mut() {
            *w = *w / mass;
        }
        let weights: Vec<(usize, T)> = nonzero.into_iter().map(|j| (j, weights_full[j])).collect();
        let conv = Conv::new(std::sync::Arc::new(FftCache::new()), &weights_full, &domain.dims());

        let phases: Vec<Vec<T>> = (0..domain.dim)
            .map(|_| (0..nx).map(|i| wrap01(domain.axis_coord(i) / eps)).collect())
            .collect();

        let pairs = medium.factor_pairs().map(|fps| {
            fps.into_iter()
                .map(|fp| {
                    (
                        fp.coeff,
                        SampledFactor::build(&fp.left, &phases),
                        SampledFactor::build(&fp.right, &phases),
                    )
                })
                .collect()
        });

        Ok(EpsOperator {
            medium,
            domain,
            eps,
            conv,
            weights,
            phases,
            pairs,
        })
    }

    pub fn domain(&self) -> &BoxDomain<T> {
        &self.domain
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    /// Largest time step the explicit integrator will take.
    pub fn stable_step(&self) -> T {
        let (_, mu_plus) = self.medium.bounds();
        lit::<T>(STEP_SAFETY) * self.eps * self.eps / mu_plus
    }

    fn cell_time(&self, t: T) -> T {
        wrap01(t / (self.eps * self.eps))
    }

    pub fn apply_into(&self, t: T, u: &[T], out: &mut [T]) {
        assert_eq!(u.len(), self.domain.num_nodes());
        assert_eq!(out.len(), u.len());
        let s = self.cell_time(t);
        let scale = T::one() / (self.eps * self.eps);
        match &self.pairs {
            Some(pairs) => {
                out.fill(T::zero());
                let mut lam = vec![T::zero(); u.len()];
                let mut rho = vec![T::zero(); u.len()];
                let mut prod = vec![T::zero(); u.len()];
                for (coeff, left, right) in pairs {
                    left.eval_into(s, &mut lam);
                    right.eval_into(s, &mut rho);
                    for (p, (&r, &v)) in prod.iter_mut().zip(rho.iter().zip(u)) {
                        *p = r * v;
                    }
                    let conv_ru = self.conv.apply(&prod);
                    let conv_r = self.conv.apply(&rho);
                    for i in 0..u.len() {
                        out[i] += *coeff * lam[i] * (conv_ru[i] - conv_r[i] * u[i]);
                    }
                }
                for o in out.iter_mut() {
                    *o = *o * scale;
                }
            }
            None => self.apply_dense_at(s, u, out),
        }
    }

    pub fn apply(&self, t: T, u: &BoxField<T>) -> BoxField<T> {
        let mut out = BoxField::zeros(self.domain);
        self.apply_into(t, &u.data, &mut out.data);
        out
    }

    /// Direct-quadrature reference path; also the only path for tabulated
    /// media. Quadratic in the support size, so keep the grids small.
    pub fn apply_dense(&self, t: T, u: &BoxField<T>) -> BoxField<T> {
        let mut out = BoxField::zeros(self.domain);
        self.apply_dense_at(self.cell_time(t), &u.data, &mut out.data);
        out
    }

    fn apply_dense_at(&self, s: T, u: &[T], out: &mut [T]) {
        let nx = self.domain.nx;
        let dim = self.domain.dim;
        let scale = T::one() / (self.eps * self.eps);
        out.par_iter_mut().enumerate().for_each(|(x, o)| {
            let mut xi = [T::zero(); 2];
            let mut eta = [T::zero(); 2];
            xi[0] = self.phases[0][x % nx];
            if dim == 2 {
                xi[1] = self.phases[1][x / nx];
            }
            let mut acc = T::zero();
            for &(j, w) in &self.weights {
                let src = if dim == 1 {
                    (x + nx - j) % nx
                } else {
                    let sx = (x % nx + nx - j % nx) % nx;
                    let sy = (x / nx + nx - j / nx) % nx;
                    sy * nx + sx
                };
                eta[0] = self.phases[0][src % nx];
                if dim == 2 {
                    eta[1] = self.phases[1][src / nx];
                }
                let mu = self.medium.evaluate_mu(&xi[..dim], &eta[..dim], s);
                acc += w * mu * (u[src] - u[x]);
            }
            *o = acc * scale;
        });
    }
}

/// States of the rescaled evolution at the requested times.
pub struct EpsTrajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<BoxField<T>>,
    pub steps: usize,
}

/// Explicit fourth-order integration of `du/dt = A_eps(t) u + f` from `u0` at
/// `t = 0`, recording the state at each requested time exactly (each segment
/// between snapshots is subdivided uniformly under the stability bound).
pub fn evolve_eps<T: Scalar>(
    op: &EpsOperator<'_, T>,
    u0: &BoxField<T>,
    snapshot_times: &[T],
    forcing: Option<&BoxField<T>>,
) -> Result<EpsTrajectory<T>> {
    if !u0.domain.same_shape(op.domain()) {
        return Err(Error::InvalidConfig("initial datum lives on a different grid".into()));
    }
    if let Some(f) = forcing {
        if !f.domain.same_shape(op.domain()) {
            return Err(Error::InvalidConfig("forcing lives on a different grid".into()));
        }
    }
    if snapshot_times.is_empty() {
        return Err(Error::InvalidConfig("no snapshot times requested".into()));
    }
    for w in snapshot_times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidConfig("snapshot times must increase strictly".into()));
        }
    }
    if snapshot_times[0] < T::zero() {
        return Err(Error::InvalidConfig("snapshot times must be nonnegative".into()));
    }

    let dt_max = op.stable_step();
    let n = u0.data.len();
    let mut u = u0.clone();
    let mut t = T::zero();
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut stage = vec![T::zero(); n];
    let mut states = Vec::with_capacity(snapshot_times.len());
    let mut steps_total = 0usize;

    let two = lit::<T>(2.0);
    let sixth = lit::<T>(1.0 / 6.0);
    for &target in snapshot_times {
        let span = target - t;
        if span > T::zero() {
            let steps = (span / dt_max).ceil().to_f64().unwrap() as usize;
            let dt = span / lit::<T>(steps as f64);
            let half = dt / two;
            for i in 0..steps {
                let t0 = t + dt * lit::<T>(i as f64);
                op.apply_into(t0, &u.data, &mut k1);
                add_forcing(&mut k1, forcing);
                for j in 0..n {
                    stage[j] = u.data[j] + half * k1[j];
                }
                op.apply_into(t0 + half, &stage, &mut k2);
                add_forcing(&mut k2, forcing);
                for j in 0..n {
                    stage[j] = u.data[j] + half * k2[j];
                }
                op.apply_into(t0 + half, &stage, &mut k3);
                add_forcing(&mut k3, forcing);
                for j in 0..n {
                    stage[j] = u.data[j] + dt * k3[j];
                }
                op.apply_into(t0 + dt, &stage, &mut k4);
                add_forcing(&mut k4, forcing);
                for j in 0..n {
                    u.data[j] += dt * sixth * (k1[j] + two * (k2[j] + k3[j]) + k4[j]);
                }
            }
            steps_total += steps;
            t = target;
        }
        states.push(u.clone());
    }

    Ok(EpsTrajectory {
        times: snapshot_times.to_vec(),
        states,
        steps: steps_total,
    })
}

fn add_forcing<T: Scalar>(k: &mut [T], forcing: Option<&BoxField<T>>) {
    if let Some(f) = forcing {
        for (kj, &fj) in k.iter_mut().zip(&f.data) {
            *kj += fj;
        }
    }
}

/// Signed frequency index of bin `m` on an `n`-point axis.
fn signed_freq(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Heat flow `dt u = div(a_eff grad u)` with constant `a_eff`, diagonal in the
/// discrete Fourier basis and therefore exact in time: mode `k` is damped by
/// `exp(-t k^T a_eff k)` at angular frequency `pi k / L` per axis.
pub fn evolve_homogenized<T: Scalar>(
    domain: &BoxDomain<T>,
    a_eff: &[T],
    u0: &BoxField<T>,
    times: &[T],
) -> Result<Vec<BoxField<T>>> {
    let d = domain.dim;
    if a_eff.len() != d * d {
        return Err(Error::InvalidConfig("effective matrix has the wrong shape".into()));
    }
    if !u0.domain.same_shape(domain) {
        return Err(Error::InvalidConfig("initial datum lives on a different grid".into()));
    }
    for &t in times {
        if t < T::zero() {
            return Err(Error::InvalidConfig("negative evolution time".into()));
        }
    }

    let cache = FftCache::new();
    let dims = domain.dims();
    let nx = domain.nx;
    let len = domain.num_nodes();
    let mut spec: Vec<Complex<T>> =
        u0.data.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft_nd(&cache, &mut spec, &dims, true);

    // k^T a_eff k per bin; the Nyquist cross term uses the odd-multiplier
    // convention (zero) while the squares keep the full frequency.
    let omega = |m: usize| T::PI() * lit::<T>(signed_freq(m, nx) as f64) / domain.half_width;
    let mut rate = vec![T::zero(); len];
    for (m, r) in rate.iter_mut().enumerate() {
        *r = if d == 1 {
            let w = omega(m);
            a_eff[0] * w * w
        } else {
            let (m0, m1) = (m % nx, m / nx);
            let (w0, w1) = (omega(m0), omega(m1));
            let cross = if m0 == nx / 2 || m1 == nx / 2 {
                T::zero()
            } else {
                (a_eff[1] + a_eff[2]) * w0 * w1
            };
            a_eff[0] * w0 * w0 + cross + a_eff[3] * w1 * w1
        };
    }

    let mut out = Vec::with_capacity(times.len());
    let mut buf = vec![Complex::new(T::zero(), T::zero()); len];
    for &t in times {
        for (b, (&sp, &r)) in buf.iter_mut().zip(spec.iter().zip(&rate)) {
            let decay = (-t * r).exp();
            *b = Complex::new(sp.re * decay, sp.im * decay);
        }
        fft_nd(&cache, &mut buf, &dims, false);
        out.push(BoxField {
            domain: *domain,
            data: buf.iter().map(|c| c.re).collect(),
        });
    }
    Ok(out)
}

/// Time slice of a cell field at off-grid `s` by trigonometric interpolation
/// per spatial node.
fn cell_slice_at<T: Scalar>(field: &SpaceTimeField<T>, s: T, cache: &FftCache<T>) -> Vec<T> {
    let space = field.grid.space_len();
    let nt = field.grid.nt;
    let mut series = vec![T::zero(); nt];
    let mut out = vec![T::zero(); space];
    for (p, o) in out.iter_mut().enumerate() {
        for (t, sv) in series.iter_mut().enumerate() {
            *sv = field.slice(t)[p];
        }
        *o = TrigSeries1::from_samples(cache, &series).eval(s);
    }
    out
}

/// Evaluate the trigonometric interpolant of an `n^d` spatial slice at the
/// `k^d` lattice of cell phases `thetas` (per axis). The Nyquist bin is taken
/// as a pure cosine, matching [`crate::fft::upsample_spectrum`].
fn phase_table<T: Scalar>(
    slice: &[T],
    dim: usize,
    n: usize,
    thetas: &[T],
    cache: &FftCache<T>,
) -> Vec<T> {
    let k = thetas.len();
    let mut spec: Vec<Complex<T>> = slice.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft_nd(&cache, &mut spec, &vec![n; dim], true);
    let scale = T::one() / lit::<T>(slice.len() as f64);
    let two_pi = T::PI() + T::PI();

    // modes[m][q] = e^{2 pi i freq(m) theta_q}, Nyquist as cos.
    let table: Vec<Vec<Complex<T>>> = (0..n)
        .map(|m| {
            thetas
                .iter()
                .map(|&th| {
                    if n % 2 == 0 && m == n / 2 {
                        Complex::new((two_pi * lit::<T>((n / 2) as f64) * th).cos(), T::zero())
                    } else {
                        let arg = two_pi * lit::<T>(signed_freq(m, n) as f64) * th;
                        Complex::new(arg.cos(), arg.sin())
                    }
                })
                .collect()
        })
        .collect();

    if dim == 1 {
        (0..k)
            .map(|q| {
                let mut acc = Complex::new(T::zero(), T::zero());
                for m in 0..n {
                    acc += spec[m] * table[m][q];
                }
                acc.re * scale
            })
            .collect()
    } else {
        // inner[m1][q0] = sum_m0 spec[m1 n + m0] table[m0][q0]
        let mut inner = vec![Complex::new(T::zero(), T::zero()); n * k];
        for m1 in 0..n {
            for m0 in 0..n {
                let c = spec[m1 * n + m0];
                for q0 in 0..k {
                    inner[m1 * k + q0] += c * table[m0][q0];
                }
            }
        }
        let mut out = vec![T::zero(); k * k];
        for q1 in 0..k {
            for q0 in 0..k {
                let mut acc = Complex::new(T::zero(), T::zero());
                for m1 in 0..n {
                    acc += table[m1][q1] * inner[m1 * k + q0];
                }
                out[q1 * k + q0] = acc.re * scale;
            }
        }
        out
    }
}

/// Spectral partial derivatives of a box field: `orders[a]` is the derivative
/// order along axis `a` (0, 1 or 2). First derivatives zero the Nyquist bin.
fn spectral_derivative<T: Scalar>(
    u: &BoxField<T>,
    orders: &[usize],
    cache: &FftCache<T>,
) -> Vec<T> {
    let nx = u.domain.nx;
    let d = u.domain.dim;
    let dims = u.domain.dims();
    let mut spec: Vec<Complex<T>> = u.data.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft_nd(cache, &mut spec, &dims, true);
    for (m, c) in spec.iter_mut().enumerate() {
        let mut factor = Complex::new(T::one(), T::zero());
        for a in 0..d {
            let idx = if a == 0 { m % nx } else { m / nx };
            let w = T::PI() * lit::<T>(signed_freq(idx, nx) as f64) / u.domain.half_width;
            match orders[a] {
                0 => {}
                1 => {
                    if nx % 2 == 0 && idx == nx / 2 {
                        factor = Complex::new(T::zero(), T::zero());
                    } else {
                        factor *= Complex::new(T::zero(), w);
                    }
                }
                _ => factor *= Complex::new(-w * w, T::zero()),
            }
        }
        *c *= factor;
    }
    fft_nd(cache, &mut spec, &dims, false);
    spec.into_iter().map(|c| c.re).collect()
}

/// Two-scale expansion `w(x) = u0(x) - eps chi_j(x/eps, t/eps^2) dj u0(x)
/// + eps^2 kappa_ij(x/eps, t/eps^2) dij u0(x)` built from the homogenized
/// state `u0_t` at time `t`. Cell fields are interpolated trigonometrically
/// in space and time so their sampling error stays below the scale being
/// measured.
pub fn build_ansatz<T: Scalar>(
    domain: &BoxDomain<T>,
    eps: T,
    t: T,
    u0_t: &BoxField<T>,
    chi: &[SpaceTimeField<T>],
    kappa: &[SpaceTimeField<T>],
) -> Result<BoxField<T>> {
    let d = domain.dim;
    if chi.len() != d || kappa.len() != d * d {
        return Err(Error::InvalidConfig("corrector component count mismatch".into()));
    }
    if !u0_t.domain.same_shape(domain) {
        return Err(Error::InvalidConfig("state lives on a different grid".into()));
    }
    domain.check_epsilon(eps)?;

    let cache = FftCache::new();
    let k = domain.steps_per_cell(eps);
    let xi0 = wrap01(-domain.half_width / eps);
    let thetas: Vec<T> = (0..k)
        .map(|q| wrap01(xi0 + lit::<T>(q as f64) / lit::<T>(k as f64)))
        .collect();
    let s = wrap01(t / (eps * eps));

    let sample = |field: &SpaceTimeField<T>| -> Vec<T> {
        let slice = cell_slice_at(field, s, &cache);
        phase_table(&slice, d, field.grid.n, &thetas, &cache)
    };

    let nx = domain.nx;
    let len = domain.num_nodes();
    let lookup = |table: &[T], i: usize| -> T {
        if d == 1 {
            table[i % k]
        } else {
            table[((i / nx) % k) * k + (i % nx) % k]
        }
    };

    let mut w = u0_t.clone();
    for (j, chi_j) in chi.iter().enumerate() {
        let mut orders = vec![0usize; d];
        orders[j] = 1;
        let du = spectral_derivative(u0_t, &orders, &cache);
        let table = sample(chi_j);
        for i in 0..len {
            w.data[i] -= eps * lookup(&table, i) * du[i];
        }
    }
    let eps2 = eps * eps;
    for i1 in 0..d {
        for i2 in 0..d {
            let kap = &kappa[i1 * d + i2];
            let mut orders = vec![0usize; d];
            orders[i1] += 1;
            orders[i2] += 1;
            let ddu = spectral_derivative(u0_t, &orders, &cache);
            let table = sample(kap);
            for i in 0..len {
                w.data[i] += eps2 * lookup(&table, i) * ddu[i];
            }
        }
    }
    Ok(w)
}

/// `|| dt w - A_eps w ||_{L^2}` for the two-scale ansatz at time `t0`, the
/// time derivative taken as a centered difference over one fine step of the
/// explicit integrator.
pub fn residual_norm<T: Scalar>(
    op: &EpsOperator<'_, T>,
    a_eff: &[T],
    u0: &BoxField<T>,
    chi: &[SpaceTimeField<T>],
    kappa: &[SpaceTimeField<T>],
    t0: T,
) -> Result<T> {
    let delta = op.stable_step();
    if t0 <= delta {
        return Err(Error::InvalidConfig("residual time must exceed one fine step".into()));
    }
    let domain = *op.domain();
    let times = [t0 - delta, t0, t0 + delta];
    let states = evolve_homogenized(&domain, a_eff, u0, &times)?;
    let eps = op.eps();
    let w_minus = build_ansatz(&domain, eps, times[0], &states[0], chi, kappa)?;
    let w_mid = build_ansatz(&domain, eps, times[1], &states[1], chi, kappa)?;
    let w_plus = build_ansatz(&domain, eps, times[2], &states[2], chi, kappa)?;

    let mut rhs = BoxField::zeros(domain);
    op.apply_into(t0, &w_mid.data, &mut rhs.data);
    let inv_2d = T::one() / (delta + delta);
    let mut res = BoxField::zeros(domain);
    for i in 0..res.data.len() {
        res.data[i] = (w_plus.data[i] - w_minus.data[i]) * inv_2d - rhs.data[i];
    }
    Ok(res.l2_norm())
}

/// Sweep configuration; defaults match the shipped demo scale.
#[derive(Clone, Debug)]
pub struct SweepConfig<T> {
    pub eps_list: Vec<T>,
    pub half_width: T,
    pub nx: usize,
    pub t_final: T,
    pub snapshots: usize,
    pub sigma: T,
    /// Relative perturbation applied to the effective matrix; nonzero values
    /// are the negative control (errors should plateau instead of vanishing).
    pub perturb_aeff: T,
    /// Grid steps per cell on the per-eps residual grids.
    pub residual_points: usize,
    pub boundary_tol: T,
}

impl<T: Scalar> Default for SweepConfig<T> {
    fn default() -> Self {
        SweepConfig {
            eps_list: vec![lit(0.4), lit(0.2), lit(0.1)],
            half_width: lit(10.0),
            nx: 2000,
            t_final: lit(0.5),
            snapshots: 16,
            sigma: lit(1.0),
            perturb_aeff: T::zero(),
            residual_points: 80,
            boundary_tol: lit(1e-12),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SweepRow<T> {
    pub epsilon: T,
    pub sup_error: T,
    pub final_error: T,
    pub residual: T,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult<T> {
    pub rows: Vec<SweepRow<T>>,
    /// The (possibly perturbed) matrix the limit flow actually used.
    pub a_eff_used: Vec<T>,
}

impl<T: Scalar> SweepResult<T> {
    /// Timings stay out of the CSV so identical runs emit identical bytes;
    /// they are available per row for logs and manifests.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,sup_error,final_error,residual\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.6e},{:.9e},{:.9e},{:.9e}\n",
                r.epsilon.to_f64().unwrap(),
                r.sup_error.to_f64().unwrap(),
                r.final_error.to_f64().unwrap(),
                r.residual.to_f64().unwrap(),
            ));
        }
        s
    }
}

/// Run both flows from the same Gaussian datum, record the relative gap at
/// uniformly spaced snapshots, and measure the ansatz residual on a per-eps
/// grid resolving each cell with `residual_points` steps.
pub fn convergence_sweep<T: Scalar>(
    kernel: &Kernel<T>,
    medium: &Medium<T>,
    a_eff: &[T],
    chi: &[SpaceTimeField<T>],
    kappa: &[SpaceTimeField<T>],
    cfg: &SweepConfig<T>,
) -> Result<SweepResult<T>> {
    let d = medium.dim();
    if cfg.eps_list.is_empty() {
        return Err(Error::InvalidConfig("empty eps list".into()));
    }
    if cfg.snapshots == 0 || cfg.residual_points < 8 {
        return Err(Error::InvalidConfig(
            "need at least one snapshot and 8 residual points per cell".into(),
        ));
    }
    let a_used: Vec<T> = a_eff.iter().map(|&v| v * (T::one() + cfg.perturb_aeff)).collect();

    let domain = BoxDomain::new(d, cfg.half_width, cfg.nx)?;
    for &eps in &cfg.eps_list {
        domain.check_epsilon(eps)?;
    }
    let sig2 = cfg.sigma * cfg.sigma;
    let gaussian = |x: &[T]| {
        let r2 = x.iter().fold(T::zero(), |a, &c| a + c * c);
        (-r2 / (sig2 + sig2)).exp()
    };
    let u0 = BoxField::from_fn(domain, gaussian);
    let frac = u0.boundary_mass_fraction();
    if frac > cfg.boundary_tol {
        return Err(Error::ConditionViolation(format!(
            "initial mass fraction {:.2e} beyond 0.9 L exceeds the configured bound",
            frac.to_f64().unwrap_or(f64::NAN)
        )));
    }

    let times: Vec<T> = (1..=cfg.snapshots)
        .map(|j| cfg.t_final * lit::<T>(j as f64) / lit::<T>(cfg.snapshots as f64))
        .collect();
    let limit_states = evolve_homogenized(&domain, &a_used, &u0, &times)?;

    let mut rows = Vec::with_capacity(cfg.eps_list.len());
    for &eps in &cfg.eps_list {
        let start = Instant::now();
        let op = EpsOperator::new(kernel, medium, domain, eps)?;
        let traj = evolve_eps(&op, &u0, &times, None)?;
        let mut sup_error = T::zero();
        let mut final_error = T::zero();
        for (state, limit) in traj.states.iter().zip(&limit_states) {
            let mut diff = state.clone();
            for (dv, &lv) in diff.data.iter_mut().zip(&limit.data) {
                *dv -= lv;
            }
            let rel = diff.l2_norm() / limit.l2_norm();
            sup_error = sup_error.max(rel);
            final_error = rel;
        }

        let res_nx_real = (cfg.half_width + cfg.half_width) * lit::<T>(cfg.residual_points as f64) / eps;
        if !is_near_integer(res_nx_real) {
            return Err(Error::Commensurability(
                "residual grid does not tile the box; adjust residual_points".into(),
            ));
        }
        let res_nx = res_nx_real.round().to_f64().unwrap() as usize;
        let res_domain = BoxDomain::new(d, cfg.half_width, res_nx)?;
        let res_u0 = BoxField::from_fn(res_domain, gaussian);
        let res_op = EpsOperator::new(kernel, medium, res_domain, eps)?;
        let t0 = cfg.t_final / lit::<T>(2.0);
        let residual = residual_norm(&res_op, &a_used, &res_u0, chi, kappa, t0)?;

        rows.push(SweepRow {
            epsilon: eps,
            sup_error,
            final_error,
            residual,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok(SweepResult { rows, a_eff_used: a_used })
}
