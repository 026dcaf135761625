//! Unit-cell discretization: grids and fields on `T^d` / `T^{d+1}`, lattice
//! periodization of the jump kernel and its moment weights, and the
//! unit-scale generator
//!
//! `A(s) v (xi) = int a(xi - eta) mu(xi, eta, s) (v(eta) - v(xi)) d eta`,
//!
//! with the integral folded onto the torus because `mu` and `v` are periodic.

use std::io::{BufRead, Write as IoWrite};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{Conv, FftCache};
use crate::kernel::Kernel;
use crate::medium::{Medium, TrigSeries};
use crate::scalar::{lit, pairwise_sum, pairwise_sum_by, Scalar};

/// Periodization images are kept until the neglected kernel mass is below
/// this (the kernel has unit mass, so this is absolute).
const TAIL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TorusGrid {
    pub dim: usize,
    pub n: usize,
    pub nt: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize, nt: usize) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidConfig(format!("grid dimension {dim} unsupported")));
        }
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidConfig(format!("N = {n} must be even and at least 8")));
        }
        if nt < 8 {
            return Err(Error::InvalidConfig(format!("Nt = {nt} must be at least 8")));
        }
        Ok(TorusGrid { dim, n, nt })
    }

    pub fn space_len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn h<T: Scalar>(&self) -> T {
        T::one() / lit::<T>(self.n as f64)
    }

    pub fn ds<T: Scalar>(&self) -> T {
        T::one() / lit::<T>(self.nt as f64)
    }

    /// h^d, the quadrature weight of one spatial node.
    pub fn cell_weight<T: Scalar>(&self) -> T {
        let h = self.h::<T>();
        if self.dim == 1 {
            h
        } else {
            h * h
        }
    }

    pub fn coords<T: Scalar>(&self, idx: usize) -> Vec<T> {
        let h = self.h::<T>();
        match self.dim {
            1 => vec![lit::<T>(idx as f64) * h],
            _ => vec![
                lit::<T>((idx % self.n) as f64) * h,
                lit::<T>((idx / self.n) as f64) * h,
            ],
        }
    }

    pub fn time_node<T: Scalar>(&self, t: usize) -> T {
        lit::<T>(t as f64) * self.ds::<T>()
    }
}

/// Scalar samples over the `N^d` spatial nodes at a fixed time.
#[derive(Clone, Debug)]
pub struct TorusField<T> {
    pub grid: TorusGrid,
    pub data: Vec<T>,
}

impl<T: Scalar> TorusField<T> {
    pub fn zeros(grid: TorusGrid) -> Self {
        TorusField {
            grid,
            data: vec![T::zero(); grid.space_len()],
        }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn(&[T]) -> T) -> Self {
        let data = (0..grid.space_len()).map(|i| f(&grid.coords::<T>(i))).collect();
        TorusField { grid, data }
    }

    pub fn mean(&self) -> T {
        pairwise_sum(&self.data) / lit::<T>(self.data.len() as f64)
    }

    pub fn l2_norm(&self) -> T {
        (pairwise_sum_by(self.data.len(), |i| self.data[i] * self.data[i])
            * self.grid.cell_weight::<T>())
        .sqrt()
    }

    pub fn sup_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `h^d sum u v`, the L2 pairing on the cell.
    pub fn dot(&self, other: &Self) -> T {
        pairwise_sum_by(self.data.len(), |i| self.data[i] * other.data[i])
            * self.grid.cell_weight::<T>()
    }
}

/// Samples over `N^d x Nt` nodes, time-major: slice `t` is contiguous.
#[derive(Clone, Debug)]
pub struct SpaceTimeField<T> {
    pub grid: TorusGrid,
    pub data: Vec<T>,
}

impl<T: Scalar> SpaceTimeField<T> {
    pub fn zeros(grid: TorusGrid) -> Self {
        SpaceTimeField {
            grid,
            data: vec![T::zero(); grid.space_len() * grid.nt],
        }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn(&[T], T) -> T) -> Self {
        let len = grid.space_len();
        let mut data = Vec::with_capacity(len * grid.nt);
        for t in 0..grid.nt {
            let s = grid.time_node::<T>(t);
            for i in 0..len {
                data.push(f(&grid.coords::<T>(i), s));
            }
        }
        SpaceTimeField { grid, data }
    }

    pub fn slice(&self, t: usize) -> &[T] {
        let len = self.grid.space_len();
        &self.data[t * len..(t + 1) * len]
    }

    pub fn slice_mut(&mut self, t: usize) -> &mut [T] {
        let len = self.grid.space_len();
        &mut self.data[t * len..(t + 1) * len]
    }

    pub fn mean(&self) -> T {
        pairwise_sum(&self.data) / lit::<T>(self.data.len() as f64)
    }

    pub fn l2_norm(&self) -> T {
        (pairwise_sum_by(self.data.len(), |i| self.data[i] * self.data[i])
            * self.grid.cell_weight::<T>()
            * self.grid.ds::<T>())
        .sqrt()
    }

    pub fn sup_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// The kernel and its moment weights folded onto the torus:
///
/// `a_per(z) = sum_m a(z + m)`, `p_i(z) = sum_m a(z+m)(z+m)_i`,
/// `pp_ij(z) = sum_m a(z+m)(z+m)_i (z+m)_j`,
///
/// all indexed by the displacement node `z = j/N`. `a` is normalized to exact
/// unit discrete mass (so folded averages stay convex combinations), `p` is
/// centrally antisymmetrized, and the diagonal of `pp` is rescaled so its
/// discrete total equals the kernel's exact second moment.
#[derive(Clone, Debug)]
pub struct PeriodizedKernelSet<T> {
    pub grid: TorusGrid,
    pub radius: T,
    pub a: Vec<T>,
    pub p: Vec<Vec<T>>,
    pub pp: Vec<Vec<T>>,
    /// Exact d x d second-moment matrix of the kernel, row-major.
    pub second_moment: Vec<T>,
}

impl<T: Scalar> PeriodizedKernelSet<T> {
    pub fn new(kernel: &Kernel<T>, grid: TorusGrid) -> Result<Self> {
        if kernel.dim() != grid.dim {
            return Err(Error::InvalidConfig(format!(
                "kernel dimension {} does not match grid dimension {}",
                kernel.dim(),
                grid.dim
            )));
        }
        let d = grid.dim;
        let len = grid.space_len();
        let radius = kernel.truncation_radius(lit::<T>(TAIL_TOL));
        let slack = lit::<T>(1e-9) * radius.max(T::one());
        let cut = radius + slack;
        let m_max = cut.to_f64().unwrap().ceil() as i64 + 1;

        let mut a = vec![T::zero(); len];
        let mut p = vec![vec![T::zero(); len]; d];
        let mut pp = vec![vec![T::zero(); len]; d * d];
        for idx in 0..len {
            let z: Vec<T> = grid.coords::<T>(idx);
            let mut images: Vec<[T; 2]> = Vec::new();
            match d {
                1 => {
                    for m in -m_max..=m_max {
                        let x = z[0] + lit::<T>(m as f64);
                        if x.abs() <= cut {
                            images.push([x, T::zero()]);
                        }
                    }
                }
                _ => {
                    for my in -m_max..=m_max {
                        let y = z[1] + lit::<T>(my as f64);
                        for mx in -m_max..=m_max {
                            let x = z[0] + lit::<T>(mx as f64);
                            if (x * x + y * y).sqrt() <= cut {
                                images.push([x, y]);
                            }
                        }
                    }
                }
            }
            for pt in images {
                let val = kernel.evaluate(&pt[..d]);
                if val == T::zero() {
                    continue;
                }
                a[idx] += val;
                for i in 0..d {
                    p[i][idx] += val * pt[i];
                    for j in 0..d {
                        pp[i * d + j][idx] += val * pt[i] * pt[j];
                    }
                }
            }
        }

        // Mirror index under z -> -z (all axes) and under single-axis flips.
        let n = grid.n;
        let central = |idx: usize| -> usize {
            match d {
                1 => (n - idx % n) % n,
                _ => (n - idx % n) % n + n * ((n - idx / n) % n),
            }
        };
        let hd = grid.cell_weight::<T>();
        let half = lit::<T>(0.5);

        // Image accumulation order differs between mirrored nodes; average
        // the mirror pair so evenness holds exactly.
        {
            let orig = a.clone();
            for idx in 0..len {
                a[idx] = (orig[idx] + orig[central(idx)]) * half;
            }
        }
        let mass = hd * pairwise_sum(&a);
        for v in a.iter_mut() {
            *v = *v / mass;
        }
        for pi in p.iter_mut() {
            let orig = pi.clone();
            for idx in 0..len {
                pi[idx] = (orig[idx] - orig[central(idx)]) * half;
            }
        }
        let exact = kernel.second_moment_matrix();
        for i in 0..d {
            for j in 0..d {
                let arr = &mut pp[i * d + j];
                let orig = arr.clone();
                if i == j {
                    for idx in 0..len {
                        arr[idx] = (orig[idx] + orig[central(idx)]) * half;
                    }
                    let total = hd * pairwise_sum(arr);
                    let scale = exact[i * d + i] / total;
                    for v in arr.iter_mut() {
                        *v = *v * scale;
                    }
                } else {
                    // Odd under each single-axis flip; exact total zero.
                    let flip = |idx: usize, axis: usize| -> usize {
                        let (x, y) = (idx % n, idx / n);
                        if axis == 0 {
                            (n - x) % n + n * y
                        } else {
                            x + n * ((n - y) % n)
                        }
                    };
                    let quarter = lit::<T>(0.25);
                    for idx in 0..len {
                        arr[idx] = (orig[idx] - orig[flip(idx, 0)] - orig[flip(idx, 1)]
                            + orig[flip(flip(idx, 0), 1)])
                            * quarter;
                    }
                }
            }
        }

        Ok(PeriodizedKernelSet {
            grid,
            radius,
            a,
            p,
            pp,
            second_moment: exact,
        })
    }
}

/// Samples `series(xi, s)` over the spatial nodes.
pub fn sample_series<T: Scalar>(grid: TorusGrid, series: &TrigSeries<T>, s: T, out: &mut [T]) {
    let two_pi = T::PI() + T::PI();
    let n = grid.n;
    let h = grid.h::<T>();
    out.fill(T::zero());
    for w in &series.waves {
        let base = lit::<T>(w.k_time as f64) * s;
        match grid.dim {
            1 => {
                let kx = lit::<T>(w.k_space[0] as f64);
                for (idx, o) in out.iter_mut().enumerate() {
                    let arg = base + kx * lit::<T>(idx as f64) * h;
                    *o += w.amp * (two_pi * arg + w.phase).cos();
                }
            }
            _ => {
                let kx = lit::<T>(w.k_space[0] as f64);
                let ky = lit::<T>(w.k_space[1] as f64);
                for (idx, o) in out.iter_mut().enumerate() {
                    let arg = base
                        + kx * lit::<T>((idx % n) as f64) * h
                        + ky * lit::<T>((idx / n) as f64) * h;
                    *o += w.amp * (two_pi * arg + w.phase).cos();
                }
            }
        }
    }
}

/// One lowered medium term sampled on the grid at a fixed time. Symmetric
/// terms share one buffer for both sides.
#[derive(Clone, Debug)]
pub struct SampledPair<T> {
    pub coeff: T,
    pub left: Arc<Vec<T>>,
    pub right: Arc<Vec<T>>,
}

enum GenPath<T> {
    /// Pairwise quadrature over all (xi, eta) node pairs; any medium.
    Dense,
    /// Circular convolutions per lowered term; separable media only.
    Separable(Vec<crate::medium::FactorPair<T>>),
}

/// The discretized generator `A(s)` on a fixed grid. Construction
/// precomputes the periodized kernel weights and the FFT plans; `apply` is
/// pure and reuses them.
pub struct Generator<T: Scalar> {
    grid: TorusGrid,
    kernels: PeriodizedKernelSet<T>,
    medium: Medium<T>,
    cache: Arc<FftCache<T>>,
    conv: Conv<T>,
    path: GenPath<T>,
    node_coords: Vec<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(kernel: &Kernel<T>, medium: &Medium<T>, grid: TorusGrid) -> Result<Self> {
        if medium.dim() != grid.dim {
            return Err(Error::InvalidConfig(format!(
                "medium dimension {} does not match grid dimension {}",
                medium.dim(),
                grid.dim
            )));
        }
        let kernels = PeriodizedKernelSet::new(kernel, grid)?;
        let cache = Arc::new(FftCache::new());
        let hd = grid.cell_weight::<T>();
        let weighted: Vec<T> = kernels.a.iter().map(|&v| v * hd).collect();
        let dims = vec![grid.n; grid.dim];
        let conv = Conv::new(cache.clone(), &weighted, &dims);
        let path = match medium.factor_pairs() {
            Some(pairs) => GenPath::Separable(pairs),
            None => GenPath::Dense,
        };
        let mut node_coords = vec![T::zero(); grid.space_len() * grid.dim];
        for idx in 0..grid.space_len() {
            let c = grid.coords::<T>(idx);
            node_coords[idx * grid.dim..(idx + 1) * grid.dim].copy_from_slice(&c);
        }
        Ok(Generator {
            grid,
            kernels,
            medium: medium.clone(),
            cache,
            conv,
            path,
            node_coords,
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn kernel_set(&self) -> &PeriodizedKernelSet<T> {
        &self.kernels
    }

    pub fn medium(&self) -> &Medium<T> {
        &self.medium
    }

    pub fn fft_cache(&self) -> Arc<FftCache<T>> {
        self.cache.clone()
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.path, GenPath::Separable(_))
    }

    /// `h^d`-weighted circular convolution with the periodized kernel.
    pub fn conv_a(&self, f: &[T]) -> Vec<T> {
        self.conv.apply(f)
    }

    /// The lowered medium terms sampled at time `s`; `None` on the dense path.
    pub fn sampled_pairs(&self, s: T) -> Option<Vec<SampledPair<T>>> {
        let pairs = match &self.path {
            GenPath::Separable(p) => p,
            GenPath::Dense => return None,
        };
        let len = self.grid.space_len();
        Some(
            pairs
                .iter()
                .map(|fp| {
                    let mut left = vec![T::zero(); len];
                    sample_series(self.grid, &fp.left, s, &mut left);
                    let left = Arc::new(left);
                    let right = if fp.left == fp.right {
                        left.clone()
                    } else {
                        let mut right = vec![T::zero(); len];
                        sample_series(self.grid, &fp.right, s, &mut right);
                        Arc::new(right)
                    };
                    SampledPair {
                        coeff: fp.coeff,
                        left,
                        right,
                    }
                })
                .collect(),
        )
    }

    /// `G(., s) = sum_m c_m left_m (a_per * right_m)` for sampled terms.
    pub fn g_from_pairs(&self, pairs: &[SampledPair<T>]) -> Vec<T> {
        let len = self.grid.space_len();
        let mut g = vec![T::zero(); len];
        for sp in pairs {
            let cr = self.conv.apply(&sp.right);
            for i in 0..len {
                g[i] += sp.coeff * sp.left[i] * cr[i];
            }
        }
        g
    }

    /// Generator application given pre-sampled terms and their `G` field;
    /// the work per call is one convolution per term.
    pub fn apply_sampled(&self, pairs: &[SampledPair<T>], g: &[T], v: &[T], out: &mut [T]) {
        let len = self.grid.space_len();
        debug_assert_eq!(v.len(), len);
        out.fill(T::zero());
        let mut tmp = vec![T::zero(); len];
        for sp in pairs {
            for i in 0..len {
                tmp[i] = sp.right[i] * v[i];
            }
            let cr = self.conv.apply(&tmp);
            for i in 0..len {
                out[i] += sp.coeff * sp.left[i] * cr[i];
            }
        }
        for i in 0..len {
            out[i] -= g[i] * v[i];
        }
    }

    pub fn apply_into(&self, s: T, v: &[T], out: &mut [T]) {
        match &self.path {
            GenPath::Separable(_) => {
                let pairs = self.sampled_pairs(s).unwrap();
                let g = self.g_from_pairs(&pairs);
                self.apply_sampled(&pairs, &g, v, out);
            }
            GenPath::Dense => self.apply_dense(s, v, out),
        }
    }

    fn apply_dense(&self, s: T, v: &[T], out: &mut [T]) {
        let len = self.grid.space_len();
        let n = self.grid.n;
        let d = self.grid.dim;
        let hd = self.grid.cell_weight::<T>();
        let a = &self.kernels.a;
        let coords = &self.node_coords;
        let medium = &self.medium;
        out.par_iter_mut().enumerate().for_each(|(x, o)| {
            let xi = &coords[x * d..(x + 1) * d];
            let vx = v[x];
            let sum = pairwise_sum_by(len, |e| {
                let disp = match d {
                    1 => (x + len - e) % len,
                    _ => {
                        let dx = (x % n + n - e % n) % n;
                        let dy = (x / n + n - e / n) % n;
                        dx + n * dy
                    }
                };
                let w = a[disp];
                if w == T::zero() {
                    T::zero()
                } else {
                    let eta = &coords[e * d..(e + 1) * d];
                    w * medium.evaluate_mu(xi, eta, s) * (v[e] - vx)
                }
            });
            *o = sum * hd;
        });
    }

    pub fn apply(&self, s: T, v: &TorusField<T>) -> TorusField<T> {
        let mut out = TorusField::zeros(self.grid);
        self.apply_into(s, &v.data, &mut out.data);
        out
    }

    /// `G(., s)` as a spatial field.
    pub fn g_field(&self, s: T) -> Vec<T> {
        match &self.path {
            GenPath::Separable(_) => {
                let pairs = self.sampled_pairs(s).unwrap();
                self.g_from_pairs(&pairs)
            }
            GenPath::Dense => {
                let len = self.grid.space_len();
                let n = self.grid.n;
                let d = self.grid.dim;
                let hd = self.grid.cell_weight::<T>();
                let a = &self.kernels.a;
                let coords = &self.node_coords;
                let medium = &self.medium;
                let mut g = vec![T::zero(); len];
                g.par_iter_mut().enumerate().for_each(|(x, o)| {
                    let xi = &coords[x * d..(x + 1) * d];
                    let sum = pairwise_sum_by(len, |e| {
                        let disp = match d {
                            1 => (x + len - e) % len,
                            _ => {
                                let dx = (x % n + n - e % n) % n;
                                let dy = (x / n + n - e / n) % n;
                                dx + n * dy
                            }
                        };
                        let w = a[disp];
                        if w == T::zero() {
                            T::zero()
                        } else {
                            w * medium.evaluate_mu(xi, &coords[e * d..(e + 1) * d], s)
                        }
                    });
                    *o = sum * hd;
                });
                g
            }
        }
    }

    /// `G(xi, s)` on all space-time nodes, with the ellipticity bounds
    /// enforced: the discrete `G` is a convex combination of medium values,
    /// so violations mean an inconsistent medium declaration.
    pub fn compute_g(&self) -> Result<SpaceTimeField<T>> {
        let (lo, hi) = self.medium.bounds();
        let slack = lit::<T>(1e-12) * hi.max(T::one());
        let mut out = SpaceTimeField::zeros(self.grid);
        for t in 0..self.grid.nt {
            let s = self.grid.time_node::<T>(t);
            let g = self.g_field(s);
            out.slice_mut(t).copy_from_slice(&g);
        }
        let gmin = out.data.iter().fold(T::infinity(), |m, v| m.min(*v));
        let gmax = out.data.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        if gmin < lo - slack || gmax > hi + slack {
            return Err(Error::ConditionViolation(format!(
                "G range [{gmin:e}, {gmax:e}] escapes the declared medium bounds [{lo:e}, {hi:e}]"
            )));
        }
        Ok(out)
    }
}

/// One-off generator application (plans are rebuilt; use `Generator` for
/// repeated calls).
pub fn apply_generator<T: Scalar>(
    kernel: &Kernel<T>,
    medium: &Medium<T>,
    s: T,
    v: &TorusField<T>,
) -> Result<TorusField<T>> {
    let gen = Generator::new(kernel, medium, v.grid)?;
    Ok(gen.apply(s, v))
}

pub fn compute_g<T: Scalar>(
    kernel: &Kernel<T>,
    medium: &Medium<T>,
    grid: TorusGrid,
) -> Result<SpaceTimeField<T>> {
    Generator::new(kernel, medium, grid)?.compute_g()
}

/// Returns `(<A(s)u, v>, <u, A(s)v>)`; C5 media make these agree to rounding.
pub fn generator_matrix_symmetry_probe<T: Scalar>(
    kernel: &Kernel<T>,
    medium: &Medium<T>,
    s: T,
    u: &TorusField<T>,
    v: &TorusField<T>,
) -> Result<(T, T)> {
    let gen = Generator::new(kernel, medium, u.grid)?;
    let au = gen.apply(s, u);
    let av = gen.apply(s, v);
    Ok((au.dot(v), u.dot(&av)))
}

/// Writes a space-time field: CSV with coordinates for d = 1, a one-line
/// text header `perihom-field v1 d N Nt` followed by flat little-endian
/// 64-bit floats (time-major) for d = 2.
pub fn write_field<T: Scalar, W: IoWrite>(w: &mut W, field: &SpaceTimeField<T>) -> Result<()> {
    let g = field.grid;
    match g.dim {
        1 => {
            writeln!(w, "# perihom-field v1 1 {} {}", g.n, g.nt)?;
            writeln!(w, "s,xi,value")?;
            for t in 0..g.nt {
                let s = t as f64 / g.nt as f64;
                for i in 0..g.n {
                    let x = i as f64 / g.n as f64;
                    writeln!(w, "{},{},{}", s, x, field.data[t * g.n + i].to_f64().unwrap())?;
                }
            }
        }
        _ => {
            writeln!(w, "perihom-field v1 2 {} {}", g.n, g.nt)?;
            for v in &field.data {
                w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_field<R: BufRead>(r: &mut R) -> Result<SpaceTimeField<f64>> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let line = header.trim_start_matches('#').trim();
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "perihom-field" || parts[1] != "v1" {
        return Err(Error::FieldFormat(format!("bad field header: {}", header.trim())));
    }
    let dim: usize = parts[2].parse().map_err(|_| Error::FieldFormat("bad dimension".into()))?;
    let n: usize = parts[3].parse().map_err(|_| Error::FieldFormat("bad N".into()))?;
    let nt: usize = parts[4].parse().map_err(|_| Error::FieldFormat("bad Nt".into()))?;
    let grid = TorusGrid::new(dim, n, nt)?;
    let mut field = SpaceTimeField::zeros(grid);
    match dim {
        1 => {
            let mut cols = String::new();
            r.read_line(&mut cols)?;
            for t in 0..nt {
                for i in 0..n {
                    let mut row = String::new();
                    if r.read_line(&mut row)? == 0 {
                        return Err(Error::FieldFormat("truncated CSV field".into()));
                    }
                    let val = row
                        .trim()
                        .rsplit(',')
                        .next()
                        .and_then(|v| v.parse::<f64>().ok())
                        .ok_or_else(|| Error::FieldFormat(format!("bad CSV row: {}", row.trim())))?;
                    field.data[t * n + i] = val;
                }
            }
        }
        _ => {
            let mut buf = [0u8; 8];
            for v in field.data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{modulated_sine_medium, MediumForm, Wave};

    fn grid1(n: usize, nt: usize) -> TorusGrid {
        TorusGrid::new(1, n, nt).unwrap()
    }

    fn rand_field(grid: TorusGrid, seed: u64) -> TorusField<f64> {
        let mut state = seed;
        let mut unif = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        TorusField {
            grid,
            data: (0..grid.space_len()).map(|_| unif() - 0.5).collect(),
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(1, 7, 8).is_err());
        assert!(TorusGrid::new(1, 10, 4).is_err());
        assert!(TorusGrid::new(3, 16, 16).is_err());
        assert!(TorusGrid::new(2, 16, 9).is_ok());
    }

    #[test]
    fn periodized_set_moments_are_exact() {
        for kernel in [
            Kernel::boxcar(1, 0.25).unwrap(),
            Kernel::boxcar(1, 1.0).unwrap(),
            Kernel::gaussian(1, 0.35).unwrap(),
            Kernel::exponential(1, 3.0).unwrap(),
        ] {
            let grid = grid1(64, 8);
            let set = PeriodizedKernelSet::new(&kernel, grid).unwrap();
            let h = 1.0 / 64.0;
            let mass: f64 = set.a.iter().sum::<f64>() * h;
            assert!((mass - 1.0).abs() < 1e-14, "mass {mass}");
            let m2: f64 = set.pp[0].iter().sum::<f64>() * h;
            assert!(
                (m2 - set.second_moment[0]).abs() < 1e-13 * set.second_moment[0],
                "m2 {m2} vs {}",
                set.second_moment[0]
            );
            let p_total: f64 = set.p[0].iter().sum::<f64>() * h;
            assert!(p_total.abs() < 1e-13);
            // Central antisymmetry of p and symmetry of a are exact.
            for j in 0..64 {
                let jm = (64 - j) % 64;
                assert_eq!(set.p[0][j], -set.p[0][jm]);
                assert_eq!(set.a[j], set.a[jm]);
            }
        }
    }

    #[test]
    fn periodized_box_r1_is_flat() {
        // box(r=1) folds to the constant density 1/2 * 2 images = 1.
        let set =
            PeriodizedKernelSet::new(&Kernel::boxcar(1, 1.0f64).unwrap(), grid1(32, 8)).unwrap();
        for &v in &set.a {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn generator_kills_constants() {
        let grid = grid1(32, 8);
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let v = TorusField {
            grid,
            data: vec![3.7; 32],
        };
        let out = apply_generator(&kernel, &medium, 0.3, &v).unwrap();
        assert!(out.sup_norm() < 1e-12);
    }

    #[test]
    fn constant_medium_reduces_to_convolution() {
        let grid = grid1(64, 8);
        let kernel = Kernel::gaussian(1, 0.2).unwrap();
        let medium = Medium::constant(1, 2.5).unwrap();
        let v = rand_field(grid, 7);
        let out = apply_generator(&kernel, &medium, 0.0, &v).unwrap();
        let set = PeriodizedKernelSet::new(&kernel, grid).unwrap();
        let h = 1.0 / 64.0;
        for x in 0..64 {
            let mut conv = 0.0;
            for e in 0..64 {
                conv += set.a[(x + 64 - e) % 64] * v.data[e] * h;
            }
            let want = 2.5 * (conv - v.data[x]);
            assert!((out.data[x] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_an_eigenfunction() {
        // d=1, box(0.25), mu = 1: A cos(2 pi xi) = lambda cos with
        // lambda = int a(z) cos(2 pi z) dz - 1. Oracle: Simpson quadrature.
        let n_quad = 40_000;
        let mut acc = 0.0;
        for i in 0..=n_quad {
            let z = -0.25 + 0.5 * i as f64 / n_quad as f64;
            let w = if i == 0 || i == n_quad {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * 2.0 * (2.0 * std::f64::consts::PI * z).cos();
        }
        let lambda_oracle = acc * (0.5 / n_quad as f64) / 3.0 - 1.0;
        assert!((lambda_oracle - (2.0 / std::f64::consts::PI - 1.0)).abs() < 1e-10);

        let grid = grid1(64, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = Medium::constant(1, 1.0).unwrap();
        let v = TorusField::<f64>::from_fn(grid, |x| (2.0 * std::f64::consts::PI * x[0]).cos());
        let out = apply_generator(&kernel, &medium, 0.0, &v).unwrap();
        // Eigenfunction property is exact for the circulant operator.
        let lambda_h = out.data[0] / v.data[0];
        for x in 0..64 {
            assert!((out.data[x] - lambda_h * v.data[x]).abs() < 1e-12);
        }
        // The discrete eigenvalue matches the quadrature oracle to O(h^2).
        assert!(
            (lambda_h - lambda_oracle).abs() < 2e-3,
            "lambda_h {lambda_h} vs oracle {lambda_oracle}"
        );
    }

    #[test]
    fn g_constant_and_time_only() {
        let grid = grid1(32, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let g = compute_g(&kernel, &Medium::constant(1, 2.0f64).unwrap(), grid).unwrap();
        for &v in &g.data {
            assert!((v - 2.0).abs() < 1e-13);
        }

        let m = Medium::new(
            1,
            MediumForm::TimeOnly(TrigSeries {
                waves: vec![
                    Wave { k_space: vec![], k_time: 0, amp: 1.0, phase: 0.0 },
                    Wave { k_space: vec![], k_time: 1, amp: 0.5, phase: -std::f64::consts::FRAC_PI_2 },
                ],
            }),
            0.5,
            1.5,
        )
        .unwrap();
        let g = compute_g(&kernel, &m, grid).unwrap();
        for t in 0..8 {
            let s = t as f64 / 8.0;
            let want = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * s).sin();
            for &v in g.slice(t) {
                assert!((v - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn g_respects_bounds_and_flags_lies() {
        let grid = grid1(64, 16);
        let kernel = Kernel::gaussian(1, 0.3).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let g = compute_g(&kernel, &medium, grid).unwrap();
        for &v in &g.data {
            assert!((0.25..=1.75).contains(&v));
        }

        // Same modulation but with understated declared bounds.
        let mut terms = vec![(1.0, TrigSeries::constant(1.0, 1))];
        terms.extend(Medium::product_term(0.5, vec![1], -std::f64::consts::FRAC_PI_2, 0.5, 0.0));
        let liar = Medium::new(1, MediumForm::SeparableSum(terms), 0.9, 1.1).unwrap();
        assert!(matches!(
            compute_g(&kernel, &liar, grid),
            Err(Error::ConditionViolation(_))
        ));
    }

    #[test]
    fn symmetry_probe_matches() {
        let grid = grid1(32, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let u = rand_field(grid, 1);
        let v = rand_field(grid, 2);
        let (auv, uav) = generator_matrix_symmetry_probe(&kernel, &medium, 0.37, &u, &v).unwrap();
        assert!((auv - uav).abs() <= 1e-12 * auv.abs().max(uav.abs()).max(1e-30));

        let (dir, same) = generator_matrix_symmetry_probe(&kernel, &medium, 0.37, &u, &u).unwrap();
        assert!(dir <= 1e-14 && (dir - same).abs() < 1e-14); // Dirichlet form, nonpositive
    }

    #[test]
    fn mass_conservation_and_nsd() {
        let grid = grid1(32, 8);
        let kernel = Kernel::exponential(1, 4.0).unwrap();
        let medium = modulated_sine_medium(2.0, 0.5, 0.5).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        for seed in 0..5u64 {
            let v = rand_field(grid, 100 + seed);
            let av = gen.apply(0.1 * seed as f64, &v);
            assert!(av.mean().abs() < 1e-12);
            assert!(av.dot(&v) <= 1e-13);
        }
    }

    #[test]
    fn dense_path_matches_separable_path() {
        let grid = grid1(32, 16);
        let kernel = Kernel::gaussian(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let gen_fft = Generator::new(&kernel, &medium, grid).unwrap();
        assert!(gen_fft.is_separable());

        // Same medium tabulated on a fine grid takes the dense path.
        let n = 32;
        let nt = 16;
        let mut values = vec![0.0; n * n * nt];
        for t in 0..nt {
            for e in 0..n {
                for x in 0..n {
                    values[(t * n + e) * n + x] = medium.evaluate_mu(
                        &[x as f64 / n as f64],
                        &[e as f64 / n as f64],
                        t as f64 / nt as f64,
                    );
                }
            }
        }
        let tab = Medium::new(1, MediumForm::Tabulated { n, nt, values }, 0.25, 1.75).unwrap();
        let gen_dense = Generator::new(&kernel, &tab, grid).unwrap();
        assert!(!gen_dense.is_separable());

        let v = rand_field(grid, 5);
        // On grid nodes the interpolant is exact, so the two paths agree.
        for s in [0.0, 0.25, 0.5] {
            let a = gen_fft.apply(s, &v);
            let b = gen_dense.apply(s, &v);
            for i in 0..n {
                assert!((a.data[i] - b.data[i]).abs() < 1e-12, "slice {s} node {i}");
            }
        }
    }

    #[test]
    fn spectral_gap_surrogate() {
        let grid = grid1(32, 8);
        let kernel = Kernel::boxcar(1, 0.25).unwrap();
        let medium = modulated_sine_medium(1.0, 0.5, 0.5).unwrap();
        let gen = Generator::new(&kernel, &medium, grid).unwrap();
        let (mu_minus, _) = medium.bounds();
        for seed in 0..5u64 {
            let mut v = rand_field(grid, 300 + seed);
            let m = v.mean();
            for x in v.data.iter_mut() {
                *x -= m;
            }
            let av = gen.apply(0.23, &v);
            let lhs = -av.dot(&v);
            let cav = gen.conv_a(&v.data);
            let bv = TorusField {
                grid,
                data: v.data.iter().zip(&cav).map(|(a, b)| *a - *b).collect(),
            };
            let rhs = mu_minus * bv.dot(&v);
            assert!(lhs >= rhs - 1e-12, "{lhs} < {rhs}");
        }
    }

    #[test]
    fn field_io_roundtrip() {
        let grid = grid1(16, 8);
        let f = SpaceTimeField::<f64>::from_fn(grid, |x, s| (x[0] + 2.0 * s).sin());
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let back = read_field(&mut std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.grid, grid);
        for (a, b) in f.data.iter().zip(&back.data) {
            assert_eq!(*a, *b, "CSV roundtrip must be exact");
        }

        let grid2 = TorusGrid::new(2, 8, 8).unwrap();
        let f2 = SpaceTimeField::from_fn(grid2, |x, s| x[0] * x[1] + s);
        let mut buf2 = Vec::new();
        write_field(&mut buf2, &f2).unwrap();
        let back2 = read_field(&mut std::io::Cursor::new(&buf2)).unwrap();
        assert_eq!(back2.grid, grid2);
        assert_eq!(back2.data, f2.data);
    }
}
