//! Stochastic cross-check of the effective matrix: simulate the unit-scale
//! jump process exactly by thinning and estimate the diffusivity from the
//! long-time covariance `Cov(X_T) / (2 T_walk)`.
//!
//! Proposals arrive at the constant rate `mu_plus`; each draws a displacement
//! from the kernel and survives with probability `mu(x, x - z, s) / mu_plus`.
//! Since the kernel has unit mass the true jump rate never exceeds the bound,
//! so the thinned process has exactly the right law with no time
//! discretization at all.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelFamily};
use crate::medium::Medium;
use crate::scalar::{lit, Scalar};

/// Bins in the inverse-CDF table for tabulated-radial kernels.
const TABLE_BINS: usize = 4096;

/// Acceptance rate below which the `mu_plus` bound is considered wasteful.
const MIN_ACCEPT_RATE: f64 = 0.05;

/// Shipped acceptance runs must satisfy these; exploratory runs may not.
pub const MIN_SHIPPED_PATHS: usize = 10_000;
pub const MIN_SHIPPED_HORIZON: f64 = 50.0;

#[derive(Clone, Copy, Debug)]
pub struct WalkConfig<T> {
    /// Length of each walk in medium periods.
    pub horizon: T,
    pub paths: usize,
    pub seed: u64,
    /// Jackknife blocks; paths are assigned round-robin.
    pub blocks: usize,
}

impl<T: Scalar> WalkConfig<T> {
    pub fn new(horizon: T, paths: usize, seed: u64) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidConfig("walk horizon must be positive".into()));
        }
        if paths < 2 {
            return Err(Error::InvalidConfig("need at least two paths".into()));
        }
        Ok(WalkConfig {
            horizon,
            paths,
            seed,
            blocks: 100,
        })
    }
}

#[derive(Clone, Debug)]
pub struct McResult<T> {
    /// Covariance-rate estimate, `d x d` row-major.
    pub a_mc: Vec<T>,
    /// Jackknife standard errors, entrywise.
    pub se: Vec<T>,
    /// Drift estimate `mean(X_T) / T` and its standard error; should be zero
    /// for symmetric media.
    pub drift: Vec<T>,
    pub drift_se: Vec<T>,
    pub accept_rate: f64,
    pub paths: usize,
}

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// splitmix64; one step of the counter advances the whole state.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    finalize(*state)
}

/// Per-path RNG stream keyed by (seed, path); independent of scheduling.
struct Stream {
    state: u64,
}

impl Stream {
    fn for_path(seed: u64, path: u64) -> Self {
        // Hash the pair through the finalizer twice so starting states are
        // scattered; a linear-in-path start would put every path on the same
        // counter orbit, merely shifted, and shifted streams share draws.
        let mut state = finalize(seed ^ 0x243F_6A88_85A3_08D3);
        state = finalize(state ^ path);
        Stream { state }
    }

    fn next(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform on the open interval (0, 1); never exactly zero, so logs are safe.
    fn uniform<T: Scalar>(&mut self) -> T {
        lit((((self.next() >> 11) as f64) + 0.5) * (1.0 / 9_007_199_254_740_992.0))
    }
}

/// Displacement sampler for each kernel family.
enum Sampler<T> {
    Box1 { r: T },
    Box2 { r: T },
    Gauss { dim: usize, sigma: T },
    Exp1 { lambda: T },
    Exp2 { lambda: T },
    /// Radial inverse CDF on a uniform radius grid.
    Table { dim: usize, r_max: T, cdf: Vec<T> },
}

impl<T: Scalar> Sampler<T> {
    fn build(kernel: &Kernel<T>) -> Self {
        let d = kernel.dim();
        match kernel.family() {
            KernelFamily::Box { r } => {
                if d == 1 {
                    Sampler::Box1 { r: *r }
                } else {
                    Sampler::Box2 { r: *r }
                }
            }
            KernelFamily::Gaussian { sigma } => Sampler::Gauss { dim: d, sigma: *sigma },
            KernelFamily::Exponential { lambda } => {
                if d == 1 {
                    Sampler::Exp1 { lambda: *lambda }
                } else {
                    Sampler::Exp2 { lambda: *lambda }
                }
            }
            KernelFamily::TabulatedRadial { radii, .. } => {
                let r_max = radii[radii.len() - 1];
                // Cumulative radial mass 2 a(rho) (line) or 2 pi rho a(rho)
                // (plane) on a uniform grid, trapezoid rule, normalized.
                let mut cdf = vec![T::zero(); TABLE_BINS + 1];
                let step = r_max / lit::<T>(TABLE_BINS as f64);
                let density = |rho: T| -> T {
                    let mut z = vec![T::zero(); d];
                    z[0] = rho;
                    let a = kernel.evaluate(&z);
                    if d == 1 {
                        lit::<T>(2.0) * a
                    } else {
                        lit::<T>(2.0) * T::PI() * rho * a
                    }
                };
                let mut prev = density(T::zero());
                for i in 1..=TABLE_BINS {
                    let rho = step * lit::<T>(i as f64);
                    let cur = density(rho);
                    cdf[i] = cdf[i - 1] + lit::<T>(0.5) * (prev + cur) * step;
                    prev = cur;
                }
                let total = cdf[TABLE_BINS];
                for c in cdf.iter_mut() {
                    *c = *c / total;
                }
                Sampler::Table { dim: d, r_max, cdf }
            }
        }
    }

    fn draw(&self, rng: &mut Stream, z: &mut [T]) {
        let two_pi = T::PI() + T::PI();
        match self {
            Sampler::Box1 { r } => {
                let u: T = rng.uniform();
                z[0] = *r * (u + u - T::one());
            }
            Sampler::Box2 { r } => {
                let u: T = rng.uniform();
                let v: T = rng.uniform();
                let rho = *r * u.sqrt();
                let ang = two_pi * v;
                z[0] = rho * ang.cos();
                z[1] = rho * ang.sin();
            }
            Sampler::Gauss { dim, sigma } => {
                let u: T = rng.uniform();
                let v: T = rng.uniform();
                let mag = *sigma * (-(u.ln() + u.ln())).sqrt();
                let ang = two_pi * v;
                z[0] = mag * ang.cos();
                if *dim == 2 {
                    z[1] = mag * ang.sin();
                }
            }
            Sampler::Exp1 { lambda } => {
                let u: T = rng.uniform();
                let v: T = rng.uniform();
                let mag = -u.ln() / *lambda;
                z[0] = if v < lit::<T>(0.5) { -mag } else { mag };
            }
            Sampler::Exp2 { lambda } => {
                // Radial density is Gamma(2, lambda): sum of two exponentials.
                let u1: T = rng.uniform();
                let u2: T = rng.uniform();
                let v: T = rng.uniform();
                let rho = -(u1.ln() + u2.ln()) / *lambda;
                let ang = two_pi * v;
                z[0] = rho * ang.cos();
                z[1] = rho * ang.sin();
            }
            Sampler::Table { dim, r_max, cdf } => {
                let u: T = rng.uniform();
                let idx = cdf.partition_point(|&c| c < u);
                let step = *r_max / lit::<T>(TABLE_BINS as f64);
                let rho = if idx == 0 {
                    T::zero()
                } else {
                    let (lo, hi) = (cdf[idx - 1], cdf[idx]);
                    let frac = if hi > lo { (u - lo) / (hi - lo) } else { T::zero() };
                    step * (lit::<T>((idx - 1) as f64) + frac)
                };
                if *dim == 1 {
                    let v: T = rng.uniform();
                    z[0] = if v < lit::<T>(0.5) { -rho } else { rho };
                } else {
                    let v: T = rng.uniform();
                    let ang = two_pi * v;
                    z[0] = rho * ang.cos();
                    z[1] = rho * ang.sin();
                }
            }
        }
    }
}

struct PathOut<T> {
    x: [T; 2],
    proposed: u64,
    accepted: u64,
}

fn walk<T: Scalar>(
    sampler: &Sampler<T>,
    medium: &Medium<T>,
    horizon: T,
    mu_plus: T,
    seed: u64,
    path: u64,
) -> PathOut<T> {
    let d = medium.dim();
    let mut rng = Stream::for_path(seed, path);
    let mut x = [T::zero(); 2];
    let mut z = [T::zero(); 2];
    let mut eta = [T::zero(); 2];
    let mut t = T::zero();
    let mut proposed = 0u64;
    let mut accepted = 0u64;
    loop {
        let u: T = rng.uniform();
        t = t - u.ln() / mu_plus;
        if t >= horizon {
            break;
        }
        proposed += 1;
        sampler.draw(&mut rng, &mut z[..d]);
        for a in 0..d {
            eta[a] = x[a] - z[a];
        }
        let mu = medium.evaluate_mu(&x[..d], &eta[..d], t);
        let v: T = rng.uniform();
        if v * mu_plus < mu {
            accepted += 1;
            x[..d].copy_from_slice(&eta[..d]);
        }
    }
    PathOut { x, proposed, accepted }
}

/// Estimate the diffusivity of the jump process with rate density
/// `a(z) mu(x, x - z, s)` from `cfg.paths` independent walks.
pub fn simulate_diffusivity<T: Scalar>(
    kernel: &Kernel<T>,
    medium: &Medium<T>,
    cfg: &WalkConfig<T>,
) -> Result<McResult<T>> {
    if kernel.dim() != medium.dim() {
        return Err(Error::InvalidConfig("kernel and medium dimensions disagree".into()));
    }
    if cfg.paths < 2 || cfg.blocks < 2 {
        return Err(Error::InvalidConfig("need at least two paths and two blocks".into()));
    }
    if !(cfg.horizon > T::zero()) {
        return Err(Error::InvalidConfig("walk horizon must be positive".into()));
    }
    let d = medium.dim();
    let (_, mu_plus) = medium.bounds();
    let sampler = Sampler::build(kernel);

    let outs: Vec<PathOut<T>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| walk(&sampler, medium, cfg.horizon, mu_plus, cfg.seed, p as u64))
        .collect();

    // Deterministic aggregation in path order, grouped round-robin into
    // jackknife blocks.
    let blocks = cfg.blocks.min(cfg.paths);
    let mut n_b = vec![0usize; blocks];
    let mut s1_b = vec![[T::zero(); 2]; blocks];
    let mut s2_b = vec![[T::zero(); 4]; blocks];
    let mut proposed = 0u64;
    let mut accepted = 0u64;
    for (i, out) in outs.iter().enumerate() {
        let b = i % blocks;
        n_b[b] += 1;
        for a in 0..d {
            s1_b[b][a] += out.x[a];
            for c in 0..d {
                s2_b[b][a * d + c] += out.x[a] * out.x[c];
            }
        }
        proposed += out.proposed;
        accepted += out.accepted;
    }
    let accept_rate = if proposed == 0 {
        1.0
    } else {
        accepted as f64 / proposed as f64
    };
    if accept_rate < MIN_ACCEPT_RATE {
        return Err(Error::InefficientThinning { rate: accept_rate });
    }

    let n = lit::<T>(cfg.paths as f64);
    let mut s1 = vec![T::zero(); d];
    let mut s2 = vec![T::zero(); d * d];
    for b in 0..blocks {
        for a in 0..d {
            s1[a] += s1_b[b][a];
            for c in 0..d {
                s2[a * d + c] += s2_b[b][a * d + c];
            }
        }
    }
    let two_t = cfg.horizon + cfg.horizon;
    let cov_rate = |s1: &[T], s2: &[T], count: T| -> Vec<T> {
        let mut out = vec![T::zero(); d * d];
        for a in 0..d {
            for c in 0..d {
                let mean_ac = (s1[a] / count) * (s1[c] / count);
                out[a * d + c] = (s2[a * d + c] / count - mean_ac) / two_t;
            }
        }
        out
    };
    let a_mc = cov_rate(&s1, &s2, n);

    // Leave-one-block-out estimates and the jackknife spread.
    let mut leave = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let count = lit::<T>((cfg.paths - n_b[b]) as f64);
        let mut s1l = vec![T::zero(); d];
        let mut s2l = vec![T::zero(); d * d];
        for a in 0..d {
            s1l[a] = s1[a] - s1_b[b][a];
            for c in 0..d {
                s2l[a * d + c] = s2[a * d + c] - s2_b[b][a * d + c];
            }
        }
        leave.push(cov_rate(&s1l, &s2l, count));
    }
    let bf = lit::<T>(blocks as f64);
    let jack_factor = (bf - T::one()) / bf;
    let mut se = vec![T::zero(); d * d];
    for e in 0..d * d {
        let mean = leave.iter().fold(T::zero(), |acc, l| acc + l[e]) / bf;
        let ss = leave
            .iter()
            .fold(T::zero(), |acc, l| acc + (l[e] - mean) * (l[e] - mean));
        se[e] = (jack_factor * ss).sqrt();
    }

    let mut drift = vec![T::zero(); d];
    let mut drift_se = vec![T::zero(); d];
    for a in 0..d {
        let mean = s1[a] / n;
        drift[a] = mean / cfg.horizon;
        let var = (s2[a * d + a] / n - mean * mean).max(T::zero());
        drift_se[a] = (var / n).sqrt() / cfg.horizon;
    }

    Ok(McResult {
        a_mc,
        se,
        drift,
        drift_se,
        accept_rate,
        paths: cfg.paths,
    })
}
