//! Convolution kernels `a(z)`: radial densities on `R^d` (d = 1 or 2) with
//! unit mass, finite second moment, and closed-form tails, plus the lattice
//! periodization used to fold integrals over `R^d` onto the unit torus.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Supported radial families. Arbitrary radial profiles enter as
/// `TabulatedRadial` (piecewise linear in `|z|`, flat inside the first node,
/// zero beyond the last node) and are renormalized to unit mass at
/// construction.
#[derive(Clone, Debug)]
pub enum KernelFamily<T> {
    /// Uniform density on the ball `|z| <= r`.
    Box { r: T },
    /// Isotropic normal density with per-axis standard deviation `sigma`.
    Gaussian { sigma: T },
    /// Radial density proportional to `exp(-lambda |z|)`.
    Exponential { lambda: T },
    /// Piecewise-linear radial profile; values are post-normalization.
    TabulatedRadial { radii: Vec<T>, values: Vec<T> },
}

#[derive(Clone, Debug)]
pub struct Kernel<T> {
    dim: usize,
    family: KernelFamily<T>,
}

/// Boundary values of compact-support families are sampled at half height,
/// the discontinuity point's symmetric (midpoint) value.
const EDGE_REL_TOL: f64 = 1e-9;

impl<T: Scalar> Kernel<T> {
    pub fn new(dim: usize, family: KernelFamily<T>) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidKernel(format!(
                "dimension {dim} unsupported (1 or 2)"
            )));
        }
        let family = match family {
            KernelFamily::Box { r } if r > T::zero() => KernelFamily::Box { r },
            KernelFamily::Gaussian { sigma } if sigma > T::zero() => KernelFamily::Gaussian { sigma },
            KernelFamily::Exponential { lambda } if lambda > T::zero() => {
                KernelFamily::Exponential { lambda }
            }
            KernelFamily::TabulatedRadial { radii, values } => {
                Self::build_tabulated(dim, radii, values)?
            }
            _ => return Err(Error::InvalidKernel("nonpositive family parameter".into())),
        };
        Ok(Kernel { dim, family })
    }

    pub fn boxcar(dim: usize, r: T) -> Result<Self> {
        Self::new(dim, KernelFamily::Box { r })
    }

    pub fn gaussian(dim: usize, sigma: T) -> Result<Self> {
        Self::new(dim, KernelFamily::Gaussian { sigma })
    }

    pub fn exponential(dim: usize, lambda: T) -> Result<Self> {
        Self::new(dim, KernelFamily::Exponential { lambda })
    }

    pub fn tabulated(dim: usize, radii: Vec<T>, values: Vec<T>) -> Result<Self> {
        Self::new(dim, KernelFamily::TabulatedRadial { radii, values })
    }

    fn build_tabulated(dim: usize, radii: Vec<T>, values: Vec<T>) -> Result<KernelFamily<T>> {
        if radii.len() != values.len() || radii.len() < 2 {
            return Err(Error::InvalidKernel(
                "tabulated-radial needs matching radii/values with at least two nodes".into(),
            ));
        }
        if radii[0] <= T::zero() || radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidKernel(
                "tabulated-radial radii must be positive and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidKernel(
                "tabulated-radial values must be finite and non-negative".into(),
            ));
        }
        let raw = KernelFamily::TabulatedRadial {
            radii: radii.clone(),
            values: values.clone(),
        };
        let mass = tabulated_weighted_integral(dim, &raw, 0, T::zero(), T::infinity());
        if mass <= T::zero() {
            return Err(Error::InvalidKernel("tabulated-radial profile has zero mass".into()));
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(KernelFamily::TabulatedRadial { radii, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &KernelFamily<T> {
        &self.family
    }

    /// Density at `z`.
    pub fn evaluate(&self, z: &[T]) -> T {
        assert_eq!(z.len(), self.dim);
        self.evaluate_radial(norm(z))
    }

    fn evaluate_radial(&self, rho: T) -> T {
        match &self.family {
            KernelFamily::Box { r } => {
                let vol = match self.dim {
                    1 => lit::<T>(2.0) * *r,
                    _ => T::PI() * *r * *r,
                };
                let edge = lit::<T>(EDGE_REL_TOL) * T::one().max(*r);
                if (rho - *r).abs() <= edge {
                    lit::<T>(0.5) / vol
                } else if rho < *r {
                    T::one() / vol
                } else {
                    T::zero()
                }
            }
            KernelFamily::Gaussian { sigma } => {
                let s2 = *sigma * *sigma;
                let norm_const = match self.dim {
                    1 => (lit::<T>(2.0) * T::PI() * s2).sqrt(),
                    _ => lit::<T>(2.0) * T::PI() * s2,
                };
                (-(rho * rho) / (lit::<T>(2.0) * s2)).exp() / norm_const
            }
            KernelFamily::Exponential { lambda } => {
                let norm_const = match self.dim {
                    1 => *lambda / lit::<T>(2.0),
                    _ => *lambda * *lambda / (lit::<T>(2.0) * T::PI()),
                };
                norm_const * (-*lambda * rho).exp()
            }
            KernelFamily::TabulatedRadial { radii, values } => {
                let n = radii.len();
                if rho >= radii[n - 1] {
                    return T::zero();
                }
                if rho <= radii[0] {
                    return values[0];
                }
                let i = radii.partition_point(|&r| r < rho) - 1;
                let t = (rho - radii[i]) / (radii[i + 1] - radii[i]);
                values[i] + t * (values[i + 1] - values[i])
            }
        }
    }

    /// Total mass `∫ a(z) dz`; exactly 1 for the analytic families and 1 up to
    /// rounding for `TabulatedRadial` after construction-time renormalization.
    pub fn mass(&self) -> T {
        match &self.family {
            KernelFamily::TabulatedRadial { .. } => {
                tabulated_weighted_integral(self.dim, &self.family, 0, T::zero(), T::infinity())
            }
            _ => T::one(),
        }
    }

    /// `M2_ij = ∫ z_i z_j a(z) dz`, row-major `d × d`. Radial symmetry makes
    /// it a multiple of the identity.
    pub fn second_moment_matrix(&self) -> Vec<T> {
        let radial = self.second_moment_radial();
        let per_axis = radial / lit::<T>(self.dim as f64);
        let mut m2 = vec![T::zero(); self.dim * self.dim];
        for i in 0..self.dim {
            m2[i * self.dim + i] = per_axis;
        }
        m2
    }

    /// `∫ |z|^2 a(z) dz`.
    pub fn second_moment_radial(&self) -> T {
        match &self.family {
            KernelFamily::Box { r } => match self.dim {
                1 => *r * *r / lit::<T>(3.0),
                _ => *r * *r / lit::<T>(2.0),
            },
            KernelFamily::Gaussian { sigma } => lit::<T>(self.dim as f64) * *sigma * *sigma,
            KernelFamily::Exponential { lambda } => {
                let l2 = *lambda * *lambda;
                match self.dim {
                    1 => lit::<T>(2.0) / l2,
                    _ => lit::<T>(6.0) / l2,
                }
            }
            KernelFamily::TabulatedRadial { .. } => {
                tabulated_weighted_integral(self.dim, &self.family, 2, T::zero(), T::infinity())
            }
        }
    }

    /// `∫_{|z|>R} (1 + |z|^2) a(z) dz`, the quantity that bounds the error of
    /// truncating the periodization image sum at radius `R`.
    pub fn tail_mass(&self, big_r: T) -> T {
        assert!(big_r > T::zero());
        match &self.family {
            KernelFamily::Box { r } => {
                if big_r >= *r {
                    return T::zero();
                }
                let (r, s) = (*r, big_r);
                match self.dim {
                    1 => ((r - s) + (r * r * r - s * s * s) / lit::<T>(3.0)) / r,
                    _ => {
                        let r2 = r * r;
                        let s2 = s * s;
                        ((r2 - s2) + (r2 * r2 - s2 * s2) / lit::<T>(2.0)) / r2
                    }
                }
            }
            KernelFamily::Gaussian { sigma } => {
                let s2 = *sigma * *sigma;
                match self.dim {
                    1 => {
                        // With t = R/sigma and phi the standard normal density:
                        // (1 + sigma^2) erfc(t/sqrt2) + 2 sigma^2 t phi(t).
                        let t = big_r / *sigma;
                        let phi = (-(t * t) / lit::<T>(2.0)).exp()
                            / (lit::<T>(2.0) * T::PI()).sqrt();
                        (T::one() + s2) * erfc(t / lit::<T>(2.0).sqrt())
                            + lit::<T>(2.0) * s2 * t * phi
                    }
                    _ => {
                        let v = big_r * big_r / (lit::<T>(2.0) * s2);
                        (-v).exp() * (T::one() + lit::<T>(2.0) * s2 * (T::one() + v))
                    }
                }
            }
            KernelFamily::Exponential { lambda } => {
                let l = *lambda;
                let r = big_r;
                let e = (-l * r).exp();
                match self.dim {
                    1 => e * (T::one() + r * r + lit::<T>(2.0) * r / l + lit::<T>(2.0) / (l * l)),
                    _ => {
                        e * (T::one()
                            + l * r
                            + l * r * r * r
                            + lit::<T>(3.0) * r * r
                            + lit::<T>(6.0) * r / l
                            + lit::<T>(6.0) / (l * l))
                    }
                }
            }
            KernelFamily::TabulatedRadial { .. } => {
                tabulated_weighted_integral(self.dim, &self.family, 0, big_r, T::infinity())
                    + tabulated_weighted_integral(self.dim, &self.family, 2, big_r, T::infinity())
            }
        }
    }

    /// Smallest practical truncation radius with `tail_mass(R) <= tol`.
    pub fn truncation_radius(&self, tol: T) -> T {
        match &self.family {
            KernelFamily::Box { r } => *r,
            KernelFamily::TabulatedRadial { radii, .. } => radii[radii.len() - 1],
            _ => {
                let mut hi = match &self.family {
                    KernelFamily::Gaussian { sigma } => *sigma,
                    KernelFamily::Exponential { lambda } => T::one() / *lambda,
                    _ => unreachable!(),
                };
                while self.tail_mass(hi) > tol {
                    hi = hi * lit::<T>(2.0);
                }
                let mut lo = hi / lit::<T>(2.0);
                for _ in 0..100 {
                    let mid = (lo + hi) / lit::<T>(2.0);
                    if self.tail_mass(mid) > tol {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }

    /// Lattice periodization `Σ_{m ∈ Z^d, |x+m| <= R} a(x + m)`.
    pub fn periodized(&self, x: &[T], big_r: T) -> Result<T> {
        assert_eq!(x.len(), self.dim);
        if let KernelFamily::Box { r } = &self.family {
            if big_r < *r {
                return Err(Error::InvalidKernel(format!(
                    "truncation radius {big_r} below box support {r}"
                )));
            }
        }
        let reach = big_r.to_f64().unwrap().ceil() as i64 + 1;
        let mut total = T::zero();
        let mut m = vec![0i64; self.dim];
        self.periodized_rec(x, big_r, reach, 0, &mut m, &mut total);
        Ok(total)
    }

    fn periodized_rec(&self, x: &[T], big_r: T, reach: i64, axis: usize, m: &mut Vec<i64>, total: &mut T) {
        if axis == self.dim {
            let mut shifted = [T::zero(); 2];
            for i in 0..self.dim {
                shifted[i] = x[i] + lit::<T>(m[i] as f64);
            }
            let rho = norm(&shifted[..self.dim]);
            // Value-based cut: the image is kept when |x+m| <= R, with the
            // boundary itself included (compact families vanish there anyway
            // except for the box midpoint value).
            if rho <= big_r + lit::<T>(EDGE_REL_TOL) * T::one().max(big_r) {
                *total += self.evaluate_radial(rho);
            }
            return;
        }
        for mi in -reach..=reach {
            m[axis] = mi;
            self.periodized_rec(x, big_r, reach, axis + 1, m, total);
        }
    }
}

fn norm<T: Scalar>(z: &[T]) -> T {
    match z.len() {
        1 => z[0].abs(),
        _ => z.iter().map(|&v| v * v).sum::<T>().sqrt(),
    }
}

/// `∫ rho^p a(rho) * surface(d, rho) drho` over `[x, y]` for a tabulated
/// profile, exact per piecewise-linear segment. `surface` is `2` for d=1 and
/// `2 pi rho` for d=2, so `p = 0` gives mass and `p = 2` the radial second
/// moment.
fn tabulated_weighted_integral<T: Scalar>(
    dim: usize,
    family: &KernelFamily<T>,
    p: u32,
    x: T,
    y: T,
) -> T {
    let (radii, values) = match family {
        KernelFamily::TabulatedRadial { radii, values } => (radii, values),
        _ => unreachable!(),
    };
    // Power of rho in the integrand: p plus d-1 from the surface measure.
    let q = p + (dim as u32 - 1);
    let scale = match dim {
        1 => lit::<T>(2.0),
        _ => lit::<T>(2.0) * T::PI(),
    };
    let poly = |c0: T, c1: T, a: T, b: T| -> T {
        // ∫_a^b (c0 + c1 rho) rho^q drho
        let int_pow = |e: u32, a: T, b: T| (b.powi(e as i32) - a.powi(e as i32)) / lit::<T>(e as f64);
        c0 * int_pow(q + 1, a, b) + c1 * int_pow(q + 2, a, b)
    };
    let mut total = T::zero();
    // Flat cap inside the first node.
    let cap_hi = radii[0].min(y);
    if x < cap_hi {
        total += poly(values[0], T::zero(), x.max(T::zero()), cap_hi);
    }
    for i in 0..radii.len() - 1 {
        let (r0, r1) = (radii[i], radii[i + 1]);
        let a = x.max(r0);
        let b = y.min(r1);
        if a >= b {
            continue;
        }
        let slope = (values[i + 1] - values[i]) / (r1 - r0);
        let c0 = values[i] - slope * r0;
        total += poly(c0, slope, a, b);
    }
    scale * total
}

/// Complementary error function, relative accuracy about 1.2e-7 everywhere
/// (Chebyshev-fitted exponential form). Plenty for tail thresholds, which are
/// compared against tolerances, never differenced.
pub fn erfc<T: Scalar>(x: T) -> T {
    let z = x.abs();
    let t = T::one() / (T::one() + z / lit::<T>(2.0));
    let poly = lit::<T>(-1.26551223)
        + t * (lit::<T>(1.00002368)
            + t * (lit::<T>(0.37409196)
                + t * (lit::<T>(0.09678418)
                    + t * (lit::<T>(-0.18628806)
                        + t * (lit::<T>(0.27886807)
                            + t * (lit::<T>(-1.13520398)
                                + t * (lit::<T>(1.48851587)
                                    + t * (lit::<T>(-0.82215223) + t * lit::<T>(0.17087277)))))))));
    let ans = t * (-z * z + poly).exp();
    if x >= T::zero() {
        ans
    } else {
        lit::<T>(2.0) - ans
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn evaluate_box_and_gaussian_pointwise() {
        let b = Kernel::<f64>::boxcar(1, 1.0).unwrap();
        assert_eq!(b.evaluate(&[0.0]), 0.5);
        assert_eq!(b.evaluate(&[1.5]), 0.0);
        assert_eq!(b.evaluate(&[1.0]), 0.25); // midpoint value at the jump
        let g = Kernel::<f64>::gaussian(1, 0.5).unwrap();
        let want = 1.0 / (0.5 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((g.evaluate(&[0.0]) - want).abs() < 1e-14);
    }

    #[test]
    fn evaluate_is_even() {
        let kernels = [
            Kernel::<f64>::boxcar(2, 0.8).unwrap(),
            Kernel::<f64>::gaussian(2, 0.4).unwrap(),
            Kernel::<f64>::exponential(2, 1.7).unwrap(),
        ];
        let mut state = 0x12345u64;
        let mut unif = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for k in &kernels {
            for _ in 0..1000 {
                let z = [unif(), unif()];
                let neg = [-z[0], -z[1]];
                assert_eq!(k.evaluate(&z), k.evaluate(&neg));
            }
        }
    }

    #[test]
    fn masses_are_unit() {
        for k in [
            Kernel::<f64>::boxcar(1, 2.5).unwrap(),
            Kernel::<f64>::gaussian(1, 0.5).unwrap(),
            Kernel::<f64>::exponential(1, 2.0).unwrap(),
            Kernel::<f64>::gaussian(2, 0.35).unwrap(),
            Kernel::<f64>::exponential(2, 3.0).unwrap(),
            Kernel::<f64>::tabulated(1, vec![0.5, 1.0, 2.0], vec![1.0, 0.5, 0.0]).unwrap(),
            Kernel::<f64>::tabulated(2, vec![0.3, 0.9], vec![2.0, 0.0]).unwrap(),
        ] {
            assert!((k.mass() - 1.0).abs() < 1e-12, "{:?}", k.family());
        }
    }

    #[test]
    fn mass_matches_quadrature() {
        // Independent check of the closed-form normalizations.
        let g = Kernel::<f64>::gaussian(1, 0.5).unwrap();
        let q = simpson(|z| g.evaluate(&[z]), -8.0, 8.0, 20_000);
        assert!((q - 1.0).abs() < 1e-10);
        let e2 = Kernel::<f64>::exponential(2, 2.0).unwrap();
        let q2 = simpson(
            |rho| 2.0 * std::f64::consts::PI * rho * e2.evaluate(&[rho, 0.0]),
            0.0,
            20.0,
            40_000,
        );
        assert!((q2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn second_moments() {
        let b = Kernel::<f64>::boxcar(1, 1.0).unwrap();
        assert!((b.second_moment_matrix()[0] - 1.0 / 3.0).abs() < 1e-14);
        let g1 = Kernel::<f64>::gaussian(1, 0.5).unwrap();
        assert!((g1.second_moment_matrix()[0] - 0.25).abs() < 1e-14);
        let g2 = Kernel::<f64>::gaussian(2, 0.5).unwrap();
        let m2 = g2.second_moment_matrix();
        assert!((m2[0] - 0.25).abs() < 1e-14);
        assert!((m2[3] - 0.25).abs() < 1e-14);
        assert_eq!(m2[1], 0.0);
        // Quadrature cross-checks where no trivial closed form exists.
        let e2 = Kernel::<f64>::exponential(2, 1.5).unwrap();
        let q = simpson(
            |rho| 2.0 * std::f64::consts::PI * rho.powi(3) * e2.evaluate(&[rho, 0.0]),
            0.0,
            40.0,
            80_000,
        );
        assert!((e2.second_moment_radial() - q).abs() < 1e-8);
        let t = Kernel::<f64>::tabulated(1, vec![0.5, 1.5], vec![1.0, 0.0]).unwrap();
        let q = simpson(|z| z * z * t.evaluate(&[z]), -1.5, 1.5, 30_000);
        assert!((t.second_moment_radial() - q).abs() < 1e-9);
    }

    #[test]
    fn tail_mass_box_closed_form() {
        let b = Kernel::<f64>::boxcar(1, 1.0).unwrap();
        assert_eq!(b.tail_mass(1.0), 0.0);
        assert!((b.tail_mass(0.5) - (0.5 + 7.0 / 24.0)).abs() < 1e-14);
    }

    #[test]
    fn tail_mass_matches_quadrature() {
        let g = Kernel::<f64>::gaussian(1, 0.5).unwrap();
        let want = simpson(|z| (1.0 + z * z) * g.evaluate(&[z]), 3.0, 3.0 + 20.0 * 0.5, 200_000) * 2.0;
        let got = g.tail_mass(3.0);
        assert!(got < 1e-7);
        assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
        let e = Kernel::<f64>::exponential(1, 2.0).unwrap();
        let want = simpson(|z| (1.0 + z * z) * e.evaluate(&[z]), 1.0, 30.0, 200_000) * 2.0;
        assert!((e.tail_mass(1.0) - want).abs() / want < 1e-9);
        let g2 = Kernel::<f64>::gaussian(2, 0.7).unwrap();
        let want = simpson(
            |rho| 2.0 * std::f64::consts::PI * rho * (1.0 + rho * rho) * g2.evaluate(&[rho, 0.0]),
            1.3,
            1.3 + 20.0 * 0.7,
            200_000,
        );
        assert!((g2.tail_mass(1.3) - want).abs() / want < 1e-6);
        let e2 = Kernel::<f64>::exponential(2, 1.2).unwrap();
        let want = simpson(
            |rho| 2.0 * std::f64::consts::PI * rho * (1.0 + rho * rho) * e2.evaluate(&[rho, 0.0]),
            0.9,
            60.0,
            400_000,
        );
        assert!((e2.tail_mass(0.9) - want).abs() / want < 1e-8);
    }

    #[test]
    fn tail_mass_decreasing_to_zero() {
        for k in [
            Kernel::<f64>::gaussian(1, 0.5).unwrap(),
            Kernel::<f64>::exponential(2, 1.0).unwrap(),
            Kernel::<f64>::boxcar(2, 1.5).unwrap(),
            Kernel::<f64>::tabulated(1, vec![0.4, 1.0, 1.8], vec![0.7, 0.4, 0.0]).unwrap(),
        ] {
            let mut prev = f64::INFINITY;
            let mut big_r = 0.125;
            for _ in 0..10 {
                let t = k.tail_mass(big_r);
                assert!(t <= prev + 1e-13);
                prev = t;
                big_r *= 2.0;
            }
            assert!(prev < 1e-8);
        }
    }

    #[test]
    fn truncation_radius_meets_tolerance() {
        for k in [
            Kernel::<f64>::gaussian(1, 0.5).unwrap(),
            Kernel::<f64>::exponential(1, 2.0).unwrap(),
            Kernel::<f64>::gaussian(2, 0.35).unwrap(),
        ] {
            let tol = 1e-12 * k.second_moment_radial();
            let big_r = k.truncation_radius(tol);
            assert!(k.tail_mass(big_r) <= tol);
            assert!(k.tail_mass(big_r * 0.95) > tol * 0.1);
        }
        assert_eq!(Kernel::<f64>::boxcar(1, 2.5).unwrap().truncation_radius(1e-12), 2.5);
    }

    #[test]
    fn periodized_box_lattice_images() {
        let k = Kernel::<f64>::boxcar(1, 0.4).unwrap();
        assert!((k.periodized(&[0.3], 2.0).unwrap() - 1.25).abs() < 1e-14);
        let k = Kernel::<f64>::boxcar(1, 0.6).unwrap();
        assert!((k.periodized(&[0.5], 2.0).unwrap() - 2.0 / 1.2).abs() < 1e-14);
        assert!(matches!(
            k.periodized(&[0.1], 0.5),
            Err(Error::InvalidKernel(_))
        ));
    }

    #[test]
    fn periodized_gaussian_vs_wide_sum() {
        let k = Kernel::<f64>::gaussian(1, 0.5).unwrap();
        // Direct summation oracle with a much wider image window.
        let mut want = 0.0;
        for m in -20i64..=20 {
            want += k.evaluate(&[m as f64]);
        }
        let got = k.periodized(&[0.0], 6.0).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn erfc_reference_points() {
        // Reference values to 10 digits.
        for (x, want) in [
            (0.0f64, 1.0f64),
            (0.5, 0.4795001222),
            (1.0, 0.1572992071),
            (2.0, 0.004677734981),
            (3.0, 2.209049699e-5),
        ] {
            let got = erfc(x);
            assert!(
                (got - want).abs() <= 2e-7 * want.max(1e-30),
                "erfc({x}) = {got}, want {want}"
            );
        }
        assert!((erfc(-1.0f64) - (2.0 - 0.1572992071)).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Kernel::<f64>::boxcar(1, 0.0).is_err());
        assert!(Kernel::<f64>::gaussian(3, 1.0).is_err());
        assert!(Kernel::<f64>::tabulated(1, vec![1.0, 0.5], vec![1.0, 0.0]).is_err());
        assert!(Kernel::<f64>::tabulated(1, vec![0.5, 1.0], vec![-1.0, 0.0]).is_err());
    }
}
