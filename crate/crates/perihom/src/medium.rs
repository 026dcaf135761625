//! The space-time periodic rate modulation `mu(xi, eta, s)`: uniformly
//! elliptic, symmetric in `(xi, eta)`, 1-periodic in every argument.
//!
//! The canonical representation is a separable sum
//! `mu = sum_m c_m lam_m(xi, s) lam_m(eta, s)` with trigonometric factors;
//! that shape is what lets the generator fold its `eta`-integral into a finite
//! number of circular convolutions.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// One wave `amp * cos(2 pi (k_space . xi + k_time * s) + phase)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Wave<T> {
    pub k_space: Vec<i64>,
    pub k_time: i64,
    pub amp: T,
    pub phase: T,
}

/// Truncated Fourier series on `T^{d+1}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrigSeries<T> {
    pub waves: Vec<Wave<T>>,
}

impl<T: Scalar> TrigSeries<T> {
    pub fn constant(value: T, dim: usize) -> Self {
        TrigSeries {
            waves: vec![Wave {
                k_space: vec![0; dim],
                k_time: 0,
                amp: value,
                phase: T::zero(),
            }],
        }
    }

    pub fn eval(&self, xi: &[T], s: T) -> T {
        let two_pi = T::PI() + T::PI();
        let mut acc = T::zero();
        for w in &self.waves {
            let mut arg = lit::<T>(w.k_time as f64) * s;
            for (ki, &x) in w.k_space.iter().zip(xi) {
                arg += lit::<T>(*ki as f64) * x;
            }
            acc += w.amp * (two_pi * arg + w.phase).cos();
        }
        acc
    }

    /// Series of `s -> value(xi, 1-s)`; integer time frequencies make this a
    /// pure sign flip of `k_time`.
    fn time_reversed(&self) -> Self {
        TrigSeries {
            waves: self
                .waves
                .iter()
                .map(|w| Wave {
                    k_space: w.k_space.clone(),
                    k_time: -w.k_time,
                    amp: w.amp,
                    phase: w.phase,
                })
                .collect(),
        }
    }
}

/// A `(coefficient, left factor, right factor)` triple of the lowered bilinear
/// form `mu = sum_m c_m left_m(xi, s) right_m(eta, s)`. Symmetric media lower
/// to symmetric sums even when individual pairs are one-sided (time-only).
#[derive(Clone, Debug)]
pub struct FactorPair<T> {
    pub coeff: T,
    pub left: TrigSeries<T>,
    pub right: TrigSeries<T>,
}

#[derive(Clone, Debug)]
pub enum MediumForm<T> {
    Constant(T),
    /// `mu(xi, eta, s) = m(s)`, `m` a series in `s` alone.
    TimeOnly(TrigSeries<T>),
    /// `mu = sum_m c_m lam_m(xi, s) lam_m(eta, s)`.
    SeparableSum(Vec<(T, TrigSeries<T>)>),
    /// Grid samples over `T^d x T^d x T^1`, multilinear interpolation,
    /// layout `values[(t * n^d + eta) * n^d + xi]`.
    Tabulated { n: usize, nt: usize, values: Vec<T> },
}

#[derive(Clone, Debug)]
pub struct Medium<T> {
    dim: usize,
    form: MediumForm<T>,
    mu_minus: T,
    mu_plus: T,
}

/// Observed ellipticity bounds and symmetry defect from `verify_conditions`.
#[derive(Clone, Copy, Debug)]
pub struct ConditionReport<T> {
    pub mu_min: T,
    pub mu_max: T,
    pub max_symmetry_defect: T,
}

impl<T: Scalar> Medium<T> {
    pub fn new(dim: usize, form: MediumForm<T>, mu_minus: T, mu_plus: T) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidMedium(format!("dimension {dim} unsupported (1 or 2)")));
        }
        if !(mu_minus > T::zero()) || !(mu_plus >= mu_minus) {
            return Err(Error::InvalidMedium(
                "declared bounds must satisfy 0 < mu_minus <= mu_plus".into(),
            ));
        }
        match &form {
            MediumForm::Constant(c) => {
                if !(*c > T::zero()) {
                    return Err(Error::InvalidMedium("constant medium must be positive".into()));
                }
            }
            MediumForm::TimeOnly(series) => {
                if series.waves.iter().any(|w| w.k_space.iter().any(|&k| k != 0)) {
                    return Err(Error::InvalidMedium(
                        "time-only medium must not carry spatial frequencies".into(),
                    ));
                }
            }
            MediumForm::SeparableSum(terms) => {
                for (_, series) in terms {
                    if series.waves.iter().any(|w| w.k_space.len() != dim) {
                        return Err(Error::InvalidMedium(
                            "separable factor wave vector length must equal the dimension".into(),
                        ));
                    }
                }
            }
            MediumForm::Tabulated { n, nt, values } => {
                let nsp = n.pow(dim as u32);
                if *n < 2 || *nt < 2 || values.len() != nsp * nsp * nt {
                    return Err(Error::InvalidMedium(format!(
                        "tabulated medium needs n^d * n^d * nt = {} values, got {}",
                        nsp * nsp * nt,
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidMedium("tabulated medium has non-finite entries".into()));
                }
            }
        }
        let medium = Medium {
            dim,
            form,
            mu_minus,
            mu_plus,
        };
        medium.certify_negative_terms()?;
        Ok(medium)
    }

    pub fn constant(dim: usize, c: T) -> Result<Self> {
        Self::new(dim, MediumForm::Constant(c), c, c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn form(&self) -> &MediumForm<T> {
        &self.form
    }

    pub fn bounds(&self) -> (T, T) {
        (self.mu_minus, self.mu_plus)
    }

    /// Builds the two separable-sum terms of the product modulation
    /// `c * g(xi) g(eta) * (1 + a cos(2 pi s + psi))`,
    /// `g(xi) = cos(2 pi k . xi + phi)`, |a| <= 1.
    ///
    /// `1 + a cos(th) = |p + q e^{i th}|^2` whenever `p^2 + q^2 = 1` and
    /// `2 p q = a`, so the time factor splits into the two real factors
    /// `(p + q cos th)` and `q sin th`, each multiplying `g`.
    pub fn product_term(
        coeff: T,
        k: Vec<i64>,
        space_phase: T,
        time_amp: T,
        time_phase: T,
    ) -> Vec<(T, TrigSeries<T>)> {
        assert!(time_amp.abs() <= T::one(), "time amplitude must satisfy |a| <= 1");
        let half = lit::<T>(0.5);
        let quarter_pi_arg = time_amp.asin() / lit::<T>(2.0);
        let p = quarter_pi_arg.cos();
        let q = quarter_pi_arg.sin();
        let mut first = TrigSeries {
            waves: vec![Wave {
                k_space: k.clone(),
                k_time: 0,
                amp: p,
                phase: space_phase,
            }],
        };
        if q != T::zero() {
            first.waves.push(Wave {
                k_space: k.clone(),
                k_time: 1,
                amp: q * half,
                phase: space_phase + time_phase,
            });
            first.waves.push(Wave {
                k_space: k.clone(),
                k_time: -1,
                amp: q * half,
                phase: space_phase - time_phase,
            });
        }
        let mut out = vec![(coeff, first)];
        if q != T::zero() {
            let half_pi = T::FRAC_PI_2();
            let second = TrigSeries {
                waves: vec![
                    Wave {
                        k_space: k.clone(),
                        k_time: 1,
                        amp: q * half,
                        phase: space_phase + time_phase - half_pi,
                    },
                    Wave {
                        k_space: k,
                        k_time: -1,
                        amp: -q * half,
                        phase: space_phase - time_phase - half_pi,
                    },
                ],
            };
            out.push((coeff, second));
        }
        out
    }

    /// `mu(xi, eta, s)`; arguments are reduced modulo 1 first.
    pub fn evaluate_mu(&self, xi: &[T], eta: &[T], s: T) -> T {
        assert_eq!(xi.len(), self.dim);
        assert_eq!(eta.len(), self.dim);
        let mut xr = [T::zero(); 2];
        let mut er = [T::zero(); 2];
        for i in 0..self.dim {
            xr[i] = fract1(xi[i]);
            er[i] = fract1(eta[i]);
        }
        let sr = fract1(s);
        match &self.form {
            MediumForm::Constant(c) => *c,
            MediumForm::TimeOnly(m) => m.eval(&[], sr),
            MediumForm::SeparableSum(terms) => {
                let mut acc = T::zero();
                for (c, lam) in terms {
                    acc += *c * lam.eval(&xr[..self.dim], sr) * lam.eval(&er[..self.dim], sr);
                }
                acc
            }
            MediumForm::Tabulated { n, nt, values } => {
                self.interp_tabulated(*n, *nt, values, &xr[..self.dim], &er[..self.dim], sr)
            }
        }
    }

    fn interp_tabulated(&self, n: usize, nt: usize, values: &[T], xi: &[T], eta: &[T], s: T) -> T {
        let d = self.dim;
        let naxes = 2 * d + 1;
        // Per-axis base index and fraction; axes ordered (xi..., eta..., s).
        let mut base = [0usize; 5];
        let mut frac = [T::zero(); 5];
        let mut sizes = [0usize; 5];
        for i in 0..d {
            let u = xi[i] * lit::<T>(n as f64);
            base[i] = u.floor().to_usize().unwrap() % n;
            frac[i] = u - u.floor();
            sizes[i] = n;
        }
        for i in 0..d {
            let u = eta[i] * lit::<T>(n as f64);
            base[d + i] = u.floor().to_usize().unwrap() % n;
            frac[d + i] = u - u.floor();
            sizes[d + i] = n;
        }
        let u = s * lit::<T>(nt as f64);
        base[2 * d] = u.floor().to_usize().unwrap() % nt;
        frac[2 * d] = u - u.floor();
        sizes[2 * d] = nt;

        let nsp = n.pow(d as u32);
        let mut acc = T::zero();
        for corner in 0..(1usize << naxes) {
            let mut weight = T::one();
            let mut idx = [0usize; 5];
            for axis in 0..naxes {
                if corner >> axis & 1 == 1 {
                    weight = weight * frac[axis];
                    idx[axis] = (base[axis] + 1) % sizes[axis];
                } else {
                    weight = weight * (T::one() - frac[axis]);
                    idx[axis] = base[axis];
                }
            }
            let xi_idx = if d == 1 { idx[0] } else { idx[0] + n * idx[1] };
            let eta_idx = if d == 1 { idx[d] } else { idx[d] + n * idx[d + 1] };
            let flat = (idx[2 * d] * nsp + eta_idx) * nsp + xi_idx;
            acc += weight * values[flat];
        }
        acc
    }

    /// Lowered bilinear factor pairs, `None` for tabulated media (which take
    /// the dense quadrature path in the generator).
    pub fn factor_pairs(&self) -> Option<Vec<FactorPair<T>>> {
        match &self.form {
            MediumForm::Constant(c) => Some(vec![FactorPair {
                coeff: *c,
                left: TrigSeries::constant(T::one(), self.dim),
                right: TrigSeries::constant(T::one(), self.dim),
            }]),
            MediumForm::TimeOnly(m) => Some(vec![FactorPair {
                coeff: T::one(),
                left: TrigSeries {
                    waves: m
                        .waves
                        .iter()
                        .map(|w| Wave {
                            k_space: vec![0; self.dim],
                            k_time: w.k_time,
                            amp: w.amp,
                            phase: w.phase,
                        })
                        .collect(),
                },
                right: TrigSeries::constant(T::one(), self.dim),
            }]),
            MediumForm::SeparableSum(terms) => Some(
                terms
                    .iter()
                    .map(|(c, lam)| FactorPair {
                        coeff: *c,
                        left: lam.clone(),
                        right: lam.clone(),
                    })
                    .collect(),
            ),
            MediumForm::Tabulated { .. } => None,
        }
    }

    /// The medium `mu(xi, eta, 1-s)`, used by the adjoint-symmetry checks.
    pub fn time_reversed(&self) -> Self {
        let form = match &self.form {
            MediumForm::Constant(c) => MediumForm::Constant(*c),
            MediumForm::TimeOnly(m) => MediumForm::TimeOnly(m.time_reversed()),
            MediumForm::SeparableSum(terms) => MediumForm::SeparableSum(
                terms.iter().map(|(c, lam)| (*c, lam.time_reversed())).collect(),
            ),
            MediumForm::Tabulated { n, nt, values } => {
                let nsp = n.pow(self.dim as u32);
                let mut rev = values.clone();
                for t in 0..*nt {
                    let src = (nt - t) % nt;
                    rev[t * nsp * nsp..(t + 1) * nsp * nsp]
                        .copy_from_slice(&values[src * nsp * nsp..(src + 1) * nsp * nsp]);
                }
                MediumForm::Tabulated {
                    n: *n,
                    nt: *nt,
                    values: rev,
                }
            }
        };
        Medium {
            dim: self.dim,
            form,
            mu_minus: self.mu_minus,
            mu_plus: self.mu_plus,
        }
    }

    /// Exhaustive sample-grid audit of the ellipticity bounds (C3) and the
    /// exchange symmetry (C5).
    pub fn verify_conditions(&self, sample_density: usize) -> Result<ConditionReport<T>> {
        if sample_density < 8 {
            return Err(Error::InvalidConfig("sample density must be at least 8".into()));
        }
        let d = self.dim;
        let space_points: Vec<Vec<T>> = grid_points(d, sample_density);
        let mut mu_min = T::infinity();
        let mut mu_max = T::neg_infinity();
        let mut max_sym = T::zero();
        let mut worst: Option<(Vec<T>, Vec<T>, T, T)> = None;
        for ti in 0..sample_density {
            let s = lit::<T>(ti as f64 / sample_density as f64);
            for xi in &space_points {
                for eta in &space_points {
                    let v = self.evaluate_mu(xi, eta, s);
                    let w = self.evaluate_mu(eta, xi, s);
                    max_sym = max_sym.max((v - w).abs());
                    if v < mu_min {
                        mu_min = v;
                        worst = Some((xi.clone(), eta.clone(), s, v));
                    }
                    mu_max = mu_max.max(v);
                }
            }
        }
        let slack = lit::<T>(1e-12);
        if mu_min < self.mu_minus - slack || mu_max > self.mu_plus + slack || mu_min <= T::zero() {
            let (xi, eta, s, v) = worst.unwrap();
            return Err(Error::ConditionViolation(format!(
                "C3: mu range [{mu_min:e}, {mu_max:e}] violates declared [{:e}, {:e}] (e.g. mu({xi:?}, {eta:?}, {s}) = {v:e})",
                self.mu_minus, self.mu_plus
            )));
        }
        if max_sym > slack {
            return Err(Error::ConditionViolation(format!(
                "C5: symmetry defect {max_sym:e} exceeds 1e-12"
            )));
        }
        Ok(ConditionReport {
            mu_min,
            mu_max,
            max_symmetry_defect: max_sym,
        })
    }

    /// Separable sums with negative coefficients are only accepted when
    /// positivity holds exhaustively at density 64 per axis.
    fn certify_negative_terms(&self) -> Result<()> {
        let terms = match &self.form {
            MediumForm::SeparableSum(terms) => terms,
            _ => return Ok(()),
        };
        if terms.iter().all(|(c, _)| *c >= T::zero()) {
            return Ok(());
        }
        let density = 64usize;
        let points = grid_points(self.dim, density);
        for ti in 0..density {
            let s = lit::<T>(ti as f64 / density as f64);
            // Factor value columns at this time slice.
            let cols: Vec<Vec<T>> = points
                .iter()
                .map(|xi| terms.iter().map(|(_, lam)| lam.eval(xi, s)).collect())
                .collect();
            for a in &cols {
                for b in &cols {
                    let mut v = T::zero();
                    for (m, (c, _)) in terms.iter().enumerate() {
                        v += *c * a[m] * b[m];
                    }
                    if v <= T::zero() {
                        return Err(Error::InvalidMedium(format!(
                            "separable sum with negative coefficients is not positive (mu = {v:e} found at density {density})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn fract1<T: Scalar>(x: T) -> T {
    let f = x - x.floor();
    if f >= T::one() {
        T::zero()
    } else {
        f
    }
}

fn grid_points<T: Scalar>(dim: usize, density: usize) -> Vec<Vec<T>> {
    let mut pts = Vec::with_capacity(density.pow(dim as u32));
    match dim {
        1 => {
            for i in 0..density {
                pts.push(vec![lit::<T>(i as f64 / density as f64)]);
            }
        }
        _ => {
            for j in 0..density {
                for i in 0..density {
                    pts.push(vec![
                        lit::<T>(i as f64 / density as f64),
                        lit::<T>(j as f64 / density as f64),
                    ]);
                }
            }
        }
    }
    pts
}

/// The running example medium
/// `scale * (1 + amp sin(2 pi xi) sin(2 pi eta) (1 + time_amp cos(2 pi s)))`
/// in d = 1, with its exact bounds.
pub fn modulated_sine_medium<T: Scalar>(scale: T, amp: T, time_amp: T) -> Result<Medium<T>> {
    let neg_half_pi = -T::FRAC_PI_2();
    let mut terms = vec![(scale, TrigSeries::constant(T::one(), 1))];
    terms.extend(Medium::product_term(
        scale * amp,
        vec![1],
        neg_half_pi,
        time_amp,
        T::zero(),
    ));
    let spread = amp * (T::one() + time_amp);
    Medium::new(
        1,
        MediumForm::SeparableSum(terms),
        scale * (T::one() - spread),
        scale * (T::one() + spread),
    )
}
