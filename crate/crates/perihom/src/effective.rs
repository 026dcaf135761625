//! Homogenized coefficients: the drift fields `q_j`, the corrected flux
//! `F_ij`, their space-time average `a_hat`, and the quadratic-form identity
//! `zeta . a_hat zeta = V(chi_zeta)` used to cross-check the assembly.
//!
//! Every quantity has two routes: circular convolutions per lowered medium
//! term (used whenever the medium factorizes) and a direct quadrature over
//! all `(xi, eta)` node pairs. The dense route is slow but shares no code
//! with the transform route, so their agreement is a real check.

use rayon::prelude::*;

use crate::cell::{CellSolver, Corrector};
use crate::error::{Error, Result};
use crate::fft::Conv;
use crate::scalar::{lit, pairwise_sum, pairwise_sum_by, Scalar};
use crate::torus::{Generator, SpaceTimeField};

/// Space-time averaged flux and its spectral data.
#[derive(Clone, Debug)]
pub struct EffectiveMatrix<T> {
    /// Raw average of the flux, `d x d` row-major; not symmetric in general.
    pub a_hat: Vec<T>,
    /// Symmetric part; only it enters the limit equation.
    pub a_eff: Vec<T>,
    pub min_eig: T,
    pub dim: usize,
    /// Spatial and temporal quadrature sizes of the run that produced the
    /// matrix; zero when the matrix was assembled from raw entries.
    pub grid_n: usize,
    pub grid_nt: usize,
    /// Radius at which the kernel was truncated during periodization.
    pub truncation_radius: T,
}

impl<T: Scalar> EffectiveMatrix<T> {
    pub fn from_hat(dim: usize, a_hat: Vec<T>) -> Result<Self> {
        assert_eq!(a_hat.len(), dim * dim);
        let half = lit::<T>(0.5);
        let mut a_eff = a_hat.clone();
        for i in 0..dim {
            for j in 0..i {
                let sym = half * (a_hat[i * dim + j] + a_hat[j * dim + i]);
                a_eff[i * dim + j] = sym;
                a_eff[j * dim + i] = sym;
            }
        }
        let min_eig = match dim {
            1 => a_eff[0],
            _ => {
                let tr_half = half * (a_eff[0] + a_eff[3]);
                let det_part = half * (a_eff[0] - a_eff[3]);
                tr_half - (det_part * det_part + a_eff[1] * a_eff[1]).sqrt()
            }
        };
        if !(min_eig > T::zero()) {
            return Err(Error::PositivityViolation {
                min_eig: min_eig.to_f64().unwrap(),
            });
        }
        Ok(EffectiveMatrix {
            a_hat,
            a_eff,
            min_eig,
            dim,
            grid_n: 0,
            grid_nt: 0,
            truncation_radius: T::zero(),
        })
    }
}

fn conv_dims(gen: &Generator<impl Scalar>) -> Vec<usize> {
    vec![gen.grid().n; gen.grid().dim]
}

/// `h^d`-weighted convolution operators for a family of moment kernels.
fn moment_convs<T: Scalar>(gen: &Generator<T>, kernels: &[Vec<T>]) -> Vec<Conv<T>> {
    let hd = gen.grid().cell_weight::<T>();
    let dims = conv_dims(gen);
    kernels
        .iter()
        .map(|k| {
            let weighted: Vec<T> = k.iter().map(|&v| v * hd).collect();
            Conv::new(gen.fft_cache(), &weighted, &dims)
        })
        .collect()
}

/// `out[x] = h^d sum_e m[x - e] mu(x, e, s) factor[e]` by direct quadrature;
/// `factor` defaults to one. Same displacement convention as the generator.
fn dense_moment_slice<T: Scalar>(
    gen: &Generator<T>,
    moment: &[T],
    factor: Option<&[T]>,
    s: T,
    out: &mut [T],
) {
    let grid = gen.grid();
    let len = grid.space_len();
    let n = grid.n;
    let d = grid.dim;
    let hd = grid.cell_weight::<T>();
    let medium = gen.medium();
    let mut coords = vec![T::zero(); len * d];
    for idx in 0..len {
        coords[idx * d..(idx + 1) * d].copy_from_slice(&grid.coords::<T>(idx));
    }
    out.par_iter_mut().enumerate().for_each(|(x, o)| {
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
            let w = moment[disp];
            if w == T::zero() {
                T::zero()
            } else {
                let f = factor.map_or(T::one(), |f| f[e]);
                w * medium.evaluate_mu(xi, &coords[e * d..(e + 1) * d], s) * f
            }
        });
        *o = sum * hd;
    });
}

/// The symmetry of the medium forces every spatial slice of `q_j` to have
/// zero mean; a defect here means the medium (or a kernel moment) is off.
fn check_drift_means<T: Scalar>(q: &[SpaceTimeField<T>]) -> Result<()> {
    let scale = q
        .iter()
        .map(|f| f.sup_norm())
        .fold(T::one(), |a, b| a.max(b));
    // Floor keeps the f64 gate at 1e-10; the epsilon term makes the same
    // check meaningful in f32, where roundoff alone is ~1e-7.
    let tol = scale * lit::<T>(1e-10).max(lit::<T>(1e3) * T::epsilon());
    for (j, field) in q.iter().enumerate() {
        for t in 0..field.grid.nt {
            let slice = field.slice(t);
            let mean = pairwise_sum(slice) / lit::<T>(slice.len() as f64);
            if mean.abs() > tol {
                return Err(Error::ConditionViolation(format!(
                    "drift component {j} has spatial mean {:e} at time slice {t}; \
                     the medium is not symmetric on this grid",
                    mean.to_f64().unwrap()
                )));
            }
        }
    }
    Ok(())
}

/// Local drift against each coordinate direction:
/// `q_j(xi, s) = integral a(z) z_j mu(xi, xi - z, s) dz`.
pub fn rhs_q<T: Scalar>(gen: &Generator<T>) -> Result<Vec<SpaceTimeField<T>>> {
    let grid = gen.grid();
    let d = grid.dim;
    let len = grid.space_len();
    let convs = moment_convs(gen, &gen.kernel_set().p);
    let mut out: Vec<SpaceTimeField<T>> = (0..d).map(|_| SpaceTimeField::zeros(grid)).collect();
    for t in 0..grid.nt {
        let s = grid.time_node::<T>(t);
        match gen.sampled_pairs(s) {
            Some(pairs) => {
                for (j, conv) in convs.iter().enumerate() {
                    let slice = out[j].slice_mut(t);
                    for sp in &pairs {
                        let cr = conv.apply(&sp.right);
                        for i in 0..len {
                            slice[i] += sp.coeff * sp.left[i] * cr[i];
                        }
                    }
                }
            }
            None => {
                for j in 0..d {
                    dense_moment_slice(gen, &gen.kernel_set().p[j], None, s, out[j].slice_mut(t));
                }
            }
        }
    }
    check_drift_means(&out)?;
    Ok(out)
}

/// `rhs_q` by pair quadrature regardless of the medium form; reference route.
pub fn rhs_q_dense<T: Scalar>(gen: &Generator<T>) -> Result<Vec<SpaceTimeField<T>>> {
    let grid = gen.grid();
    let d = grid.dim;
    let mut out: Vec<SpaceTimeField<T>> = (0..d).map(|_| SpaceTimeField::zeros(grid)).collect();
    for t in 0..grid.nt {
        let s = grid.time_node::<T>(t);
        for j in 0..d {
            dense_moment_slice(gen, &gen.kernel_set().p[j], None, s, out[j].slice_mut(t));
        }
    }
    check_drift_means(&out)?;
    Ok(out)
}

/// Flux built from the first corrector, `d x d` fields row-major:
/// `F_ij(xi, s) = integral a(z) mu(xi, xi-z, s) [z_i z_j / 2 + z_i chi_j(xi-z, s)] dz`.
pub fn flux_components<T: Scalar>(
    gen: &Generator<T>,
    chi: &Corrector<T>,
) -> Result<Vec<SpaceTimeField<T>>> {
    let grid = gen.grid();
    let d = grid.dim;
    let len = grid.space_len();
    assert_eq!(chi.components.len(), d);
    let half = lit::<T>(0.5);
    let p_convs = moment_convs(gen, &gen.kernel_set().p);
    let pp_convs = moment_convs(gen, &gen.kernel_set().pp);
    let mut out: Vec<SpaceTimeField<T>> =
        (0..d * d).map(|_| SpaceTimeField::zeros(grid)).collect();
    let mut tmp = vec![T::zero(); len];
    for t in 0..grid.nt {
        let s = grid.time_node::<T>(t);
        match gen.sampled_pairs(s) {
            Some(pairs) => {
                for i in 0..d {
                    for j in 0..d {
                        let slice = out[i * d + j].slice_mut(t);
                        let chi_j = chi.components[j].slice(t);
                        for sp in &pairs {
                            let c2 = pp_convs[i * d + j].apply(&sp.right);
                            for (x, v) in tmp.iter_mut().enumerate() {
                                *v = sp.right[x] * chi_j[x];
                            }
                            let c1 = p_convs[i].apply(&tmp);
                            for x in 0..len {
                                slice[x] += sp.coeff * sp.left[x] * (half * c2[x] + c1[x]);
                            }
                        }
                    }
                }
            }
            None => {
                dense_flux_slices(gen, chi, t, s, &mut out);
            }
        }
    }
    Ok(out)
}

fn dense_flux_slices<T: Scalar>(
    gen: &Generator<T>,
    chi: &Corrector<T>,
    t: usize,
    s: T,
    out: &mut [SpaceTimeField<T>],
) {
    let d = gen.grid().dim;
    let len = gen.grid().space_len();
    let half = lit::<T>(0.5);
    let mut part = vec![T::zero(); len];
    for i in 0..d {
        for j in 0..d {
            let ks = gen.kernel_set();
            dense_moment_slice(gen, &ks.pp[i * d + j], None, s, &mut part);
            let slice = out[i * d + j].slice_mut(t);
            for x in 0..len {
                slice[x] = half * part[x];
            }
            dense_moment_slice(gen, &ks.p[i], Some(chi.components[j].slice(t)), s, &mut part);
            for x in 0..len {
                slice[x] += part[x];
            }
        }
    }
}

/// `flux_components` by pair quadrature regardless of the medium form.
pub fn flux_components_dense<T: Scalar>(
    gen: &Generator<T>,
    chi: &Corrector<T>,
) -> Result<Vec<SpaceTimeField<T>>> {
    let grid = gen.grid();
    let d = grid.dim;
    let mut out: Vec<SpaceTimeField<T>> =
        (0..d * d).map(|_| SpaceTimeField::zeros(grid)).collect();
    for t in 0..grid.nt {
        let s = grid.time_node::<T>(t);
        dense_flux_slices(gen, chi, t, s, &mut out);
    }
    Ok(out)
}

/// Solves the first corrector and averages the flux. Returns the corrector
/// alongside; the second corrector and the quadratic-form check reuse it.
pub fn effective_matrix<T: Scalar>(
    solver: &CellSolver<'_, T>,
) -> Result<(EffectiveMatrix<T>, Corrector<T>)> {
    let chi = solver.solve_corrector()?;
    let gen = solver.generator();
    let f = flux_components(gen, &chi)?;
    let a_hat: Vec<T> = f.iter().map(|fij| fij.mean()).collect();
    let mut matrix = EffectiveMatrix::from_hat(gen.grid().dim, a_hat)?;
    matrix.grid_n = gen.grid().n;
    matrix.grid_nt = gen.grid().nt;
    matrix.truncation_radius = gen.kernel_set().radius;
    Ok((matrix, chi))
}

/// Space-time average of the squared corrected difference quotient,
///
/// `V = <<(1/2) a(z) mu(xi, xi-z, s) [z . zeta + chi_zeta(xi-z) - chi_zeta(xi)]^2>>`,
///
/// expanded into six convolution terms per lowered medium factor. For the
/// periodic corrector the time-derivative cross term averages out, so `V`
/// must match `zeta . a_hat zeta`; checking that equality exercises the
/// flux assembly, the corrector, and the moment kernels at once.
pub fn variational_value<T: Scalar>(
    gen: &Generator<T>,
    chi: &Corrector<T>,
    zeta: &[T],
) -> Result<T> {
    let grid = gen.grid();
    let d = grid.dim;
    let len = grid.space_len();
    assert_eq!(zeta.len(), d);
    if !gen.is_separable() {
        return Err(Error::InvalidConfig(
            "quadratic-form evaluation needs a factorized medium".into(),
        ));
    }
    let ks = gen.kernel_set();
    let mut pz = vec![T::zero(); len];
    let mut ppz = vec![T::zero(); len];
    for i in 0..d {
        for idx in 0..len {
            pz[idx] += zeta[i] * ks.p[i][idx];
        }
        for j in 0..d {
            for idx in 0..len {
                ppz[idx] += zeta[i] * zeta[j] * ks.pp[i * d + j][idx];
            }
        }
    }
    let convs = moment_convs(gen, &[pz, ppz]);
    let (conv_pz, conv_ppz) = (&convs[0], &convs[1]);
    let half = lit::<T>(0.5);
    let mut total = T::zero();
    let mut cz = vec![T::zero(); len];
    let mut slice_acc = vec![T::zero(); len];
    for t in 0..grid.nt {
        let s = grid.time_node::<T>(t);
        let pairs = gen.sampled_pairs(s).unwrap();
        cz.fill(T::zero());
        for j in 0..d {
            let sl = chi.components[j].slice(t);
            for i in 0..len {
                cz[i] += zeta[j] * sl[i];
            }
        }
        slice_acc.fill(T::zero());
        for sp in &pairs {
            let rc: Vec<T> = (0..len).map(|i| sp.right[i] * cz[i]).collect();
            let rc2: Vec<T> = (0..len).map(|i| rc[i] * cz[i]).collect();
            let g1 = conv_ppz.apply(&sp.right);
            let g2 = conv_pz.apply(&rc);
            let g3 = conv_pz.apply(&sp.right);
            let g4 = gen.conv_a(&rc2);
            let g5 = gen.conv_a(&rc);
            let g6 = gen.conv_a(&sp.right);
            for i in 0..len {
                slice_acc[i] += sp.coeff
                    * sp.left[i]
                    * (half * g1[i] + g2[i] - g3[i] * cz[i] + half * g4[i] - cz[i] * g5[i]
                        + half * cz[i] * cz[i] * g6[i]);
            }
        }
        total += pairwise_sum(&slice_acc);
    }
    Ok(total / lit::<T>((len * grid.nt) as f64))
}
