//! FFT plumbing shared by the torus and box operators: cached complex plans,
//! multi-axis transforms on flat row-major arrays (axis 0 fastest), circular
//! convolution against a fixed kernel, and trigonometric interpolation.

use crate::scalar::{lit, Scalar};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Plan cache. Plans are `Arc<dyn Fft>` and shareable across threads; only the
/// brief planner lookup takes the lock.
pub struct FftCache<T: Scalar> {
    inner: Mutex<CacheInner<T>>,
}

struct CacheInner<T: Scalar> {
    planner: FftPlanner<T>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<T>>>,
}

impl<T: Scalar> Default for FftCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> FftCache<T> {
    pub fn new() -> Self {
        FftCache {
            inner: Mutex::new(CacheInner {
                planner: FftPlanner::new(),
                plans: HashMap::new(),
            }),
        }
    }

    pub fn plan(&self, n: usize, forward: bool) -> Arc<dyn Fft<T>> {
        let mut inner = self.inner.lock().expect("fft planner lock");
        if let Some(plan) = inner.plans.get(&(n, forward)) {
            return plan.clone();
        }
        let plan = if forward {
            inner.planner.plan_fft_forward(n)
        } else {
            inner.planner.plan_fft_inverse(n)
        };
        inner.plans.insert((n, forward), plan.clone());
        plan
    }
}

/// In-place transform along every axis of a flat array with extents `dims`
/// (axis 0 contiguous). The inverse direction applies the 1/len normalization
/// so that forward-then-inverse is the identity.
pub fn fft_nd<T: Scalar>(cache: &FftCache<T>, data: &mut [Complex<T>], dims: &[usize], forward: bool) {
    let total: usize = dims.iter().product();
    assert_eq!(data.len(), total);
    let mut stride = 1usize;
    for &n in dims {
        let plan = cache.plan(n, forward);
        if stride == 1 {
            for chunk in data.chunks_exact_mut(n) {
                plan.process(chunk);
            }
        } else {
            let mut scratch = vec![Complex::new(T::zero(), T::zero()); n];
            let lines = total / n;
            for line in 0..lines {
                // Decompose `line` into (inner offset within a stride block, block index).
                let inner = line % stride;
                let outer = line / stride;
                let base = outer * stride * n + inner;
                for (j, s) in scratch.iter_mut().enumerate() {
                    *s = data[base + j * stride];
                }
                plan.process(&mut scratch);
                for (j, s) in scratch.iter().enumerate() {
                    data[base + j * stride] = *s;
                }
            }
        }
        stride *= n;
    }
    if !forward {
        let scale = T::one() / lit::<T>(total as f64);
        for v in data.iter_mut() {
            *v = Complex::new(v.re * scale, v.im * scale);
        }
    }
}

/// Circular convolution against a fixed real kernel on a periodic grid:
/// `(w ⊛ f)(x) = Σ_z w(z) f(x − z)`, indices wrapping per axis.
pub struct Conv<T: Scalar> {
    dims: Vec<usize>,
    hat: Vec<Complex<T>>,
    cache: Arc<FftCache<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(cache: Arc<FftCache<T>>, weights: &[T], dims: &[usize]) -> Self {
        let mut hat: Vec<Complex<T>> = weights.iter().map(|&w| Complex::new(w, T::zero())).collect();
        fft_nd(&cache, &mut hat, dims, true);
        Conv {
            dims: dims.to_vec(),
            hat,
            cache,
        }
    }

    pub fn apply(&self, f: &[T]) -> Vec<T> {
        assert_eq!(f.len(), self.hat.len());
        let mut buf: Vec<Complex<T>> = f.iter().map(|&v| Complex::new(v, T::zero())).collect();
        fft_nd(&self.cache, &mut buf, &self.dims, true);
        for (b, h) in buf.iter_mut().zip(&self.hat) {
            *b *= *h;
        }
        fft_nd(&self.cache, &mut buf, &self.dims, false);
        buf.into_iter().map(|c| c.re).collect()
    }
}

/// Zero-pads a length-`n` spectrum to length `m > n` so the inverse transform
/// is the trigonometric interpolant of the original samples. For even `n` the
/// Nyquist bin is shared between `+n/2` and `−n/2`; splitting it in half keeps
/// the interpolant real-symmetric and exact at the original nodes.
pub fn upsample_spectrum<T: Scalar>(spec: &[Complex<T>], m: usize) -> Vec<Complex<T>> {
    let n = spec.len();
    assert!(m >= n);
    let mut out = vec![Complex::new(T::zero(), T::zero()); m];
    let scale = lit::<T>(m as f64 / n as f64);
    if n % 2 == 0 {
        let half = n / 2;
        for k in 0..half {
            out[k] = spec[k] * scale;
        }
        let shared = spec[half] * scale * lit::<T>(0.5);
        if m == n {
            out[half] = spec[half] * scale;
        } else {
            out[half] = shared;
            out[m - half] = out[m - half] + shared;
        }
        for k in half + 1..n {
            out[m - n + k] = out[m - n + k] + spec[k] * scale;
        }
    } else {
        let half = (n - 1) / 2;
        for k in 0..=half {
            out[k] = spec[k] * scale;
        }
        for k in half + 1..n {
            out[m - n + k] = spec[k] * scale;
        }
    }
    out
}

/// Trigonometric interpolant of real 1-periodic samples `v[j] = v(j/n)`,
/// evaluated at arbitrary fractions. Evaluation is a direct mode sum; the even
/// Nyquist mode enters as a pure cosine (the real-symmetric convention).
pub struct TrigSeries1<T: Scalar> {
    spec: Vec<Complex<T>>,
}

impl<T: Scalar> TrigSeries1<T> {
    pub fn from_samples(cache: &FftCache<T>, values: &[T]) -> Self {
        let mut spec: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        fft_nd(cache, &mut spec, &[values.len()], true);
        TrigSeries1 { spec }
    }

    pub fn eval(&self, s: T) -> T {
        let n = self.spec.len();
        let half = n / 2;
        let two_pi = T::PI() + T::PI();
        let mut acc = self.spec[0].re;
        let last_paired = if n % 2 == 0 { half - 1 } else { half };
        for k in 1..=last_paired {
            let ang = two_pi * lit::<T>(k as f64) * s;
            let (sin, cos) = ang.sin_cos();
            acc += (self.spec[k].re * cos - self.spec[k].im * sin) * lit::<T>(2.0);
        }
        if n % 2 == 0 {
            let ang = two_pi * lit::<T>(half as f64) * s;
            acc += self.spec[half].re * ang.cos();
        }
        acc / lit::<T>(n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache() -> Arc<FftCache<f64>> {
        Arc::new(FftCache::new())
    }

    #[test]
    fn roundtrip_2d() {
        let dims = [8usize, 6];
        let mut data: Vec<Complex<f64>> = (0..48)
            .map(|i| Complex::new((i as f64).cos(), (i as f64 * 0.3).sin()))
            .collect();
        let orig = data.clone();
        let c = cache();
        fft_nd(&c, &mut data, &dims, true);
        fft_nd(&c, &mut data, &dims, false);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dims = [12usize];
        let w: Vec<f64> = (0..12).map(|i| ((i * i) as f64 * 0.1).sin()).collect();
        let f: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).cos()).collect();
        let conv = Conv::new(cache(), &w, &dims);
        let got = conv.apply(&f);
        for x in 0..12 {
            let mut want = 0.0;
            for z in 0..12 {
                want += w[z] * f[(x + 12 - z) % 12];
            }
            assert!((got[x] - want).abs() < 1e-12, "x={x}: {} vs {want}", got[x]);
        }
    }

    #[test]
    fn upsample_exact_at_original_nodes() {
        // Includes an active Nyquist mode so the bin-splitting convention is exercised.
        let n = 8;
        let samples: Vec<f64> = (0..n)
            .map(|j| {
                let s = j as f64 / n as f64;
                1.0 + (2.0 * std::f64::consts::PI * s).sin() + (2.0 * std::f64::consts::PI * 4.0 * s).cos()
            })
            .collect();
        let c = cache();
        let mut spec: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_nd(&c, &mut spec, &[n], true);
        let m = 24;
        let mut up = upsample_spectrum(&spec, m);
        fft_nd(&c, &mut up, &[m], false);
        for j in 0..n {
            let at = up[j * m / n].re;
            assert!((at - samples[j]).abs() < 1e-12, "node {j}: {at} vs {}", samples[j]);
        }
    }

    #[test]
    fn trig_eval_matches_upsample() {
        let n = 10;
        let samples: Vec<f64> = (0..n).map(|j| ((j * j) as f64 * 0.211).sin()).collect();
        let c = cache();
        let series = TrigSeries1::from_samples(&c, &samples);
        for j in 0..n {
            let v = series.eval(j as f64 / n as f64);
            assert!((v - samples[j]).abs() < 1e-12);
        }
        let mut spec: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_nd(&c, &mut spec, &[n], true);
        let m = 30;
        let mut up = upsample_spectrum(&spec, m);
        fft_nd(&c, &mut up, &[m], false);
        for j in 0..m {
            let v = series.eval(j as f64 / m as f64);
            assert!((v - up[j].re).abs() < 1e-12);
        }
    }
}
