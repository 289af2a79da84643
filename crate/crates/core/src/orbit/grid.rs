//! Uniform time grid, sampled correction paths (J, psi, w) and the
//! composite-Simpson cumulative quadrature they are integrated with.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use std::sync::Arc;

/// Uniform grid 0 = t_0 < .. < t_N = T with N even.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub samples: usize,
}

impl TimeGrid {
    /// N = max(floor_min, ceil(points_per_period * T * max_freq / 2 pi)),
    /// rounded up to even.
    pub fn for_period(t_final: f64, max_freq: f64, points_per_period: f64, floor_min: usize) -> Self {
        let raw = (points_per_period * t_final * max_freq / (2.0 * std::f64::consts::PI)).ceil() as usize;
        let mut samples = raw.max(floor_min);
        if samples % 2 == 1 {
            samples += 1;
        }
        TimeGrid { t_final, samples }
    }

    pub fn new(t_final: f64, samples: usize) -> Self {
        let samples = if samples % 2 == 1 { samples + 1 } else { samples };
        TimeGrid { t_final, samples }
    }

    pub fn h(&self) -> f64 {
        self.t_final / self.samples as f64
    }

    pub fn len(&self) -> usize {
        self.samples + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_final * k as f64 / self.samples as f64
    }

    pub fn refine(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            t_final: self.t_final,
            samples: self.samples * factor,
        }
    }
}

/// Cumulative integral of uniformly sampled values, fourth order: Simpson
/// panels at even indices, a quadratic half-panel at odd indices.
pub fn cumulative_simpson(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    let mut k = 0;
    while k + 2 < n + 1 {
        if k + 2 <= n - 1 {
            out[k + 1] = out[k] + h / 12.0 * (5.0 * values[k] + 8.0 * values[k + 1] - values[k + 2]);
            out[k + 2] = out[k] + h / 3.0 * (values[k] + 4.0 * values[k + 1] + values[k + 2]);
        } else {
            // trailing single interval (odd sample count): trapezoid fallback
            out[k + 1] = out[k] + 0.5 * h * (values[k] + values[k + 1]);
        }
        k += 2;
    }
    if n % 2 == 0 {
        // even number of samples = odd interval count; finish with a cubic tail
        let k = n - 2;
        if n >= 4 {
            out[k + 1] = out[k]
                + h / 24.0
                    * (9.0 * values[k + 1] + 19.0 * values[k] - 5.0 * values[k - 1] + values[k - 2]);
        } else {
            out[k + 1] = out[k] + 0.5 * h * (values[k] + values[k + 1]);
        }
    }
    out
}

pub fn cumulative_simpson_complex(values: &[Complex64], h: f64) -> Vec<Complex64> {
    let re: Vec<f64> = values.iter().map(|v| v.re).collect();
    let im: Vec<f64> = values.iter().map(|v| v.im).collect();
    let cre = cumulative_simpson(&re, h);
    let cim = cumulative_simpson(&im, h);
    cre.into_iter()
        .zip(cim)
        .map(|(r, i)| Complex64::new(r, i))
        .collect()
}

/// Total composite-Simpson integral.
pub fn simpson_total(values: &[f64], h: f64) -> f64 {
    *cumulative_simpson(values, h).last().unwrap_or(&0.0)
}

/// Sampled correction functions (J, psi, w) on a shared grid.
#[derive(Debug, Clone)]
pub struct SampledPath {
    pub grid: Arc<TimeGrid>,
    /// [sample][component]
    pub j: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub w: Vec<Vec<Complex64>>,
}

impl SampledPath {
    pub fn zero(grid: Arc<TimeGrid>, n: usize, m: usize) -> Self {
        let len = grid.len();
        SampledPath {
            grid,
            j: vec![vec![0.0; n]; len],
            psi: vec![vec![0.0; n]; len],
            w: vec![vec![Complex64::new(0.0, 0.0); m]; len],
        }
    }

    pub fn n(&self) -> usize {
        self.j[0].len()
    }

    pub fn m(&self) -> usize {
        self.w[0].len()
    }

    /// sup over samples of the max component magnitude.
    pub fn sup_norm(&self) -> f64 {
        let mut s: f64 = 0.0;
        for k in 0..self.j.len() {
            for v in &self.j[k] {
                s = s.max(v.abs());
            }
            for v in &self.psi[k] {
                s = s.max(v.abs());
            }
            for v in &self.w[k] {
                s = s.max(v.norm());
            }
        }
        s
    }

    pub fn axpy(&mut self, alpha: f64, other: &SampledPath) {
        for k in 0..self.j.len() {
            for (a, b) in self.j[k].iter_mut().zip(&other.j[k]) {
                *a += alpha * b;
            }
            for (a, b) in self.psi[k].iter_mut().zip(&other.psi[k]) {
                *a += alpha * b;
            }
            for (a, b) in self.w[k].iter_mut().zip(&other.w[k]) {
                *a += alpha * b;
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> SampledPath {
        let mut out = self.clone();
        for k in 0..out.j.len() {
            for v in &mut out.j[k] {
                *v *= alpha;
            }
            for v in &mut out.psi[k] {
                *v *= alpha;
            }
            for v in &mut out.w[k] {
                *v *= alpha;
            }
        }
        out
    }

    pub fn sub(&self, other: &SampledPath) -> SampledPath {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Smooth random path built from a few Fourier modes, normalized to
    /// sup-norm ~ scale.
    pub fn random_smooth(grid: Arc<TimeGrid>, n: usize, m: usize, modes: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let len = grid.len();
        let t_final = grid.t_final;
        let mut path = SampledPath::zero(grid, n, m);
        let two_pi = 2.0 * std::f64::consts::PI;
        for comp in 0..n {
            let coeffs: Vec<(f64, f64, f64)> = (0..=modes)
                .map(|q| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), q as f64))
                .collect();
            let coeffs2: Vec<(f64, f64, f64)> = (0..=modes)
                .map(|q| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), q as f64))
                .collect();
            for k in 0..len {
                let t = t_final * k as f64 / (len - 1) as f64;
                let mut a = 0.0;
                let mut b = 0.0;
                for &(ca, cb, q) in &coeffs {
                    a += ca * (two_pi * q * t / t_final).cos() + cb * (two_pi * q * t / t_final).sin();
                }
                for &(ca, cb, q) in &coeffs2 {
                    b += ca * (two_pi * q * t / t_final).cos() + cb * (two_pi * q * t / t_final).sin();
                }
                path.j[k][comp] = a;
                path.psi[k][comp] = b;
            }
        }
        for comp in 0..m {
            let coeffs: Vec<(f64, f64, f64, f64)> = (0..=modes)
                .map(|q| {
                    (
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        q as f64,
                    )
                })
                .collect();
            for k in 0..len {
                let t = t_final * k as f64 / (len - 1) as f64;
                let mut v = Complex64::new(0.0, 0.0);
                for &(ca, cb, cc, q) in &coeffs {
                    v += Complex64::new(ca, cb) * Complex64::new(0.0, two_pi * q * t / t_final + cc).exp();
                }
                path.w[k][comp] = v;
            }
        }
        let norm = path.sup_norm();
        if norm > 0.0 {
            path = path.scaled(scale / norm);
        }
        path
    }

    /// Cubic (4-point Lagrange) resampling onto a refined grid.
    pub fn interpolate_to(&self, fine: Arc<TimeGrid>) -> SampledPath {
        let n = self.n();
        let m = self.m();
        let coarse_len = self.grid.len();
        let mut out = SampledPath::zero(fine.clone(), n, m);
        let h = self.grid.h();
        for k in 0..fine.len() {
            let t = fine.time(k);
            // surrounding coarse index
            let pos = (t / h).floor() as isize;
            let base = pos.clamp(1, coarse_len as isize - 3) as usize - 1;
            let s = (t - self.grid.time(base + 1)) / h; // in [-1, 2] around base+1
            let weights = lagrange4(s);
            for comp in 0..n {
                let mut vj = 0.0;
                let mut vp = 0.0;
                for (q, wgt) in weights.iter().enumerate() {
                    vj += wgt * self.j[base + q][comp];
                    vp += wgt * self.psi[base + q][comp];
                }
                out.j[k][comp] = vj;
                out.psi[k][comp] = vp;
            }
            for comp in 0..m {
                let mut vw = Complex64::new(0.0, 0.0);
                for (q, wgt) in weights.iter().enumerate() {
                    vw += *wgt * self.w[base + q][comp];
                }
                out.w[k][comp] = vw;
            }
        }
        out
    }
}

/// Lagrange weights for nodes at offsets (-1, 0, 1, 2) around the anchor.
fn lagrange4(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

/// 4th-order midpoint derivative and value estimates on a uniform grid:
/// derivative ~ (27(x_{k+1} - x_k) - (x_{k+2} - x_{k-1})) / (24 h),
/// value ~ (9(x_k + x_{k+1}) - (x_{k-1} + x_{k+2})) / 16.
pub fn midpoint_derivative(xm1: f64, x0: f64, x1: f64, x2: f64, h: f64) -> f64 {
    (27.0 * (x1 - x0) - (x2 - xm1)) / (24.0 * h)
}

pub fn midpoint_value(xm1: f64, x0: f64, x1: f64, x2: f64) -> f64 {
    (9.0 * (x0 + x1) - (xm1 + x2)) / 16.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_simpson_is_fourth_order() {
        let f = |t: f64| (1.3 * t).sin() + 0.2 * t;
        let exact = |t: f64| (1.0 - (1.3 * t).cos()) / 1.3 + 0.1 * t * t;
        let err_for = |n: usize| -> f64 {
            let h = 2.0 / n as f64;
            let vals: Vec<f64> = (0..=n).map(|k| f(k as f64 * h)).collect();
            let cum = cumulative_simpson(&vals, h);
            (0..=n)
                .map(|k| (cum[k] - exact(k as f64 * h)).abs())
                .fold(0.0f64, f64::max)
        };
        let e1 = err_for(64);
        let e2 = err_for(128);
        let order = (e1 / e2).log2();
        assert!(order > 3.5, "cumulative quadrature order {order}");
    }

    #[test]
    fn interpolation_is_accurate() {
        let grid = Arc::new(TimeGrid::new(3.0, 48));
        let mut path = SampledPath::zero(grid.clone(), 1, 1);
        for k in 0..grid.len() {
            let t = grid.time(k);
            path.j[k][0] = (2.0 * t).sin();
            path.psi[k][0] = t * t / 9.0;
            path.w[k][0] = Complex64::new(0.0, 1.7 * t).exp();
        }
        let fine = Arc::new(grid.refine(4));
        let refined = path.interpolate_to(fine.clone());
        let mut err: f64 = 0.0;
        for k in 0..fine.len() {
            let t = fine.time(k);
            err = err.max((refined.j[k][0] - (2.0 * t).sin()).abs());
            err = err.max((refined.psi[k][0] - t * t / 9.0).abs());
            err = err.max((refined.w[k][0] - Complex64::new(0.0, 1.7 * t).exp()).norm());
        }
        assert!(err < 2e-4, "interpolation error {err}");
    }

    #[test]
    fn midpoint_formulas_are_fourth_order() {
        let f = |t: f64| (1.1 * t).sin();
        let df = |t: f64| 1.1 * (1.1 * t).cos();
        let check = |h: f64| -> (f64, f64) {
            let t0 = 0.4;
            let xs = [f(t0 - h), f(t0), f(t0 + h), f(t0 + 2.0 * h)];
            let tm = t0 + 0.5 * h;
            let d = midpoint_derivative(xs[0], xs[1], xs[2], xs[3], h);
            let v = midpoint_value(xs[0], xs[1], xs[2], xs[3]);
            ((d - df(tm)).abs(), (v - f(tm)).abs())
        };
        let (d1, v1) = check(0.02);
        let (d2, v2) = check(0.01);
        assert!((d1 / d2).log2() > 3.5);
        assert!((v1 / v2).log2() > 3.5);
    }
}
