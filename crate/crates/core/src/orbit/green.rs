//! The linear Green operator of the periodic boundary-value problem
//! `Jdot = Jhat, psidot - M J = psihat, zdot - i Omega z = zhat` on the
//! space X of corrections with psi(0) = psi(T) = 0 and z(0) = z(T).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use std::sync::Arc;

use crate::error::{CoreError, CoreResult};
use crate::orbit::grid::{cumulative_simpson, cumulative_simpson_complex, SampledPath, TimeGrid};

/// Floor on |1 - e^{i Omega_j T}| below which the monodromy is treated as
/// singular.
pub const MONODROMY_FLOOR: f64 = 1e-9;

/// Infinity operator norm (max absolute row sum).
pub fn inf_norm(mat: &DMatrix<f64>) -> f64 {
    (0..mat.nrows())
        .map(|i| mat.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Exact and a-priori bounds on the inverse monodromy of the elliptic block.
/// Returns (invertible, exact |Mcal^-1|, bound 2 / min dist(Omega_j T, 2 pi Z)).
pub fn monodromy_gap(omega_eta: &[f64], t_period: f64) -> (bool, f64, f64) {
    if omega_eta.is_empty() {
        return (true, 0.0, 0.0);
    }
    let mut min_gap = f64::INFINITY;
    let mut min_dist = f64::INFINITY;
    for &om in omega_eta {
        let phase = om * t_period;
        let gap = (Complex64::new(1.0, 0.0) - Complex64::new(0.0, phase).exp()).norm();
        min_gap = min_gap.min(gap);
        min_dist = min_dist.min(crate::resonance::dist_to_2pi(phase));
    }
    let invertible = min_gap > MONODROMY_FLOOR;
    let exact = 1.0 / min_gap;
    let bound = if min_dist > 0.0 { 2.0 / min_dist } else { f64::INFINITY };
    (invertible, exact, bound)
}

/// Assembled Green operator: grid, M block, elliptic frequencies, inverses
/// and the certified norm bound.
#[derive(Debug, Clone)]
pub struct GreenOperator {
    pub grid: Arc<TimeGrid>,
    pub m_mat: DMatrix<f64>,
    pub m_inv: DMatrix<f64>,
    pub omega: Vec<f64>,
    pub norm_bound: f64,
    pub minv_exact: f64,
}

impl GreenOperator {
    pub fn new(grid: Arc<TimeGrid>, m_mat: DMatrix<f64>, omega: Vec<f64>) -> CoreResult<Self> {
        let m_inv = m_mat
            .clone()
            .try_inverse()
            .ok_or_else(|| CoreError::SingularMatrix("Green operator M block".into()))?;
        let (invertible, minv_exact, _) = monodromy_gap(&omega, grid.t_final);
        if !invertible {
            return Err(CoreError::SingularMatrix(
                "elliptic monodromy 1 - e^{i Omega T}".into(),
            ));
        }
        let norm_bound = green_norm_bound_parts(&m_mat, &m_inv, minv_exact, grid.t_final, !omega.is_empty());
        Ok(GreenOperator {
            grid,
            m_mat,
            m_inv,
            omega,
            norm_bound,
            minv_exact,
        })
    }

    /// Apply L to a sampled input (Jhat, psihat, zhat).
    pub fn apply(&self, input: &SampledPath) -> SampledPath {
        let n = input.n();
        let m = input.m();
        let grid = &self.grid;
        let h = grid.h();
        let len = grid.len();
        let t_final = grid.t_final;
        let mut out = SampledPath::zero(input.grid.clone(), n, m);

        // cumulative integrals per action/angle component
        let mut cj: Vec<Vec<f64>> = Vec::with_capacity(n); // int_0^t Jhat
        let mut dj: Vec<Vec<f64>> = Vec::with_capacity(n); // int_0^t int_0^s Jhat
        let mut cp: Vec<Vec<f64>> = Vec::with_capacity(n); // int_0^t psihat
        for comp in 0..n {
            let vals: Vec<f64> = (0..len).map(|k| input.j[k][comp]).collect();
            let c = cumulative_simpson(&vals, h);
            let d = cumulative_simpson(&c, h);
            let pvals: Vec<f64> = (0..len).map(|k| input.psi[k][comp]).collect();
            cp.push(cumulative_simpson(&pvals, h));
            cj.push(c);
            dj.push(d);
        }
        // alpha = -(1/T) (D(T) + M^-1 int psihat)
        let d_total = DVector::from_iterator(n, (0..n).map(|c| dj[c][len - 1]));
        let p_total = DVector::from_iterator(n, (0..n).map(|c| cp[c][len - 1]));
        let alpha = -(d_total + &self.m_inv * p_total) / t_final;
        let m_alpha = &self.m_mat * &alpha;

        for k in 0..len {
            let t = grid.time(k);
            for comp in 0..n {
                out.j[k][comp] = alpha[comp] + cj[comp][k];
                let m_dj: f64 = (0..n).map(|c2| self.m_mat[(comp, c2)] * dj[c2][k]).sum();
                out.psi[k][comp] = m_alpha[comp] * t + m_dj + cp[comp][k];
            }
        }
        // elliptic block: z = e^{i Omega t} (beta + int_0^t e^{-i Omega s} zhat ds)
        for (jidx, &om) in self.omega.iter().enumerate() {
            let twisted: Vec<Complex64> = (0..len)
                .map(|k| input.w[k][jidx] * Complex64::new(0.0, -om * grid.time(k)).exp())
                .collect();
            let e = cumulative_simpson_complex(&twisted, h);
            let phase_t = Complex64::new(0.0, om * t_final).exp();
            let mcal = Complex64::new(1.0, 0.0) - phase_t;
            let beta = phase_t * e[len - 1] / mcal;
            for k in 0..len {
                out.w[k][jidx] = Complex64::new(0.0, om * grid.time(k)).exp() * (beta + e[k]);
            }
        }
        // pin the endpoints that are zero/equal in exact arithmetic
        for comp in 0..n {
            out.psi[0][comp] = 0.0;
        }
        out
    }
}

/// Certified sup-norm bound C (|M^-1| + |M| T^2 + |M||M^-1| T + |Mcal^-1| T)
/// with C = 3; the constant is provable for the componentwise sup-norm.
pub fn green_norm_bound(m_mat: &DMatrix<f64>, omega: &[f64], t_period: f64) -> CoreResult<f64> {
    let m_inv = m_mat
        .clone()
        .try_inverse()
        .ok_or_else(|| CoreError::SingularMatrix("Green operator M block".into()))?;
    let (invertible, minv_exact, _) = monodromy_gap(omega, t_period);
    if !invertible {
        return Err(CoreError::SingularMatrix("elliptic monodromy".into()));
    }
    Ok(green_norm_bound_parts(m_mat, &m_inv, minv_exact, t_period, !omega.is_empty()))
}

fn green_norm_bound_parts(
    m_mat: &DMatrix<f64>,
    m_inv: &DMatrix<f64>,
    minv_exact: f64,
    t_period: f64,
    has_elliptic: bool,
) -> f64 {
    let mn = inf_norm(m_mat);
    let mni = inf_norm(m_inv);
    let mcal = if has_elliptic { minv_exact } else { 0.0 };
    3.0 * (mni + mn * t_period * t_period + mn * mni * t_period + mcal * t_period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(t: f64, samples: usize) -> (Arc<TimeGrid>, GreenOperator) {
        let grid = Arc::new(TimeGrid::new(t, samples));
        let m = DMatrix::from_row_slice(2, 2, &[0.01, 0.002, 0.002, 0.008]);
        let omega = vec![1.3, 0.7];
        let green = GreenOperator::new(grid.clone(), m, omega).unwrap();
        (grid, green)
    }

    #[test]
    fn zero_maps_to_zero() {
        let (grid, green) = setup(10.0, 256);
        let zero = SampledPath::zero(grid, 2, 2);
        let out = green.apply(&zero);
        assert_eq!(out.sup_norm(), 0.0);
    }

    #[test]
    fn constant_jhat_closed_form() {
        // Jhat = c, psihat = zhat = 0:
        // alpha = -cT/2, J(t) = c(t - T/2), psi(t) = M c (t^2 - T t)/2
        let t_final = 8.0;
        let grid = Arc::new(TimeGrid::new(t_final, 512));
        let m = DMatrix::from_row_slice(1, 1, &[0.37]);
        let green = GreenOperator::new(grid.clone(), m, vec![]).unwrap();
        let mut input = SampledPath::zero(grid.clone(), 1, 0);
        let c = 0.83;
        for k in 0..grid.len() {
            input.j[k][0] = c;
        }
        let out = green.apply(&input);
        let mut err: f64 = 0.0;
        for k in 0..grid.len() {
            let t = grid.time(k);
            err = err.max((out.j[k][0] - c * (t - t_final / 2.0)).abs());
            err = err.max((out.psi[k][0] - 0.37 * c * (t * t - t_final * t) / 2.0).abs());
        }
        assert!(err < 1e-10, "closed form error {err}");
        assert!(out.psi[0][0].abs() < 1e-12 && out.psi[grid.len() - 1][0].abs() < 1e-12);
    }

    #[test]
    fn constant_zhat_closed_form() {
        // zhat = c constant, Omega T not in 2 pi Z:
        // z(t) = e^{i Om t} beta + (e^{i Om t} - 1) c / (i Om) with endpoints equal
        let t_final = 6.0;
        let om = 1.1;
        let grid = Arc::new(TimeGrid::new(t_final, 512));
        let m = DMatrix::from_row_slice(1, 1, &[1.0]);
        let green = GreenOperator::new(grid.clone(), m, vec![om]).unwrap();
        let mut input = SampledPath::zero(grid.clone(), 1, 1);
        let c = Complex64::new(0.4, -0.9);
        for k in 0..grid.len() {
            input.w[k][0] = c;
        }
        let out = green.apply(&input);
        assert!((out.w[0][0] - out.w[grid.len() - 1][0]).norm() < 1e-10);
        // differential check at midpoints: zdot - i Om z = c
        let h = grid.h();
        let mut err: f64 = 0.0;
        for k in 1..grid.len() - 2 {
            let d = crate::orbit::grid::midpoint_derivative(
                out.w[k - 1][0].re,
                out.w[k][0].re,
                out.w[k + 1][0].re,
                out.w[k + 2][0].re,
                h,
            );
            let dim = crate::orbit::grid::midpoint_derivative(
                out.w[k - 1][0].im,
                out.w[k][0].im,
                out.w[k + 1][0].im,
                out.w[k + 2][0].im,
                h,
            );
            let zm = Complex64::new(
                crate::orbit::grid::midpoint_value(
                    out.w[k - 1][0].re,
                    out.w[k][0].re,
                    out.w[k + 1][0].re,
                    out.w[k + 2][0].re,
                ),
                crate::orbit::grid::midpoint_value(
                    out.w[k - 1][0].im,
                    out.w[k][0].im,
                    out.w[k + 1][0].im,
                    out.w[k + 2][0].im,
                ),
            );
            let resid = Complex64::new(d, dim) - Complex64::new(0.0, om) * zm - c;
            err = err.max(resid.norm());
        }
        assert!(err < 1e-6, "zdot residual {err}");
    }

    #[test]
    fn norm_bound_dominates_empirical() {
        let (grid, green) = setup(12.0, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let input = SampledPath::random_smooth(grid.clone(), 2, 2, 4, 1.0, &mut rng);
            let out = green.apply(&input);
            let ratio = out.sup_norm() / input.sup_norm();
            assert!(
                ratio <= green.norm_bound,
                "empirical {ratio} vs bound {}",
                green.norm_bound
            );
        }
    }

    #[test]
    fn monodromy_gap_examples() {
        // Omega T = pi: Mcal = 2 Id, |Mcal^-1| = 1/2
        let (inv, exact, bound) = monodromy_gap(&[1.0, 1.0], std::f64::consts::PI);
        assert!(inv);
        assert!((exact - 0.5).abs() < 1e-14);
        assert!(exact <= bound);
        // Omega T in 2 pi Z: not invertible
        let (inv, _, _) = monodromy_gap(&[1.0], 2.0 * std::f64::consts::PI);
        assert!(!inv);
        // random: exact <= stimaM-style bound
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for _ in 0..100 {
            let om: f64 = rng.gen_range(0.1..3.0);
            let t: f64 = rng.gen_range(1.0..50.0);
            let (inv, exact, bound) = monodromy_gap(&[om], t);
            if inv {
                assert!(exact <= bound + 1e-12, "exact {exact} bound {bound}");
            }
        }
    }
}
