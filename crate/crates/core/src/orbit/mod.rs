//! Construction of periodic orbits branching off the resonant tori of the
//! averaged system: resonant action selection, pseudo-periodic solutions via
//! the Green operator and the contraction mapping, the reduced action
//! functional and its critical points on the quotient torus, minimal-period
//! bounds, and the resonant-torus continuation mode.

pub mod contraction;
pub mod green;
pub mod grid;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::dynamics::{CompiledField, State, Trajectory};
use crate::error::{CoreError, CoreResult};
use crate::normalform::NormalFormResult;
use crate::resonance::{frac_wrap, FrequencyData};
use crate::tfseries::TFSeries;

pub use contraction::{contraction_solve, ContractionOptions, ContractionReport};
pub use green::{green_norm_bound, monodromy_gap, GreenOperator, MONODROMY_FLOOR};
pub use grid::{SampledPath, TimeGrid};

/// Everything fixed once the period T is chosen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodSetup {
    pub t_period: f64,
    pub k_vec: Vec<i64>,
    pub i0: Vec<f64>,
    pub omega_tilde: Vec<f64>,
    pub omega_eta: Vec<f64>,
    pub minv_bound: f64,
    pub eta: f64,
}

/// Resonant action for a given period:
/// `I0 = -(2 pi / eta^2 T) R^-1 <omega T / 2 pi>`, `k = omega T/2pi - <.>`,
/// `omega_tilde = 2 pi k / T`.
pub fn resonant_action(
    t_period: f64,
    eta: f64,
    twist: &DMatrix<f64>,
    omega: &[f64],
) -> CoreResult<(Vec<f64>, Vec<i64>, Vec<f64>)> {
    let n = omega.len();
    let two_pi = 2.0 * std::f64::consts::PI;
    let rinv = twist
        .clone()
        .try_inverse()
        .ok_or_else(|| CoreError::SingularMatrix("twist matrix".into()))?;
    let frac = DVector::from_iterator(n, omega.iter().map(|w| frac_wrap(w * t_period / two_pi)));
    let k_vec: Vec<i64> = omega
        .iter()
        .zip(frac.iter())
        .map(|(&w, &f)| (w * t_period / two_pi - f).round() as i64)
        .collect();
    let i0_vec = -(&rinv * &frac) * (two_pi / (eta * eta * t_period));
    let i0: Vec<f64> = i0_vec.iter().copied().collect();
    // omega_tilde = 2 pi k / T closes exactly; re-verify the defining identity
    let omega_tilde: Vec<f64> = k_vec.iter().map(|&k| two_pi * k as f64 / t_period).collect();
    let check = twist * &i0_vec;
    for i in 0..n {
        let defined = omega[i] + eta * eta * check[i];
        if (defined - omega_tilde[i]).abs() > 1e-9 * (1.0 + omega[i].abs()) {
            return Err(CoreError::InternalConsistency(format!(
                "resonant action identity violated at component {i}: {:.3e}",
                (defined - omega_tilde[i]).abs()
            )));
        }
    }
    Ok((i0, k_vec, omega_tilde))
}

/// Assemble the period data: resonant action, shifted elliptic frequencies
/// `Omega_eta = Omega + eta^2 Q I0`, and the monodromy check.
pub fn period_setup(
    freq: &FrequencyData,
    nf: &NormalFormResult,
    t_period: f64,
    minv_bound: f64,
    eta: f64,
) -> CoreResult<PeriodSetup> {
    let (i0, k_vec, omega_tilde) = resonant_action(t_period, eta, &nf.twist, &freq.omega)?;
    let i0_v = DVector::from_column_slice(&i0);
    let shift = &nf.coupling * &i0_v;
    let omega_eta: Vec<f64> = freq
        .omega_elliptic
        .iter()
        .zip(shift.iter())
        .map(|(&om, &s)| om + eta * eta * s)
        .collect();
    let (invertible, _, _) = monodromy_gap(&omega_eta, t_period);
    if !invertible {
        return Err(CoreError::SingularMatrix(
            "monodromy 1 - e^{i Omega_eta T} at the selected period".into(),
        ));
    }
    // O(1) guard on the resonant action when T is in the theorem regime
    if eta * eta * t_period >= 1.0 {
        let rinv = nf.twist.clone().try_inverse().unwrap();
        let guard = green::inf_norm(&rinv) * std::f64::consts::PI * 1.05;
        let sup = i0.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if sup > guard {
            return Err(CoreError::InternalConsistency(format!(
                "|I0| = {sup:.3} exceeds the O(1) guard {guard:.3}"
            )));
        }
    }
    Ok(PeriodSetup {
        t_period,
        k_vec,
        i0,
        omega_tilde,
        omega_eta,
        minv_bound,
        eta,
    })
}

/// A converged pseudo-periodic solution: corrections, reconstructed
/// trajectory and residuals.
#[derive(Debug, Clone)]
pub struct PseudoOrbit {
    pub phi0: Vec<f64>,
    pub path: SampledPath,
    pub trajectory: Trajectory,
    pub ode_residual: f64,
    pub boundary_residual: f64,
    pub contraction: ContractionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    Min,
    Max,
    GridBasin,
}

/// A closed orbit found by the variational search.
#[derive(Debug, Clone)]
pub struct OrbitSolution {
    pub phi_star: Vec<f64>,
    pub trajectory: Trajectory,
    pub action_value: f64,
    pub action_imag_residual: f64,
    pub closure_residual: f64,
    pub min_period_lower_bound: f64,
    pub kind: SolutionKind,
    pub ode_residual: f64,
    pub contraction: ContractionReport,
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub grid_per_dim: usize,
    pub points_per_period: f64,
    pub floor_min: usize,
    pub refine_factor: usize,
    pub closure_tol: f64,
    /// Gradient level below which the action landscape is declared flat.
    pub degenerate_tol: f64,
    pub distinct_tol: f64,
    pub contraction: ContractionOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            grid_per_dim: 16,
            points_per_period: 64.0,
            floor_min: 256,
            refine_factor: 4,
            closure_tol: 1e-9,
            degenerate_tol: 1e-12,
            distinct_tol: 1e-6,
            contraction: ContractionOptions::default(),
        }
    }
}

/// The reduced boundary-value problem: ansatz
/// `I = base + s J, phi = phi0 + omega_ref t + s psi, z = s w` with the
/// correction scale s (eta in the torus mode, 1 in the continuation mode).
pub struct ReducedProblem {
    pub field: CompiledField,
    /// Field of the perturbation H_P = H - [omega_ref.I + Omega_osc z zbar
    /// + (1/2)(I-base)^T M (I-base)]; subtracting the skeleton symbolically
    /// keeps the fixed-point map free of large cancellations.
    p_field: CompiledField,
    pub green: GreenOperator,
    pub grid: Arc<TimeGrid>,
    pub fine_grid: Arc<TimeGrid>,
    pub base_actions: Vec<f64>,
    pub omega_ref: Vec<f64>,
    pub omega_osc: Vec<f64>,
    pub m_mat: DMatrix<f64>,
    pub corr_scale: f64,
    pub options: SearchOptions,
    /// The sampled Lipschitz verification is angle-translation invariant, so
    /// it runs once per problem and is reused across phi0.
    lipschitz_cache: std::sync::OnceLock<(f64, f64)>,
}

/// H minus the integrable skeleton that the Green operator inverts.
fn perturbation_series(
    h_at: &TFSeries,
    base_actions: &[f64],
    omega_ref: &[f64],
    omega_osc: &[f64],
    m_mat: &DMatrix<f64>,
) -> TFSeries {
    let n = h_at.n();
    let m = h_at.m();
    let mut hp = h_at.clone();
    let real = h_at.is_real_flagged();
    for (i, &w) in omega_ref.iter().enumerate() {
        let mut k = vec![0u32; n];
        k[i] = 1;
        hp.insert(
            crate::tfseries::TermKey::new(k, vec![0; m], vec![0; m], vec![0; n]),
            Complex64::new(-w, 0.0),
        );
    }
    for (j, &om) in omega_osc.iter().enumerate() {
        let mut a = vec![0u32; m];
        a[j] = 1;
        hp.insert(
            crate::tfseries::TermKey::new(vec![0; n], a.clone(), a, vec![0; n]),
            Complex64::new(-om, 0.0),
        );
    }
    // -(1/2)(I - base)^T M (I - base): quadratic, linear and constant keys
    for i in 0..n {
        for i2 in 0..n {
            let c = m_mat[(i, i2)];
            if c == 0.0 {
                continue;
            }
            let mut kq = vec![0u32; n];
            kq[i] += 1;
            kq[i2] += 1;
            hp.insert(
                crate::tfseries::TermKey::new(kq, vec![0; m], vec![0; m], vec![0; n]),
                Complex64::new(-0.5 * c, 0.0),
            );
            let mut kl = vec![0u32; n];
            kl[i] = 1;
            hp.insert(
                crate::tfseries::TermKey::new(kl, vec![0; m], vec![0; m], vec![0; n]),
                Complex64::new(c * base_actions[i2], 0.0),
            );
        }
    }
    hp.set_real_flag(real);
    hp
}

impl ReducedProblem {
    /// Theorem-mode problem at a selected period: the full averaged system
    /// (degree-5 part plus remainder) realized at eta.
    pub fn for_setup(
        nf: &NormalFormResult,
        setup: &PeriodSetup,
        options: SearchOptions,
    ) -> CoreResult<ReducedProblem> {
        let eta = setup.eta;
        let h_full = nf.h_full_at(eta);
        let field = CompiledField::new(&h_full);
        let max_freq = setup
            .omega_tilde
            .iter()
            .chain(setup.omega_eta.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        let grid = Arc::new(TimeGrid::for_period(
            setup.t_period,
            max_freq,
            options.points_per_period,
            options.floor_min,
        ));
        let fine_grid = Arc::new(grid.refine(options.refine_factor));
        let m_mat = &nf.twist * (eta * eta);
        let green = GreenOperator::new(grid.clone(), m_mat.clone(), setup.omega_eta.clone())?;
        let hp = perturbation_series(&h_full, &setup.i0, &setup.omega_tilde, &setup.omega_eta, &m_mat);
        Ok(ReducedProblem {
            field,
            p_field: CompiledField::new(&hp),
            green,
            grid,
            fine_grid,
            base_actions: setup.i0.clone(),
            omega_ref: setup.omega_tilde.clone(),
            omega_osc: setup.omega_eta.clone(),
            m_mat,
            corr_scale: eta,
            options,
            lipschitz_cache: std::sync::OnceLock::new(),
        })
    }

    fn n(&self) -> usize {
        self.base_actions.len()
    }

    fn m(&self) -> usize {
        self.omega_osc.len()
    }

    /// The nonlinear map P of the fixed-point equation on a given grid; the
    /// perturbation field already has the Green-inverted skeleton removed.
    fn apply_p(&self, grid: &TimeGrid, phi0: &[f64], x: &SampledPath) -> SampledPath {
        let n = self.n();
        let m = self.m();
        let s = self.corr_scale;
        let mut out = SampledPath::zero(x.grid.clone(), n, m);
        for k in 0..grid.len() {
            let t = grid.time(k);
            let state = State {
                actions: (0..n).map(|i| self.base_actions[i] + s * x.j[k][i]).collect(),
                angles: (0..n)
                    .map(|i| phi0[i] + self.omega_ref[i] * t + s * x.psi[k][i])
                    .collect(),
                z: (0..m).map(|j| x.w[k][j] * s).collect(),
            };
            let (idot, phidot, zdot) = self.p_field.eval(&state);
            for i in 0..n {
                out.j[k][i] = idot[i] / s;
                out.psi[k][i] = phidot[i] / s;
            }
            for j in 0..m {
                out.w[k][j] = zdot[j] / s;
            }
        }
        out
    }

    fn reconstruct(&self, grid: &TimeGrid, phi0: &[f64], x: &SampledPath) -> Trajectory {
        let n = self.n();
        let m = self.m();
        let s = self.corr_scale;
        let mut times = Vec::with_capacity(grid.len());
        let mut states = Vec::with_capacity(grid.len());
        for k in 0..grid.len() {
            let t = grid.time(k);
            times.push(t);
            states.push(State {
                actions: (0..n).map(|i| self.base_actions[i] + s * x.j[k][i]).collect(),
                angles: (0..n)
                    .map(|i| phi0[i] + self.omega_ref[i] * t + s * x.psi[k][i])
                    .collect(),
                z: (0..m).map(|j| x.w[k][j] * s).collect(),
            });
        }
        Trajectory { times, states }
    }

    /// Solve the fixed-point problem at phi0: contraction on the base grid,
    /// then refinement iterations on the fine grid.
    pub fn pseudo_periodic(&self, phi0: &[f64]) -> CoreResult<PseudoOrbit> {
        let n = self.n();
        let m = self.m();
        let p_coarse = |x: &SampledPath| self.apply_p(&self.grid, phi0, x);
        let mut copts = self.options.contraction.clone();
        let cached = self.lipschitz_cache.get().copied();
        if let Some((measured, bound)) = cached {
            copts.dp_samples = 0;
            if copts.enforce_lipschitz && measured > bound {
                return Err(CoreError::ContractionRefused {
                    lp0: f64::NAN,
                    dp: measured,
                    bound,
                });
            }
        }
        let (x_coarse, mut report) = contraction_solve(p_coarse, &self.green, n, m, &copts)?;
        match cached {
            None => {
                let _ = self
                    .lipschitz_cache
                    .set((report.lipschitz_measured, report.lipschitz_bound));
            }
            Some((measured, bound)) => {
                report.lipschitz_measured = measured;
                report.lipschitz_bound = bound;
            }
        }

        // refinement: the same fixed-point map on a finer grid, seeded by
        // interpolating the converged coarse solution
        let fine_green = GreenOperator::new(
            self.fine_grid.clone(),
            self.green.m_mat.clone(),
            self.green.omega.clone(),
        )?;
        let mut x = x_coarse.interpolate_to(self.fine_grid.clone());
        let mut final_step = report.final_step;
        for _ in 0..4 {
            let next = fine_green.apply(&self.apply_p(&self.fine_grid, phi0, &x));
            final_step = next.sub(&x).sup_norm();
            x = next;
            if final_step < self.options.contraction.stop_tol {
                break;
            }
        }
        report.final_step = final_step;

        let trajectory = self.reconstruct(&self.fine_grid, phi0, &x);
        let boundary_residual = {
            let len = self.fine_grid.len();
            let mut b: f64 = 0.0;
            for i in 0..n {
                b = b.max(x.psi[0][i].abs()).max(x.psi[len - 1][i].abs());
            }
            for j in 0..m {
                b = b.max((x.w[0][j] - x.w[len - 1][j]).norm());
            }
            b * self.corr_scale
        };
        let ode_residual = self.ode_residual(&trajectory);
        Ok(PseudoOrbit {
            phi0: phi0.to_vec(),
            path: x,
            trajectory,
            ode_residual,
            boundary_residual,
            contraction: report,
        })
    }

    /// 4th-order midpoint defect of the reconstructed trajectory against the
    /// full vector field.
    fn ode_residual(&self, traj: &Trajectory) -> f64 {
        let len = traj.times.len();
        if len < 5 {
            return 0.0;
        }
        let h = traj.times[1] - traj.times[0];
        let n = self.n();
        let m = self.m();
        let mut worst: f64 = 0.0;
        let stride = ((len - 3) / 128).max(1);
        let mut k = 1;
        while k + 2 < len {
            let sm = |get: &dyn Fn(&State) -> f64| -> (f64, f64) {
                let xm1 = get(&traj.states[k - 1]);
                let x0 = get(&traj.states[k]);
                let x1 = get(&traj.states[k + 1]);
                let x2 = get(&traj.states[k + 2]);
                (
                    grid::midpoint_derivative(xm1, x0, x1, x2, h),
                    grid::midpoint_value(xm1, x0, x1, x2),
                )
            };
            let mut actions = vec![0.0; n];
            let mut angles = vec![0.0; n];
            let mut z = vec![Complex64::new(0.0, 0.0); m];
            let mut derivs: Vec<f64> = Vec::with_capacity(2 * n + 2 * m);
            for i in 0..n {
                let (d, v) = sm(&|s: &State| s.actions[i]);
                actions[i] = v;
                derivs.push(d);
            }
            for i in 0..n {
                let (d, v) = sm(&|s: &State| s.angles[i]);
                angles[i] = v;
                derivs.push(d);
            }
            for j in 0..m {
                let (dre, vre) = sm(&|s: &State| s.z[j].re);
                let (dim, vim) = sm(&|s: &State| s.z[j].im);
                z[j] = Complex64::new(vre, vim);
                derivs.push(dre);
                derivs.push(dim);
            }
            let state = State { actions, angles, z };
            let (idot, phidot, zdot) = self.field.eval(&state);
            let mut idx = 0;
            for value in idot.iter().chain(phidot.iter()) {
                worst = worst.max((derivs[idx] - value).abs());
                idx += 1;
            }
            for zd in &zdot {
                worst = worst.max((derivs[idx] - zd.re).abs());
                worst = worst.max((derivs[idx + 1] - zd.im).abs());
                idx += 2;
            }
            k += stride;
        }
        worst
    }

    /// Reduced action along a pseudo orbit:
    /// `E = int I.phidot + Re(i z zbardot) - H dt`; returns (value, |imag|).
    pub fn reduced_action(&self, orbit: &PseudoOrbit) -> (f64, f64) {
        let grid = &self.fine_grid;
        let len = grid.len();
        let mut re_vals = Vec::with_capacity(len);
        let mut im_vals = Vec::with_capacity(len);
        for k in 0..len {
            let state = &orbit.trajectory.states[k];
            let (_, phidot, zdot) = self.field.eval(state);
            let energy = self.field.energy(state);
            let kinetic: f64 = state
                .actions
                .iter()
                .zip(&phidot)
                .map(|(&i, &pd)| i * pd)
                .sum();
            let elliptic: Complex64 = state
                .z
                .iter()
                .zip(&zdot)
                .map(|(&z, &zd)| Complex64::new(0.0, 1.0) * z * zd.conj())
                .sum();
            re_vals.push(kinetic + elliptic.re - energy.re);
            im_vals.push(elliptic.im - energy.im);
        }
        let h = grid.h();
        (
            grid::simpson_total(&re_vals, h),
            grid::simpson_total(&im_vals, h).abs(),
        )
    }

    /// Gradient of the reduced action: I(T) - I(0).
    pub fn action_gradient(&self, orbit: &PseudoOrbit) -> Vec<f64> {
        let len = self.fine_grid.len();
        (0..self.n())
            .map(|i| self.corr_scale * (orbit.path.j[len - 1][i] - orbit.path.j[0][i]))
            .collect()
    }
}

/// Integer basis of the lattice {v in Z^n : v.k = 0}, from a unimodular
/// reduction bringing k to (g, 0, .., 0).
pub fn quotient_lattice_basis(k_vec: &[i64]) -> CoreResult<Vec<Vec<i64>>> {
    let n = k_vec.len();
    if n == 0 || k_vec.iter().all(|&x| x == 0) {
        return Err(CoreError::InvalidInput("k vector must be nonzero".into()));
    }
    let mut g = k_vec.to_vec();
    let mut u: Vec<Vec<i64>> = (0..n)
        .map(|i| (0..n).map(|j| i64::from(i == j)).collect())
        .collect();
    loop {
        let nonzero: Vec<usize> = (0..n).filter(|&i| g[i] != 0).collect();
        if nonzero.len() == 1 {
            let p = nonzero[0];
            g.swap(0, p);
            u.swap(0, p);
            break;
        }
        let p = *nonzero
            .iter()
            .min_by_key(|&&i| g[i].abs())
            .expect("nonempty");
        for &q in &nonzero {
            if q == p {
                continue;
            }
            let factor = g[q] / g[p];
            g[q] -= factor * g[p];
            for col in 0..n {
                let delta = factor * u[p][col];
                u[q][col] -= delta;
            }
        }
    }
    let basis: Vec<Vec<i64>> = u[1..].to_vec();
    for v in &basis {
        let dot: i128 = v
            .iter()
            .zip(k_vec)
            .map(|(&a, &b)| a as i128 * b as i128)
            .sum();
        if dot != 0 {
            return Err(CoreError::InternalConsistency(
                "lattice basis vector not orthogonal to k".into(),
            ));
        }
    }
    Ok(basis)
}

/// Certified lower bound T / gcd(k) plus the Diophantine asymptotic form
/// T^{1/(tau+1)} (reported, not certified).
pub fn minimal_period_bound(k_vec: &[i64], tau: f64, t_period: f64) -> (f64, f64) {
    let g = k_vec
        .iter()
        .fold(0i64, |acc, &x| crate::resonance::gcd(acc, x))
        .max(1);
    (t_period / g as f64, t_period.powf(1.0 / (tau + 1.0)))
}

/// Compare a trajectory against its own time-shift by T/j (linear
/// interpolation between samples); small values mean T/j is also a period.
pub fn self_shift_mismatch(traj: &Trajectory, j: usize) -> f64 {
    let len = traj.times.len();
    let n_intervals = len - 1;
    let shift = n_intervals as f64 / j as f64;
    let mut worst: f64 = 0.0;
    let stride = (n_intervals / 256).max(1);
    let mut k = 0;
    while k < n_intervals {
        let pos = k as f64 + shift;
        let wrapped = pos % n_intervals as f64;
        let base = wrapped.floor() as usize;
        let frac = wrapped - base as f64;
        let s1 = &traj.states[base];
        let s2 = &traj.states[(base + 1).min(n_intervals)];
        let interp = State {
            actions: s1
                .actions
                .iter()
                .zip(&s2.actions)
                .map(|(&a, &b)| a + frac * (b - a))
                .collect(),
            angles: s1
                .angles
                .iter()
                .zip(&s2.angles)
                .map(|(&a, &b)| a + frac * (b - a))
                .collect(),
            z: s1
                .z
                .iter()
                .zip(&s2.z)
                .map(|(&a, &b)| a + frac * (b - a))
                .collect(),
        };
        worst = worst.max(interp.wrapped_distance(&traj.states[k]));
        k += stride;
    }
    worst
}

/// True when no time shift of `a` matches `b` within tol.
pub fn geometrically_distinct(a: &Trajectory, b: &Trajectory, tol: f64) -> bool {
    let len = a.times.len().min(b.times.len()) - 1;
    let stride = (len / 256).max(1);
    let compare_points: Vec<usize> = (0..len).step_by(stride).collect();
    for shift in (0..len).step_by(stride) {
        let mut worst: f64 = 0.0;
        for &k in &compare_points {
            let ka = (k + shift) % len;
            worst = worst.max(a.states[ka].wrapped_distance(&b.states[k]));
            if worst > tol {
                break;
            }
        }
        if worst <= tol {
            return false;
        }
    }
    true
}

/// Result of the critical-point search on the quotient torus.
pub struct CriticalPointSearch {
    pub solutions: Vec<OrbitSolution>,
    pub degenerate_family: bool,
    /// (parameter, action, gradient magnitude) samples of the scan.
    pub scan: Vec<(Vec<f64>, f64, f64)>,
}

/// Scan the reduced action over Gamma = E/(Z^n cap E), refine the critical
/// points through the gradient (I(T) - I(0)) and return the closed orbits.
pub fn find_critical_points(
    problem: &ReducedProblem,
    setup: &PeriodSetup,
    tau: f64,
) -> CoreResult<CriticalPointSearch> {
    let n = problem.n();
    let opts = &problem.options;
    let (min_bound, _) = minimal_period_bound(&setup.k_vec, tau, setup.t_period);

    let build_solution = |phi0: &[f64], kind: SolutionKind| -> CoreResult<OrbitSolution> {
        let orbit = problem.pseudo_periodic(phi0)?;
        let (action_value, action_imag_residual) = problem.reduced_action(&orbit);
        let grad = problem.action_gradient(&orbit);
        let closure = grad.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let two_pi = 2.0 * std::f64::consts::PI;
        Ok(OrbitSolution {
            phi_star: phi0.iter().map(|p| p.rem_euclid(two_pi)).collect(),
            trajectory: orbit.trajectory.clone(),
            action_value,
            action_imag_residual,
            closure_residual: closure,
            min_period_lower_bound: min_bound,
            kind,
            ode_residual: orbit.ode_residual,
            contraction: orbit.contraction.clone(),
        })
    };

    if n == 1 {
        // Gamma is a point; the family is parametrized by time shifts only.
        let sol = build_solution(&[0.0], SolutionKind::GridBasin)?;
        return Ok(CriticalPointSearch {
            degenerate_family: true,
            scan: vec![(vec![0.0], sol.action_value, sol.closure_residual)],
            solutions: vec![sol],
        });
    }

    let basis = quotient_lattice_basis(&setup.k_vec)?;

    if n == 2 {
        let v = basis[0].clone();
        let phi_of = |u: f64| -> Vec<f64> {
            (0..n)
                .map(|i| 2.0 * std::f64::consts::PI * u * v[i] as f64)
                .collect()
        };
        // gradient component along the circle: dE/du = grad E . (2 pi v)
        let eval = |u: f64| -> CoreResult<(f64, f64)> {
            let orbit = problem.pseudo_periodic(&phi_of(u))?;
            let (action, _) = problem.reduced_action(&orbit);
            let g: f64 = problem
                .action_gradient(&orbit)
                .iter()
                .zip(&v)
                .map(|(&gi, &vi)| gi * vi as f64)
                .sum::<f64>()
                * 2.0
                * std::f64::consts::PI;
            Ok((action, g))
        };
        let grid_n = opts.grid_per_dim.max(8);
        let samples: Vec<(f64, f64, f64)> = (0..grid_n)
            .into_par_iter()
            .map(|q| {
                let u = q as f64 / grid_n as f64;
                let (a, g) = eval(u)?;
                Ok((u, a, g))
            })
            .collect::<CoreResult<Vec<_>>>()?;
        let scan: Vec<(Vec<f64>, f64, f64)> =
            samples.iter().map(|&(u, a, g)| (vec![u], a, g)).collect();
        let max_grad = samples.iter().fold(0.0f64, |acc, &(_, _, g)| acc.max(g.abs()));
        if max_grad <= opts.degenerate_tol {
            let lo = samples
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let hi = samples
                .iter()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let s1 = build_solution(&phi_of(lo.0), SolutionKind::Min)?;
            let s2 = build_solution(&phi_of(hi.0), SolutionKind::Max)?;
            return Ok(CriticalPointSearch {
                solutions: vec![s1, s2],
                degenerate_family: true,
                scan,
            });
        }
        // sign changes of g over the cyclic grid, polished by Illinois
        let grad_tol = opts.closure_tol
            / (1.0 + 2.0 * std::f64::consts::PI * v.iter().map(|x| x.abs()).sum::<i64>() as f64);
        let mut candidates: Vec<(f64, SolutionKind)> = Vec::new();
        for q in 0..grid_n {
            let (u1, _, g1) = samples[q];
            let (mut u2, _, g2) = samples[(q + 1) % grid_n];
            if q + 1 == grid_n {
                u2 += 1.0;
            }
            if g1 == 0.0 {
                let prev = samples[(q + grid_n - 1) % grid_n].2;
                let kind = if prev > 0.0 { SolutionKind::Max } else { SolutionKind::Min };
                candidates.push((u1, kind));
                continue;
            }
            if g1 * g2 < 0.0 {
                let kind = if g1 > 0.0 { SolutionKind::Max } else { SolutionKind::Min };
                let (mut a, mut fa) = (u1, g1);
                let (mut b, mut fb) = (u2, g2);
                let mut root = 0.5 * (a + b);
                let mut side = 0i32;
                for _ in 0..80 {
                    root = (a * fb - b * fa) / (fb - fa);
                    if !root.is_finite() {
                        root = 0.5 * (a + b);
                    }
                    let (_, fr) = eval(root)?;
                    if fr.abs() <= grad_tol || (b - a).abs() < 1e-13 {
                        break;
                    }
                    if fr * fa < 0.0 {
                        b = root;
                        fb = fr;
                        if side == -1 {
                            fa *= 0.5;
                        }
                        side = -1;
                    } else {
                        a = root;
                        fa = fr;
                        if side == 1 {
                            fb *= 0.5;
                        }
                        side = 1;
                    }
                }
                candidates.push((root.rem_euclid(1.0), kind));
            }
        }
        let mut solutions: Vec<OrbitSolution> = Vec::new();
        for (u, kind) in candidates {
            // refinement non-convergence drops the candidate, keeping the scan trace
            if let Ok(sol) = build_solution(&phi_of(u), kind) {
                if sol.closure_residual <= opts.closure_tol * 10.0
                    && solutions.iter().all(|s| {
                        geometrically_distinct(&s.trajectory, &sol.trajectory, opts.distinct_tol)
                    })
                {
                    solutions.push(sol);
                }
            }
        }
        solutions.sort_by(|a, b| a.action_value.partial_cmp(&b.action_value).unwrap());
        return Ok(CriticalPointSearch {
            solutions,
            degenerate_family: false,
            scan,
        });
    }

    // n >= 3: grid + projected-gradient polish on the (n-1)-torus
    let dims = n - 1;
    let grid_n = opts.grid_per_dim.max(6);
    let total = grid_n.pow(dims as u32);
    let phi_of = |theta: &[f64]| -> Vec<f64> {
        let mut phi = vec![0.0; n];
        for (d, &th) in theta.iter().enumerate() {
            for i in 0..n {
                phi[i] += 2.0 * std::f64::consts::PI * th * basis[d][i] as f64;
            }
        }
        phi
    };
    let theta_of_index = |idx: usize| -> Vec<f64> {
        let mut rem = idx;
        (0..dims)
            .map(|_| {
                let q = rem % grid_n;
                rem /= grid_n;
                q as f64 / grid_n as f64
            })
            .collect()
    };
    let evals: Vec<(Vec<f64>, f64, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let theta = theta_of_index(idx);
            let orbit = problem.pseudo_periodic(&phi_of(&theta))?;
            let (a, _) = problem.reduced_action(&orbit);
            let g = problem.action_gradient(&orbit);
            Ok((theta, a, g))
        })
        .collect::<CoreResult<Vec<_>>>()?;
    let scan: Vec<(Vec<f64>, f64, f64)> = evals
        .iter()
        .map(|(th, a, g)| (th.clone(), *a, g.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))))
        .collect();
    let lo = evals
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0
        .clone();
    let hi = evals
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0
        .clone();
    let mut solutions: Vec<OrbitSolution> = Vec::new();
    for (theta, minimize) in [(lo, true), (hi, false)] {
        if let Ok(phi_star) = polish_projected(problem, &phi_of, &theta, minimize, &basis) {
            let kind = if minimize { SolutionKind::Min } else { SolutionKind::Max };
            if let Ok(sol) = build_solution(&phi_star, kind) {
                if sol.closure_residual <= opts.closure_tol * 10.0
                    && solutions.iter().all(|s| {
                        geometrically_distinct(&s.trajectory, &sol.trajectory, opts.distinct_tol)
                    })
                {
                    solutions.push(sol);
                }
            }
        }
    }
    Ok(CriticalPointSearch {
        solutions,
        degenerate_family: false,
        scan,
    })
}

/// Barzilai-Borwein projected gradient iteration on the quotient torus.
fn polish_projected(
    problem: &ReducedProblem,
    phi_of: &dyn Fn(&[f64]) -> Vec<f64>,
    theta0: &[f64],
    minimize: bool,
    basis: &[Vec<i64>],
) -> CoreResult<Vec<f64>> {
    let dims = theta0.len();
    let grad_theta = |theta: &[f64]| -> CoreResult<Vec<f64>> {
        let orbit = problem.pseudo_periodic(&phi_of(theta))?;
        let g = problem.action_gradient(&orbit);
        Ok((0..dims)
            .map(|d| {
                2.0 * std::f64::consts::PI
                    * g.iter()
                        .zip(&basis[d])
                        .map(|(&gi, &vi)| gi * vi as f64)
                        .sum::<f64>()
            })
            .collect())
    };
    let sign = if minimize { -1.0 } else { 1.0 };
    let mut theta = theta0.to_vec();
    let mut g = grad_theta(&theta)?;
    let mut step = 0.05 / (g.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12);
    let mut prev_theta = theta.clone();
    let mut prev_g = g.clone();
    for iter in 0..60 {
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm < problem.options.closure_tol {
            break;
        }
        for d in 0..dims {
            theta[d] = (theta[d] + sign * step * g[d]).rem_euclid(1.0);
        }
        let new_g = grad_theta(&theta)?;
        if iter > 0 {
            let mut sy = 0.0;
            let mut ss = 0.0;
            for d in 0..dims {
                let sd = theta[d] - prev_theta[d];
                let yd = new_g[d] - prev_g[d];
                sy += sd * yd;
                ss += sd * sd;
            }
            if sy.abs() > 1e-300 {
                step = (ss / sy).abs();
            }
        }
        prev_theta = theta.clone();
        prev_g = g;
        g = new_g;
    }
    Ok(phi_of(&theta))
}

/// Output of the resonant-torus continuation mode.
pub struct ContinuationOutput {
    pub solutions: Vec<OrbitSolution>,
    pub j_eps: Vec<f64>,
    pub omega: Vec<f64>,
    pub omega_elliptic: Vec<f64>,
    /// sup of the correction balls over the returned solutions.
    pub correction_sup: f64,
    pub degenerate_family: bool,
}

/// Continuation of circular resonant motions of a properly degenerate system
/// `h(J) + Omega(J) z zbar + cubic + angle-dependent remainder`: the same
/// Green-operator and contraction machinery applied at the natural scale,
/// followed by a reduced-action min/max over the initial angle.
pub fn resonant_torus_continuation(
    j0: &[f64],
    t_period: f64,
    k_vec: &[i64],
    h_eps: &TFSeries,
    eps: f64,
    c1: f64,
    options: SearchOptions,
) -> CoreResult<ContinuationOutput> {
    let n = h_eps.n();
    let m = h_eps.m();
    if j0.len() != n || k_vec.len() != n {
        return Err(CoreError::DimensionMismatch(
            "J0/k dimensions do not match the Hamiltonian".into(),
        ));
    }
    if eps <= 0.0 || eps * t_period > 1.0 / c1 + 1e-12 {
        return Err(CoreError::PeriodRefused(format!(
            "continuation needs 0 < eps T <= 1/c1; got eps T = {:.4e}, 1/c1 = {:.4e}",
            eps * t_period,
            1.0 / c1
        )));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let omega: Vec<f64> = k_vec.iter().map(|&k| two_pi * k as f64 / t_period).collect();

    // skeleton pieces: pure-action part and the diagonal elliptic part
    let h_action = h_eps.project(|key| {
        key.a.iter().all(|&x| x == 0)
            && key.abar.iter().all(|&x| x == 0)
            && key.ell.iter().all(|&x| x == 0)
    });
    let grad_series: Vec<TFSeries> = (0..n).map(|i| h_action.diff_action(i)).collect();
    let hess_series: Vec<Vec<TFSeries>> = (0..n)
        .map(|i| (0..n).map(|i2| grad_series[i].diff_action(i2)).collect())
        .collect();
    let zeros_phi = vec![0.0; n];
    let zeros_z: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); m];
    let eval_grad = |j: &[f64]| -> CoreResult<Vec<f64>> {
        grad_series
            .iter()
            .map(|s| Ok(s.evaluate(j, &zeros_phi, &zeros_z)?.re))
            .collect()
    };
    let grad0 = eval_grad(j0)?;
    let pre_err = grad0
        .iter()
        .zip(&omega)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if pre_err > 1e-3 * (1.0 + omega.iter().fold(0.0f64, |a, &b| a.max(b.abs()))) {
        return Err(CoreError::InvalidInput(format!(
            "h'(J0) is not close to 2 pi k / T (defect {pre_err:.3e})"
        )));
    }
    // Newton for J_eps with h'(J_eps) = omega exactly
    let mut j_eps = j0.to_vec();
    for _ in 0..60 {
        let g = eval_grad(&j_eps)?;
        let defect: Vec<f64> = g.iter().zip(&omega).map(|(&a, &b)| a - b).collect();
        let norm = defect.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if norm < 1e-13 {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for i2 in 0..n {
                hess[(i, i2)] = hess_series[i][i2].evaluate(&j_eps, &zeros_phi, &zeros_z)?.re;
            }
        }
        let inv = hess
            .try_inverse()
            .ok_or_else(|| CoreError::SingularMatrix("h''(J) in the frequency solve".into()))?;
        let delta = inv * DVector::from_column_slice(&defect);
        for i in 0..n {
            j_eps[i] -= delta[i];
        }
    }
    // elliptic frequencies eps Omega~(J_eps): the diagonal a = abar = e_j part
    let mut omega_elliptic = vec![0.0; m];
    for (j, slot) in omega_elliptic.iter_mut().enumerate() {
        let series_j = h_eps.project(|key| {
            key.a.iter().enumerate().all(|(q, &x)| x == u32::from(q == j))
                && key.abar.iter().enumerate().all(|(q, &x)| x == u32::from(q == j))
                && key.ell.iter().all(|&x| x == 0)
        });
        let mut val = Complex64::new(0.0, 0.0);
        for (key, c) in series_j.iter() {
            let mut p = *c;
            for (i, &e) in key.k.iter().enumerate() {
                p *= j_eps[i].powi(e as i32);
            }
            val += p;
        }
        *slot = val.re;
    }
    let (invertible, _, _) = monodromy_gap(&omega_elliptic, t_period);
    if !invertible {
        return Err(CoreError::SingularMatrix(
            "continuation monodromy 1 - e^{i eps Omega~ T}".into(),
        ));
    }
    let mut hess = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for i2 in 0..n {
            hess[(i, i2)] = hess_series[i][i2].evaluate(&j_eps, &zeros_phi, &zeros_z)?.re;
        }
    }
    let max_freq = omega
        .iter()
        .chain(omega_elliptic.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let grid = Arc::new(TimeGrid::for_period(
        t_period,
        max_freq,
        options.points_per_period,
        options.floor_min,
    ));
    let fine_grid = Arc::new(grid.refine(options.refine_factor));
    let green = GreenOperator::new(grid.clone(), hess.clone(), omega_elliptic.clone())?;
    let hp = perturbation_series(h_eps, &j_eps, &omega, &omega_elliptic, &hess);
    let problem = ReducedProblem {
        field: CompiledField::new(h_eps),
        p_field: CompiledField::new(&hp),
        green,
        grid,
        fine_grid,
        base_actions: j_eps.clone(),
        omega_ref: omega.clone(),
        omega_osc: omega_elliptic.clone(),
        m_mat: hess,
        corr_scale: 1.0,
        options,
        lipschitz_cache: std::sync::OnceLock::new(),
    };
    let setup = PeriodSetup {
        t_period,
        k_vec: k_vec.to_vec(),
        i0: j_eps.clone(),
        omega_tilde: omega.clone(),
        omega_eta: omega_elliptic.clone(),
        minv_bound: f64::NAN,
        eta: 1.0,
    };
    let search = find_critical_points(&problem, &setup, 1.0)?;
    let correction_sup = search
        .solutions
        .iter()
        .map(|s| s.contraction.delta0)
        .fold(0.0f64, f64::max);
    Ok(ContinuationOutput {
        solutions: search.solutions,
        j_eps,
        omega,
        omega_elliptic,
        correction_sup,
        degenerate_family: search.degenerate_family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resonant_action_examples() {
        // omega T / 2 pi integer -> I0 = 0
        let twist = DMatrix::from_row_slice(1, 1, &[1.0]);
        let t = 4.0 * std::f64::consts::PI;
        let (i0, k, omt) = resonant_action(t, 0.1, &twist, &[1.0]).unwrap();
        assert!(i0[0].abs() < 1e-12);
        assert_eq!(k, vec![2]);
        assert!((omt[0] - 1.0).abs() < 1e-14);

        // n=1, omega=1, T=20.5 pi, eta^2=0.01, R=1: <10.25> = 0.25,
        // I0 = -2.4390.., k = 10, omega_tilde T = 20 pi
        let t = 20.5 * std::f64::consts::PI;
        let (i0, k, omt) = resonant_action(t, 0.1, &twist, &[1.0]).unwrap();
        assert_eq!(k, vec![10]);
        let expected = -(2.0 * std::f64::consts::PI / (0.01 * t)) * 0.25;
        assert!((i0[0] - expected).abs() < 1e-10, "I0 = {}", i0[0]);
        assert!((omt[0] * t - 20.0 * std::f64::consts::PI).abs() < 1e-10);

        // wrap convention at the half-integer boundary: <x> in [-1/2, 1/2)
        assert_eq!(frac_wrap(2.5), -0.5);
        assert_eq!(frac_wrap(-0.5), -0.5);
    }

    #[test]
    fn lattice_basis_examples() {
        assert_eq!(quotient_lattice_basis(&[2, 1]).unwrap(), vec![vec![1, -2]]);
        let b = quotient_lattice_basis(&[1, 0, 0]).unwrap();
        for v in &b {
            assert_eq!(v.iter().zip(&[1, 0, 0]).map(|(&a, &c)| a * c).sum::<i64>(), 0);
        }
        assert_eq!(b.len(), 2);
        // index check: [k/g, basis] has nonzero integer determinant
        let k = vec![4i64, 6];
        let basis = quotient_lattice_basis(&k).unwrap();
        let g = crate::resonance::gcd(4, 6);
        let mat = DMatrix::from_row_slice(
            2,
            2,
            &[
                (k[0] / g) as f64,
                (k[1] / g) as f64,
                basis[0][0] as f64,
                basis[0][1] as f64,
            ],
        );
        assert!(mat.determinant().abs() >= 1.0 - 1e-12);
        assert!(quotient_lattice_basis(&[0, 0]).is_err());
    }

    #[test]
    fn minimal_period_bound_examples() {
        let (b, _) = minimal_period_bound(&[4, 6], 2.0, 10.0);
        assert_eq!(b, 5.0);
        let (b, _) = minimal_period_bound(&[3, 5], 2.0, 10.0);
        assert_eq!(b, 10.0);
    }
}
