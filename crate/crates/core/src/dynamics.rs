//! Direct numerical integration of the Hamiltonian vector field, used for
//! verification: closure residuals, energy drift, and the torus-distance
//! sup-norms of the constructed orbits.
//!
//! `rk8` is collocation at the 4 Gauss nodes (order 8, implicit, solved by
//! fixed-point iteration; symplectic). The node/weight data is derived at
//! startup from the collocation conditions instead of a hardcoded tableau.
//! `splitting` alternates the exact flow of the linear part with a midpoint
//! kick of the remainder (order 2), useful for long-time energy behavior.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::tfseries::{TFSeries, VectorFieldSeries};

/// Phase-space point: real actions, unwrapped angles, complex elliptic
/// coordinates (zbar is maintained as the conjugate throughout).
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub actions: Vec<f64>,
    pub angles: Vec<f64>,
    pub z: Vec<Complex64>,
}

impl State {
    pub fn dim(&self) -> usize {
        self.actions.len() + self.angles.len() + 2 * self.z.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.actions);
        v.extend_from_slice(&self.angles);
        for w in &self.z {
            v.push(w.re);
            v.push(w.im);
        }
        v
    }

    pub fn from_flat(n: usize, m: usize, v: &[f64]) -> State {
        let actions = v[..n].to_vec();
        let angles = v[n..2 * n].to_vec();
        let z = (0..m)
            .map(|j| Complex64::new(v[2 * n + 2 * j], v[2 * n + 2 * j + 1]))
            .collect();
        State { actions, angles, z }
    }

    /// Max over components, with angle differences wrapped to the nearest
    /// multiple of 2 pi.
    pub fn wrapped_distance(&self, other: &State) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.actions.iter().zip(&other.actions) {
            d = d.max((a - b).abs());
        }
        for (a, b) in self.angles.iter().zip(&other.angles) {
            let two_pi = 2.0 * std::f64::consts::PI;
            let diff = a - b;
            d = d.max((diff - two_pi * (diff / two_pi).round()).abs());
        }
        for (a, b) in self.z.iter().zip(&other.z) {
            d = d.max((a - b).norm());
        }
        d
    }
}

/// One flattened monomial of a compiled component.
#[derive(Debug, Clone)]
struct CompiledTerm {
    coeff: Complex64,
    k: Vec<u8>,
    a: Vec<u8>,
    abar: Vec<u8>,
    ell: Vec<i16>,
}

/// A component series flattened for fast pointwise evaluation.
#[derive(Debug, Clone)]
struct CompiledComponent {
    terms: Vec<CompiledTerm>,
}

impl CompiledComponent {
    fn compile(series: &TFSeries) -> Self {
        let terms = series
            .iter()
            .map(|(key, c)| CompiledTerm {
                coeff: *c,
                k: key.k.iter().map(|&x| x as u8).collect(),
                a: key.a.iter().map(|&x| x as u8).collect(),
                abar: key.abar.iter().map(|&x| x as u8).collect(),
                ell: key.ell.iter().map(|&x| x as i16).collect(),
            })
            .collect();
        CompiledComponent { terms }
    }

    fn eval(&self, ctx: &EvalContext) -> Complex64 {
        let mut total = Complex64::new(0.0, 0.0);
        for t in &self.terms {
            let mut v = t.coeff;
            for (i, &e) in t.k.iter().enumerate() {
                if e > 0 {
                    v *= ctx.action_pow[i][e as usize];
                }
            }
            for (j, &e) in t.a.iter().enumerate() {
                if e > 0 {
                    v *= ctx.z_pow[j][e as usize];
                }
            }
            for (j, &e) in t.abar.iter().enumerate() {
                if e > 0 {
                    v *= ctx.zbar_pow[j][e as usize];
                }
            }
            for (i, &l) in t.ell.iter().enumerate() {
                if l != 0 {
                    v *= ctx.phase_pow[i][(l + ctx.ell_max as i16) as usize];
                }
            }
            total += v;
        }
        total
    }
}

/// Per-point tables of powers: actions, z, zbar and integer Fourier phases.
struct EvalContext {
    action_pow: Vec<Vec<f64>>,
    z_pow: Vec<Vec<Complex64>>,
    zbar_pow: Vec<Vec<Complex64>>,
    phase_pow: Vec<Vec<Complex64>>,
    ell_max: u32,
}

impl EvalContext {
    fn build(state: &State, max_deg: usize, ell_max: u32) -> EvalContext {
        let pow_table_f = |x: f64| -> Vec<f64> {
            let mut t = Vec::with_capacity(max_deg + 1);
            t.push(1.0);
            for e in 1..=max_deg {
                t.push(t[e - 1] * x);
            }
            t
        };
        let pow_table_c = |x: Complex64| -> Vec<Complex64> {
            let mut t = Vec::with_capacity(max_deg + 1);
            t.push(Complex64::new(1.0, 0.0));
            for e in 1..=max_deg {
                t.push(t[e - 1] * x);
            }
            t
        };
        let action_pow = state.actions.iter().map(|&x| pow_table_f(x)).collect();
        let z_pow: Vec<Vec<Complex64>> = state.z.iter().map(|&w| pow_table_c(w)).collect();
        let zbar_pow = state.z.iter().map(|&w| pow_table_c(w.conj())).collect();
        let phase_pow = state
            .angles
            .iter()
            .map(|&phi| {
                let base = Complex64::new(0.0, phi).exp();
                let mut t = vec![Complex64::new(0.0, 0.0); 2 * ell_max as usize + 1];
                t[ell_max as usize] = Complex64::new(1.0, 0.0);
                for l in 1..=ell_max as usize {
                    t[ell_max as usize + l] = t[ell_max as usize + l - 1] * base;
                    t[ell_max as usize - l] = t[ell_max as usize - l + 1] * base.conj();
                }
                t
            })
            .collect();
        EvalContext {
            action_pow,
            z_pow,
            zbar_pow,
            phase_pow,
            ell_max,
        }
    }
}

/// Hamiltonian vector field compiled for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledField {
    n: usize,
    m: usize,
    idot: Vec<CompiledComponent>,
    phidot: Vec<CompiledComponent>,
    zdot: Vec<CompiledComponent>,
    energy: CompiledComponent,
    max_deg: usize,
    ell_max: u32,
}

impl CompiledField {
    pub fn new(h: &TFSeries) -> CompiledField {
        let vf: VectorFieldSeries = h.hamiltonian_vector_field();
        let max_deg = h
            .iter()
            .map(|(key, _)| {
                key.k
                    .iter()
                    .chain(key.a.iter())
                    .chain(key.abar.iter())
                    .map(|&x| x as usize)
                    .max()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
            .max(1);
        let ell_max = h.fourier_cap().max(1);
        CompiledField {
            n: h.n(),
            m: h.m(),
            idot: vf.idot.iter().map(CompiledComponent::compile).collect(),
            phidot: vf.phidot.iter().map(CompiledComponent::compile).collect(),
            zdot: vf.zdot.iter().map(CompiledComponent::compile).collect(),
            energy: CompiledComponent::compile(h),
            max_deg,
            ell_max,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// (Idot, phidot, zdot) at a state.
    pub fn eval(&self, state: &State) -> (Vec<f64>, Vec<f64>, Vec<Complex64>) {
        let ctx = EvalContext::build(state, self.max_deg, self.ell_max);
        let idot = self.idot.iter().map(|c| c.eval(&ctx).re).collect();
        let phidot = self.phidot.iter().map(|c| c.eval(&ctx).re).collect();
        let zdot = self.zdot.iter().map(|c| c.eval(&ctx)).collect();
        (idot, phidot, zdot)
    }

    fn eval_flat(&self, y: &[f64], out: &mut [f64]) {
        let state = State::from_flat(self.n, self.m, y);
        let (idot, phidot, zdot) = self.eval(&state);
        out[..self.n].copy_from_slice(&idot);
        out[self.n..2 * self.n].copy_from_slice(&phidot);
        for (j, w) in zdot.iter().enumerate() {
            out[2 * self.n + 2 * j] = w.re;
            out[2 * self.n + 2 * j + 1] = w.im;
        }
    }

    /// Hamiltonian value at a state (imaginary part reported separately).
    pub fn energy(&self, state: &State) -> Complex64 {
        let ctx = EvalContext::build(state, self.max_deg, self.ell_max);
        self.energy.eval(&ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Rk8,
    Splitting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub dt: f64,
    pub max_steps: usize,
    /// Abort when any state component exceeds this magnitude.
    pub norm_guard: f64,
}

impl IntegratorConfig {
    pub fn rk8(dt: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk8,
            dt,
            max_steps: 50_000_000,
            norm_guard: 1e6,
        }
    }

    pub fn rk4(dt: f64) -> Self {
        IntegratorConfig {
            method: Method::Rk4,
            dt,
            max_steps: 50_000_000,
            norm_guard: 1e6,
        }
    }

    /// dt so the fastest frequency is sampled `points_per_period` times.
    pub fn for_frequencies(method: Method, max_freq: f64, points_per_period: f64) -> Self {
        let dt = 2.0 * std::f64::consts::PI / (points_per_period * max_freq.max(1e-9));
        IntegratorConfig {
            method,
            dt,
            max_steps: 50_000_000,
            norm_guard: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn initial(&self) -> &State {
        &self.states[0]
    }

    pub fn last(&self) -> &State {
        self.states.last().unwrap()
    }
}

/// Gauss collocation data: nodes c, weights b and the stage matrix A solved
/// from the order conditions sum_j a_ij c_j^k = c_i^{k+1}/(k+1).
struct GaussTableau {
    c: Vec<f64>,
    b: Vec<f64>,
    a: Vec<Vec<f64>>,
}

fn gauss_tableau(stages: usize) -> GaussTableau {
    // Legendre nodes on [0,1] via Newton iteration.
    let legendre = |s: usize, x: f64| -> (f64, f64) {
        let (mut p0, mut p1) = (1.0, x);
        if s == 0 {
            return (1.0, 0.0);
        }
        for k in 2..=s {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = s as f64 * (x * p1 - p0) / (x * x - 1.0);
        (p1, dp)
    };
    let mut c = Vec::with_capacity(stages);
    for i in 0..stages {
        let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (stages as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(stages, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        c.push(0.5 * (x + 1.0));
    }
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let vmat = DMatrix::from_fn(stages, stages, |k, j| c[j].powi(k as i32));
    let lu = vmat.lu();
    let rhs_b = nalgebra::DVector::from_fn(stages, |k, _| 1.0 / (k as f64 + 1.0));
    let b = lu.solve(&rhs_b).expect("gauss weight system");
    let mut a = vec![vec![0.0; stages]; stages];
    for (i, row) in a.iter_mut().enumerate() {
        let rhs =
            nalgebra::DVector::from_fn(stages, |k, _| c[i].powi(k as i32 + 1) / (k as f64 + 1.0));
        let sol = lu.solve(&rhs).expect("gauss stage system");
        for (j, target) in row.iter_mut().enumerate() {
            *target = sol[j];
        }
    }
    GaussTableau {
        c,
        b: b.iter().copied().collect(),
        a,
    }
}

fn rk4_step(field: &CompiledField, y: &[f64], h: f64) -> Vec<f64> {
    let dim = y.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    field.eval_flat(y, &mut k1);
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    field.eval_flat(&tmp, &mut k2);
    for i in 0..dim {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    field.eval_flat(&tmp, &mut k3);
    for i in 0..dim {
        tmp[i] = y[i] + h * k3[i];
    }
    field.eval_flat(&tmp, &mut k4);
    (0..dim)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn gauss_step(field: &CompiledField, tableau: &GaussTableau, y: &[f64], h: f64) -> Vec<f64> {
    let dim = y.len();
    let s = tableau.c.len();
    let mut stages = vec![vec![0.0; dim]; s];
    field.eval_flat(y, &mut stages[0]);
    for i in 1..s {
        stages[i] = stages[0].clone();
    }
    let mut tmp = vec![0.0; dim];
    let mut new_stage = vec![0.0; dim];
    for _ in 0..50 {
        let mut delta: f64 = 0.0;
        for i in 0..s {
            for d in 0..dim {
                let mut acc = 0.0;
                for (j, stage) in stages.iter().enumerate() {
                    acc += tableau.a[i][j] * stage[d];
                }
                tmp[d] = y[d] + h * acc;
            }
            field.eval_flat(&tmp, &mut new_stage);
            for d in 0..dim {
                delta = delta.max((new_stage[d] - stages[i][d]).abs());
                stages[i][d] = new_stage[d];
            }
        }
        if delta < 1e-14 {
            break;
        }
    }
    (0..dim)
        .map(|d| {
            let mut acc = 0.0;
            for (j, stage) in stages.iter().enumerate() {
                acc += tableau.b[j] * stage[d];
            }
            y[d] + h * acc
        })
        .collect()
}

/// Integrate the Hamiltonian flow of `h` from `state0` over [0, t_final],
/// storing every accepted step.
pub fn integrate(
    h: &TFSeries,
    state0: &State,
    t_final: f64,
    cfg: &IntegratorConfig,
) -> CoreResult<Trajectory> {
    if state0.actions.len() != h.n() || state0.angles.len() != h.n() || state0.z.len() != h.m() {
        return Err(CoreError::DimensionMismatch(
            "initial state does not match the Hamiltonian dimensions".into(),
        ));
    }
    if !h.is_real_flagged() {
        return Err(CoreError::InvalidInput(
            "refusing to integrate a non-real Hamiltonian".into(),
        ));
    }
    if cfg.dt <= 0.0 {
        return Err(CoreError::InvalidInput("dt must be positive".into()));
    }
    let field = CompiledField::new(h);
    let splitting = if cfg.method == Method::Splitting {
        Some(SplittingParts::build(h))
    } else {
        None
    };
    let tableau = gauss_tableau(4);
    let steps = (t_final / cfg.dt).ceil().max(1.0) as usize;
    if steps > cfg.max_steps {
        return Err(CoreError::InvalidInput(format!(
            "integration would need {steps} steps, above the configured maximum"
        )));
    }
    let dt = t_final / steps as f64;
    let mut y = state0.to_flat();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(state0.clone());
    for step in 1..=steps {
        y = match cfg.method {
            Method::Rk4 => rk4_step(&field, &y, dt),
            Method::Rk8 => gauss_step(&field, &tableau, &y, dt),
            Method::Splitting => splitting.as_ref().unwrap().strang_step(&y, dt),
        };
        if y.iter().any(|v| !v.is_finite() || v.abs() > cfg.norm_guard) {
            return Err(CoreError::InvalidInput(format!(
                "trajectory norm guard tripped at t = {:.6}",
                step as f64 * dt
            )));
        }
        times.push(step as f64 * dt);
        states.push(State::from_flat(h.n(), h.m(), &y));
    }
    Ok(Trajectory { times, states })
}

/// Linear skeleton (omega.I + Omega z zbar) flowed exactly; the remainder is
/// applied as a midpoint kick (Strang, order 2).
struct SplittingParts {
    omega: Vec<f64>,
    omega_elliptic: Vec<f64>,
    rest: CompiledField,
    n: usize,
}

impl SplittingParts {
    fn build(h: &TFSeries) -> SplittingParts {
        let n = h.n();
        let m = h.m();
        let mut omega = vec![0.0; n];
        let mut omega_elliptic = vec![0.0; m];
        let mut rest = TFSeries::zero(n, m, h.degree_cap(), h.fourier_cap());
        for (key, c) in h.iter() {
            let k_sum: u32 = key.k.iter().sum();
            let a_sum: u32 = key.a.iter().sum();
            let ab_sum: u32 = key.abar.iter().sum();
            let ell_zero = key.ell.iter().all(|&x| x == 0);
            if k_sum == 1 && a_sum == 0 && ab_sum == 0 && ell_zero {
                let i = key.k.iter().position(|&x| x == 1).unwrap();
                omega[i] = c.re;
            } else if k_sum == 0 && a_sum == 1 && ab_sum == 1 && key.a == key.abar && ell_zero {
                let j = key.a.iter().position(|&x| x == 1).unwrap();
                omega_elliptic[j] = c.re;
            } else {
                rest.insert(key.clone(), *c);
            }
        }
        rest.set_real_flag(h.is_real_flagged());
        SplittingParts {
            omega,
            omega_elliptic,
            rest: CompiledField::new(&rest),
            n,
        }
    }

    fn linear_flow(&self, y: &mut [f64], h: f64) {
        for (i, w) in self.omega.iter().enumerate() {
            y[self.n + i] += w * h;
        }
        for (j, om) in self.omega_elliptic.iter().enumerate() {
            let idx = 2 * self.n + 2 * j;
            let z = Complex64::new(y[idx], y[idx + 1]) * Complex64::new(0.0, om * h).exp();
            y[idx] = z.re;
            y[idx + 1] = z.im;
        }
    }

    fn strang_step(&self, y: &[f64], h: f64) -> Vec<f64> {
        let mut out = y.to_vec();
        self.linear_flow(&mut out, 0.5 * h);
        // midpoint kick of the remainder field
        let mut k1 = vec![0.0; y.len()];
        self.rest.eval_flat(&out, &mut k1);
        let mut mid = out.clone();
        for i in 0..out.len() {
            mid[i] += 0.5 * h * k1[i];
        }
        let mut k2 = vec![0.0; y.len()];
        self.rest.eval_flat(&mid, &mut k2);
        for i in 0..out.len() {
            out[i] += h * k2[i];
        }
        self.linear_flow(&mut out, 0.5 * h);
        out
    }
}

/// Verification report for a constructed orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub closure: f64,
    pub energy_drift: f64,
    /// sup over the trajectory of eta^2 |I| (original variables).
    pub torus_sup_action: f64,
    /// sup of |Z*| + |Zbar*| = 2 eta |z|.
    pub torus_sup_elliptic: f64,
    /// sup of |phi(t) - phi(0) - omega_tilde t|.
    pub phase_sup: f64,
    /// max |Im H| along the trajectory.
    pub imag_energy: f64,
}

/// Reintegrate from `initial` over [0, T] and measure closure, energy drift
/// and the torus-distance sup-norms in the unrescaled variables.
pub fn verify_orbit(
    h_at_eta: &TFSeries,
    initial: &State,
    t_period: f64,
    omega_tilde: &[f64],
    eta: f64,
    cfg: &IntegratorConfig,
) -> CoreResult<VerifyReport> {
    let traj = integrate(h_at_eta, initial, t_period, cfg)?;
    let field = CompiledField::new(h_at_eta);
    let e0 = field.energy(traj.initial());
    let mut energy_drift: f64 = 0.0;
    let mut imag_energy: f64 = 0.0;
    let mut sup_action: f64 = 0.0;
    let mut sup_elliptic: f64 = 0.0;
    let mut phase_sup: f64 = 0.0;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let e = field.energy(state);
        energy_drift = energy_drift.max((e.re - e0.re).abs());
        imag_energy = imag_energy.max(e.im.abs());
        let act: f64 = state.actions.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
        sup_action = sup_action.max(eta * eta * act);
        let ell: f64 = state.z.iter().fold(0.0f64, |acc, w| acc.max(w.norm()));
        sup_elliptic = sup_elliptic.max(2.0 * eta * ell);
        for i in 0..state.angles.len() {
            let drift = state.angles[i] - traj.initial().angles[i] - omega_tilde[i] * t;
            phase_sup = phase_sup.max(drift.abs());
        }
    }
    let closure = traj.last().wrapped_distance(traj.initial());
    Ok(VerifyReport {
        closure,
        energy_drift,
        torus_sup_action: sup_action,
        torus_sup_elliptic: sup_elliptic,
        phase_sup,
        imag_energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tfseries::TermKey;

    fn oscillator(omega: f64) -> TFSeries {
        let mut h = TFSeries::zero(0, 1, 6, 8);
        h.insert(
            TermKey::new(vec![], vec![1], vec![1], vec![]),
            Complex64::new(omega, 0.0),
        );
        h
    }

    fn linear_flow_h(omega: &[f64]) -> TFSeries {
        let mut h = TFSeries::zero(omega.len(), 0, 6, 8);
        for (i, &w) in omega.iter().enumerate() {
            let mut k = vec![0u32; omega.len()];
            k[i] = 1;
            h.insert(
                TermKey::new(k, vec![], vec![], vec![0; omega.len()]),
                Complex64::new(w, 0.0),
            );
        }
        h
    }

    #[test]
    fn linear_flow_is_exact() {
        let h = linear_flow_h(&[1.5, -0.3]);
        let s0 = State {
            actions: vec![0.2, 0.4],
            angles: vec![0.0, 1.0],
            z: vec![],
        };
        let traj = integrate(&h, &s0, 10.0, &IntegratorConfig::rk4(0.01)).unwrap();
        let last = traj.last();
        assert!((last.angles[0] - 15.0).abs() < 1e-10);
        assert!((last.angles[1] - (1.0 - 3.0)).abs() < 1e-10);
        assert!((last.actions[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn oscillator_closed_form() {
        let om = 1.3;
        let h = oscillator(om);
        let z0 = Complex64::new(0.7, -0.2);
        let s0 = State {
            actions: vec![],
            angles: vec![],
            z: vec![z0],
        };
        let t = 7.0;
        let traj = integrate(&h, &s0, t, &IntegratorConfig::rk8(0.05)).unwrap();
        let expected = z0 * Complex64::new(0.0, om * t).exp();
        assert!((traj.last().z[0] - expected).norm() < 1e-12);
        for s in &traj.states {
            assert!((s.z[0].norm() - z0.norm()).abs() < 1e-12);
        }
    }

    /// observed convergence order on the oscillator matches the method (+-0.5)
    #[test]
    fn integrator_orders() {
        let om = 1.1;
        let h = oscillator(om);
        let z0 = Complex64::new(0.5, 0.3);
        let s0 = State {
            actions: vec![],
            angles: vec![],
            z: vec![z0],
        };
        let t = 2.0;
        let exact = z0 * Complex64::new(0.0, om * t).exp();
        let order_of = |method: Method, h1: f64, h2: f64| -> f64 {
            let mut cfg = IntegratorConfig::rk4(h1);
            cfg.method = method;
            let e1 = (integrate(&h, &s0, t, &cfg).unwrap().last().z[0] - exact).norm();
            cfg.dt = h2;
            let e2 = (integrate(&h, &s0, t, &cfg).unwrap().last().z[0] - exact).norm();
            (e1 / e2).ln() / (h1 / h2).ln()
        };
        let p4 = order_of(Method::Rk4, 0.1, 0.05);
        assert!((p4 - 4.0).abs() < 0.5, "rk4 order {p4}");
        let p8 = order_of(Method::Rk8, 0.4, 0.2);
        assert!((p8 - 8.0).abs() < 0.5, "rk8 order {p8}");

        // splitting on a problem with a genuine remainder:
        // z' = i(om + 0.6 |z|^2) z, |z| conserved, closed-form rotation
        let mut hh = oscillator(om);
        hh.insert(
            TermKey::new(vec![], vec![2], vec![2], vec![]),
            Complex64::new(0.3, 0.0),
        );
        let exact2 = {
            let rot = om + 0.6 * z0.norm_sqr();
            z0 * Complex64::new(0.0, rot * t).exp()
        };
        let err = |dt: f64| -> f64 {
            let mut cfg = IntegratorConfig::rk4(dt);
            cfg.method = Method::Splitting;
            (integrate(&hh, &s0, t, &cfg).unwrap().last().z[0] - exact2).norm()
        };
        let p2 = (err(0.02) / err(0.01)).ln() / 2.0f64.ln();
        assert!((p2 - 2.0).abs() < 0.5, "splitting order {p2}");
    }

    #[test]
    fn reversibility_of_rk_methods() {
        let mut hq = linear_flow_h(&[1.0, std::f64::consts::SQRT_2]);
        hq.insert(
            TermKey::new(vec![2, 0], vec![], vec![], vec![0, 0]),
            Complex64::new(0.3, 0.0),
        );
        let s0 = State {
            actions: vec![0.3, -0.1],
            angles: vec![0.2, 0.9],
            z: vec![],
        };
        let fwd = integrate(&hq, &s0, 5.0, &IntegratorConfig::rk8(0.02)).unwrap();
        let back_h = hq.scale(Complex64::new(-1.0, 0.0));
        let bwd = integrate(&back_h, fwd.last(), 5.0, &IntegratorConfig::rk8(0.02)).unwrap();
        assert!(bwd.last().wrapped_distance(&s0) < 1e-11);
    }

    #[test]
    fn energy_conservation_with_coupling() {
        let mut h = TFSeries::zero(1, 1, 6, 8);
        h.insert(TermKey::new(vec![1], vec![0], vec![0], vec![0]), Complex64::new(1.0, 0.0));
        h.insert(TermKey::new(vec![0], vec![1], vec![1], vec![0]), Complex64::new(1.4, 0.0));
        h.insert(TermKey::new(vec![1], vec![1], vec![1], vec![0]), Complex64::new(0.2, 0.0));
        h.insert(TermKey::new(vec![0], vec![2], vec![1], vec![1]), Complex64::new(0.05, 0.0));
        h.insert(TermKey::new(vec![0], vec![1], vec![2], vec![-1]), Complex64::new(0.05, 0.0));
        let s0 = State {
            actions: vec![0.3],
            angles: vec![0.4],
            z: vec![Complex64::new(0.3, 0.1)],
        };
        let report = verify_orbit(
            &h,
            &s0,
            20.0,
            &[1.0],
            0.1,
            &IntegratorConfig::for_frequencies(Method::Rk8, 1.4, 100.0),
        )
        .unwrap();
        assert!(report.energy_drift < 1e-11, "drift {:.3e}", report.energy_drift);
        assert!(report.imag_energy < 1e-12);
    }
}
