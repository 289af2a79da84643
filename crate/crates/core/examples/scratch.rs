// Development scratch: pipeline dry-run on the bundled generic model.
use nalgebra::DMatrix;
use num_complex::Complex64;
use peritorus::dynamics::{verify_orbit, IntegratorConfig, Method};
use peritorus::normalform::{averaged_normal_form, assemble_hamiltonian};
use peritorus::orbit::{
    find_critical_points, monodromy_gap, period_setup, ReducedProblem, SearchOptions,
};
use peritorus::resonance::{
    detect_resonances, melnikov_check, omega_eta_t, select_period_lemma_a, select_period_lemma_b,
    FrequencyData,
};
use peritorus::tfseries::{TFSeries, TermKey};

fn model_n2m2() -> (TFSeries, FrequencyData) {
    let lambda = 1.0 + (5.0f64.sqrt() - 2.0) / 5.0;
    let freq = FrequencyData {
        omega: vec![1.0, lambda],
        omega_elliptic: vec![2.0f64.sqrt(), 3.0f64.sqrt()],
        gamma: 1e-3,
        tau: 2.0,
            divisor_floor: 1e-10,
    };
    let mut t = TFSeries::zero(2, 2, 6, 8);
    let mut put = |k: [u32; 2], a: [u32; 2], ab: [u32; 2], ell: [i32; 2], c: f64| {
        t.insert(
            TermKey::new(k.to_vec(), a.to_vec(), ab.to_vec(), ell.to_vec()),
            Complex64::new(c, 0.0),
        );
    };
    // cubic, eliminated classes
    put([1, 0], [1, 0], [0, 0], [0, 0], 1e-3);
    put([1, 0], [0, 0], [1, 0], [0, 0], 1e-3);
    put([0, 1], [0, 1], [0, 0], [1, 0], 1e-3);
    put([0, 1], [0, 0], [0, 1], [-1, 0], 1e-3);
    // cubic, kept (k = 0)
    put([0, 0], [2, 0], [0, 1], [0, 1], 1e-3);
    put([0, 0], [0, 1], [2, 0], [0, -1], 1e-3);
    // quartic action Hessian (twist)
    put([2, 0], [0, 0], [0, 0], [0, 0], 0.5);
    put([0, 2], [0, 0], [0, 0], [0, 0], 0.4);
    put([1, 1], [0, 0], [0, 0], [0, 0], 0.1);
    // coupling
    put([1, 0], [1, 0], [1, 0], [0, 0], 0.3);
    put([0, 1], [1, 0], [1, 0], [0, 0], 0.15);
    put([1, 0], [0, 1], [0, 1], [0, 0], 0.1);
    put([0, 1], [0, 1], [0, 1], [0, 0], 0.2);
    // quartic eliminated
    put([2, 0], [0, 0], [0, 0], [1, 0], 5e-4);
    put([2, 0], [0, 0], [0, 0], [-1, 0], 5e-4);
    put([1, 0], [1, 0], [0, 1], [0, 0], 5e-4);
    put([1, 0], [0, 1], [1, 0], [0, 0], 5e-4);
    // quartic kept
    put([0, 0], [1, 1], [1, 1], [0, 0], 2e-4);
    // quintic kept / eliminated
    put([1, 0], [2, 0], [0, 1], [1, 0], 2e-4);
    put([1, 0], [0, 1], [2, 0], [-1, 0], 2e-4);
    put([2, 0], [1, 0], [0, 0], [0, 0], 2e-4);
    put([2, 0], [0, 0], [1, 0], [0, 0], 2e-4);
    // degree-6 remainder: quasi-resonant landscape mode
    put([3, 0], [0, 0], [0, 0], [1, -1], 7.5e-4);
    put([3, 0], [0, 0], [0, 0], [-1, 1], 7.5e-4);
    (t, freq)
}

fn main() {
    let (terms, mut freq) = model_n2m2();
    // scan minimal |omega.ell + Omega.h| (1 + |ell|^tau) to place gamma
    let probe = FrequencyData {
        gamma: 1.0,
        ..freq.clone()
    };
    let rep = melnikov_check(&probe, 10);
    println!(
        "min |combo| (1+|l|^tau) = {:.6e} at ell={:?}, h={:?}",
        rep.min_margin, rep.worst_ell, rep.worst_h
    );
    freq.gamma = 0.8 * rep.min_margin;
    println!("setting gamma = {:.6e}", freq.gamma);
    let rep = melnikov_check(&freq, 10);
    println!("melnikov margin at gamma: {:.3}", rep.min_margin);

    let st = detect_resonances(&freq, 12, 10, 1e-9, &[]).unwrap();
    println!("m_hat = {}", st.m_hat);

    let h = assemble_hamiltonian(&terms, &freq).unwrap();
    let t0 = std::time::Instant::now();
    let nf = averaged_normal_form(&h, &freq, 0.1).unwrap();
    println!("averaging took {:?}", t0.elapsed());
    println!("twist = {}", nf.twist);
    println!("coupling = {}", nf.coupling);
    println!("diag: {:?}", nf.diagnostics);

    for eta in [0.1f64, 0.07, 0.05] {
        let t_start = 1.0 / (eta * eta);
        let cert = select_period_lemma_a(&freq, &st, &nf.twist, &nf.coupling, t_start, 1e6);
        match cert {
            Ok(c) => {
                println!(
                    "eta={eta}: lemma A period T = {:.4} (d0 = {:.4}, minv_bound = {:.3})",
                    c.t_period,
                    c.d_bound,
                    c.minv_bound
                );
                let setup = period_setup(&freq, &nf, c.t_period, c.minv_bound, eta).unwrap();
                println!(
                    "  I0 = {:?}, k = {:?}",
                    setup.i0, setup.k_vec
                );
                let (inv, exact, stima) = monodromy_gap(&setup.omega_eta, setup.t_period);
                println!("  monodromy: inv={inv}, exact={exact:.3}, stima={stima:.3}, cert={:.3}", c.minv_bound);
                let phases = omega_eta_t(&freq, &nf.twist, &nf.coupling, c.t_period).unwrap();
                let margin = phases
                    .iter()
                    .map(|&p| peritorus::resonance::dist_to_2pi(p))
                    .fold(f64::INFINITY, f64::min);
                println!(
                    "  re-verify dist = {margin:.4} >= pi d0/2 = {:.4}",
                    std::f64::consts::PI * c.d_bound / 2.0
                );

                let t0 = std::time::Instant::now();
                let mut opts = SearchOptions::default();
                opts.grid_per_dim = 12;
                let problem = ReducedProblem::for_setup(&nf, &setup, opts).unwrap();
                println!(
                    "  grid N = {}, |L| bound = {:.3e}",
                    problem.grid.samples, problem.green.norm_bound
                );
                let single = problem.pseudo_periodic(&[0.3, 1.1]);
                match &single {
                    Ok(orbit) => println!(
                        "  pseudo orbit: delta0={:.3e} lp0={:.3e} lips={:.3e}/{:.3e} iters={} ratio={:.3} ode={:.3e} bnd={:.3e} ({:?})",
                        orbit.contraction.delta0,
                        orbit.contraction.lp0_norm,
                        orbit.contraction.lipschitz_measured,
                        orbit.contraction.lipschitz_bound,
                        orbit.contraction.iterations,
                        orbit.contraction.max_step_ratio,
                        orbit.ode_residual,
                        orbit.boundary_residual,
                        t0.elapsed()
                    ),
                    Err(e) => println!("  pseudo orbit FAILED: {e}"),
                }
                if let Ok(orbit) = single {
                    let (action, imag) = problem.reduced_action(&orbit);
                    let grad = problem.action_gradient(&orbit);
                    println!("  action = {action:.6}, imag = {imag:.3e}, grad = {grad:?}");
                    let t1 = std::time::Instant::now();
                    let search = find_critical_points(&problem, &setup, freq.tau).unwrap();
                    println!(
                        "  critical search: {} solutions, degenerate={} ({:?})",
                        search.solutions.len(),
                        search.degenerate_family,
                        t1.elapsed()
                    );
                    for sol in &search.solutions {
                        println!(
                            "    {:?} action={:.8} closure={:.3e} phi*={:?}",
                            sol.kind, sol.action_value, sol.closure_residual, sol.phi_star
                        );
                    }
                    // verify the first solution by reintegration
                    if let Some(sol) = search.solutions.first() {
                        let h_full = nf.h_full_at(eta);
                        let cfg = IntegratorConfig::for_frequencies(
                            Method::Rk8,
                            setup
                                .omega_tilde
                                .iter()
                                .chain(setup.omega_eta.iter())
                                .fold(0.0f64, |a, &b| a.max(b.abs())),
                            100.0,
                        );
                        let t2 = std::time::Instant::now();
                        let report = verify_orbit(
                            &h_full,
                            sol.trajectory.initial(),
                            setup.t_period,
                            &setup.omega_tilde,
                            eta,
                            &cfg,
                        )
                        .unwrap();
                        println!(
                            "  verify: closure={:.3e} drift={:.3e} supI={:.3e} supZ={:.3e} phase={:.3e} ({:?})",
                            report.closure,
                            report.energy_drift,
                            report.torus_sup_action,
                            report.torus_sup_elliptic,
                            report.phase_sup,
                            t2.elapsed()
                        );
                    }
                }
            }
            Err(e) => println!("eta={eta}: lemma A refused: {e}"),
        }
    }
    // lemma B availability
    let certb = select_period_lemma_b(&freq, &st, &nf.twist, &nf.coupling, 100.0);
    match certb {
        Ok(c) => println!("lemma B: T = {:.4}, d1 = {:.4e}, alpha = {:?}", c.t_period, c.d_bound, c.constants.alpha),
        Err(e) => println!("lemma B refused: {e}"),
    }
    let _ = DMatrix::<f64>::zeros(1, 1);
}
