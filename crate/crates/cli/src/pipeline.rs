//! Stage runners and artifact writers. Every stage reads plain data, writes
//! one machine-readable artifact into the output tree and hands its result
//! to the next stage; failures carry the stage-specific exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use peritorus::dynamics::{verify_orbit, IntegratorConfig, Method, VerifyReport};
use peritorus::error::CoreError;
use peritorus::normalform::{assemble_hamiltonian, averaged_normal_form, NormalFormResult};
use peritorus::orbit::{
    self, find_critical_points, monodromy_gap, period_setup, ContractionOptions, OrbitSolution,
    PeriodSetup, ReducedProblem, SearchOptions,
};
use peritorus::resonance::{
    detect_resonances, melnikov_check, omega_eta_t, select_period_lemma_a, select_period_lemma_b,
    MelnikovReport, PeriodCertificate, ResonanceStructure,
};
use peritorus::tfseries::TFSeriesJson;

use crate::config::{PeriodRoute, PipelineConfig, Stage};
use crate::input::LoadedModel;

/// Exit codes of the pipeline, one per failure class.
pub mod exit_code {
    #[allow(dead_code)]
    pub const OK: i32 = 0;
    pub const PARSE: i32 = 2;
    pub const MELNIKOV: i32 = 3;
    pub const SMALL_DIVISOR: i32 = 4;
    pub const TWIST_SINGULAR: i32 = 5;
    pub const PERIOD_REFUSED: i32 = 6;
    pub const CONTRACTION: i32 = 7;
    pub const CLOSURE: i32 = 8;
}

#[derive(Debug)]
pub struct StageError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (exit code {})", self.message, self.code)
    }
}

impl std::error::Error for StageError {}

pub fn code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::MelnikovFailed { .. } => exit_code::MELNIKOV,
        CoreError::SmallDivisor { .. } => exit_code::SMALL_DIVISOR,
        CoreError::SingularMatrix(what) if what.contains("twist") => exit_code::TWIST_SINGULAR,
        CoreError::SingularMatrix(_) => exit_code::PERIOD_REFUSED,
        CoreError::HypothesisViolated(_)
        | CoreError::BudgetExhausted { .. }
        | CoreError::PeriodRefused(_) => exit_code::PERIOD_REFUSED,
        CoreError::ContractionRefused { .. } | CoreError::ContractionDiverged { .. } => {
            exit_code::CONTRACTION
        }
        CoreError::ClosureNotMet { .. } => exit_code::CLOSURE,
        _ => exit_code::PARSE,
    }
}

pub fn stage_err(err: CoreError) -> StageError {
    StageError {
        code: code_for(&err),
        message: err.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MelnikovArtifact {
    pub report: MelnikovReport,
    pub passes: bool,
}

pub fn run_melnikov(
    model: &LoadedModel,
    cutoff: u32,
    out: Option<&Path>,
) -> Result<MelnikovReport, StageError> {
    let report = melnikov_check(&model.freq, cutoff);
    let artifact = MelnikovArtifact {
        report: report.clone(),
        passes: report.passes(),
    };
    if let Some(dir) = out {
        write_json(&dir.join("melnikov.json"), &artifact).map_err(io_err)?;
    }
    if !report.passes() {
        return Err(StageError {
            code: exit_code::MELNIKOV,
            message: format!(
                "Melnikov check failed: margin {:.3e} at ell={:?}, h={:?}",
                report.min_margin, report.worst_ell, report.worst_h
            ),
        });
    }
    Ok(report)
}

fn io_err(e: anyhow::Error) -> StageError {
    StageError {
        code: exit_code::PARSE,
        message: e.to_string(),
    }
}

pub fn run_resonances(
    model: &LoadedModel,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<ResonanceStructure, StageError> {
    let st = detect_resonances(
        &model.freq,
        cfg.m_max,
        cfg.a_max,
        cfg.tolerances.relation,
        &model.declared,
    )
    .map_err(stage_err)?;
    if let Some(dir) = out {
        write_json(&dir.join("resonances.json"), &st).map_err(io_err)?;
    }
    Ok(st)
}

#[derive(Serialize)]
struct NormalFormArtifact<'a> {
    eta: f64,
    h_avg: TFSeriesJson,
    remainder: TFSeriesJson,
    chi: Vec<TFSeriesJson>,
    twist: Vec<Vec<f64>>,
    coupling: Vec<Vec<f64>>,
    det_twist: f64,
    diagnostics: &'a peritorus::normalform::NormalFormDiagnostics,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn run_normalform(
    model: &LoadedModel,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<NormalFormResult, StageError> {
    let h = assemble_hamiltonian(&model.terms, &model.freq).map_err(stage_err)?;
    let eta_ref = cfg.eta.first().copied().unwrap_or(0.1);
    let nf = averaged_normal_form(&h, &model.freq, eta_ref).map_err(stage_err)?;
    if let Some(dir) = out {
        let artifact = NormalFormArtifact {
            eta: eta_ref,
            h_avg: (&nf.h_avg).into(),
            remainder: (&nf.remainder).into(),
            chi: nf.chi.iter().map(|c| c.into()).collect(),
            twist: matrix_rows(&nf.twist),
            coupling: matrix_rows(&nf.coupling),
            det_twist: nf.twist.determinant(),
            diagnostics: &nf.diagnostics,
        };
        write_json(&dir.join("normalform.json"), &artifact).map_err(io_err)?;
    }
    Ok(nf)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub eta: f64,
    pub certificate: PeriodCertificate,
    /// Exact |Mcal^-1| at the selected period and the a-priori comparison
    /// bound 2 / min dist(Omega_eta T, 2 pi Z).
    pub exact_minv: f64,
    pub stima_bound: f64,
    pub setup: PeriodSetup,
}

pub fn run_periods(
    model: &LoadedModel,
    structure: &ResonanceStructure,
    nf: &NormalFormResult,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<Vec<CertificateRecord>, StageError> {
    let det = nf.twist.determinant();
    if det.abs() < 1e-10 {
        return Err(StageError {
            code: exit_code::TWIST_SINGULAR,
            message: format!("twist matrix is singular (det = {det:.3e}); cannot modulate frequencies"),
        });
    }
    let mut records = Vec::new();
    for &eta in &cfg.eta {
        let t0 = cfg.t0.unwrap_or(1.0 / (eta * eta));
        let cert = match cfg.period_route {
            PeriodRoute::A => {
                select_period_lemma_a(&model.freq, structure, &nf.twist, &nf.coupling, t0, cfg.budget)
            }
            PeriodRoute::B => select_period_lemma_b(&model.freq, structure, &nf.twist, &nf.coupling, t0),
            PeriodRoute::Auto => select_period_lemma_a(
                &model.freq,
                structure,
                &nf.twist,
                &nf.coupling,
                t0,
                cfg.budget,
            )
            .or_else(|_| select_period_lemma_b(&model.freq, structure, &nf.twist, &nf.coupling, t0)),
        }
        .map_err(stage_err)?;
        let setup =
            period_setup(&model.freq, nf, cert.t_period, cert.minv_bound, eta).map_err(stage_err)?;
        let (_, exact_minv, stima_bound) = monodromy_gap(&setup.omega_eta, setup.t_period);
        // consistency of the certificate against the realized phases
        let phases =
            omega_eta_t(&model.freq, &nf.twist, &nf.coupling, cert.t_period).map_err(stage_err)?;
        let _ = phases;
        records.push(CertificateRecord {
            eta,
            certificate: cert,
            exact_minv,
            stima_bound,
            setup,
        });
    }
    if let Some(dir) = out {
        write_json(&dir.join("certificates.json"), &records).map_err(io_err)?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitArtifact {
    pub eta: f64,
    pub t_period: f64,
    pub k_vec: Vec<i64>,
    pub i0: Vec<f64>,
    pub omega_tilde: Vec<f64>,
    pub omega_eta: Vec<f64>,
    pub phi_star: Vec<f64>,
    pub kind: orbit::SolutionKind,
    pub action_value: f64,
    pub action_imag_residual: f64,
    pub closure_residual: f64,
    pub ode_residual: f64,
    pub min_period_lower_bound: f64,
    pub degenerate_family: bool,
    pub contraction: orbit::ContractionReport,
    pub initial_actions: Vec<f64>,
    pub initial_angles: Vec<f64>,
    pub initial_z_re: Vec<f64>,
    pub initial_z_im: Vec<f64>,
    pub samples_csv: String,
}

pub struct OrbitStageOutput {
    #[allow(dead_code)] // consumed by integration tests through the JSON tree
    pub artifacts: Vec<OrbitArtifact>,
    pub solutions: Vec<(f64, PeriodSetup, OrbitSolution, bool)>,
}

pub fn search_options(cfg: &PipelineConfig) -> SearchOptions {
    SearchOptions {
        grid_per_dim: cfg.grid_per_dim,
        points_per_period: cfg.points_per_period,
        floor_min: 256,
        refine_factor: cfg.refine_factor,
        closure_tol: cfg.tolerances.closure,
        degenerate_tol: 1e-12,
        distinct_tol: cfg.tolerances.distinct,
        contraction: ContractionOptions {
            delta0: None,
            max_iter: 200,
            stop_tol: cfg.tolerances.contraction_stop,
            dp_samples: 10,
            seed: cfg.seed,
            enforce_lipschitz: true,
        },
    }
}

fn orbit_csv(path: &Path, traj: &peritorus::dynamics::Trajectory, max_rows: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let n = traj.states[0].actions.len();
    let m = traj.states[0].z.len();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("I_{i}")));
    header.extend((1..=n).map(|i| format!("phi_{i}")));
    for j in 1..=m {
        header.push(format!("z_re_{j}"));
        header.push(format!("z_im_{j}"));
    }
    writeln!(file, "{}", header.join(","))?;
    let stride = (traj.times.len() / max_rows).max(1);
    for k in (0..traj.times.len()).step_by(stride) {
        let s = &traj.states[k];
        let mut row = vec![format!("{:.17e}", traj.times[k])];
        row.extend(s.actions.iter().map(|v| format!("{v:.17e}")));
        row.extend(s.angles.iter().map(|v| format!("{v:.17e}")));
        for z in &s.z {
            row.push(format!("{:.17e}", z.re));
            row.push(format!("{:.17e}", z.im));
        }
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn run_orbits(
    model: &LoadedModel,
    nf: &NormalFormResult,
    certificates: &[CertificateRecord],
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<OrbitStageOutput, StageError> {
    let mut artifacts = Vec::new();
    let mut solutions = Vec::new();
    for record in certificates {
        let eta = record.eta;
        let setup = record.setup.clone();
        let problem =
            ReducedProblem::for_setup(nf, &setup, search_options(cfg)).map_err(stage_err)?;
        let search = find_critical_points(&problem, &setup, model.freq.tau).map_err(stage_err)?;
        if search.solutions.len() < 2 && !search.degenerate_family {
            return Err(StageError {
                code: exit_code::CLOSURE,
                message: format!(
                    "only {} closed orbit(s) survived refinement at eta = {eta}",
                    search.solutions.len()
                ),
            });
        }
        for (idx, sol) in search.solutions.iter().enumerate() {
            let csv_name = format!("orbits/orbit_eta{eta}_{idx}.csv");
            if let Some(dir) = out {
                orbit_csv(&dir.join(&csv_name), &sol.trajectory, cfg.max_csv_rows).map_err(io_err)?;
            }
            let init = sol.trajectory.initial();
            let artifact = OrbitArtifact {
                eta,
                t_period: setup.t_period,
                k_vec: setup.k_vec.clone(),
                i0: setup.i0.clone(),
                omega_tilde: setup.omega_tilde.clone(),
                omega_eta: setup.omega_eta.clone(),
                phi_star: sol.phi_star.clone(),
                kind: sol.kind,
                action_value: sol.action_value,
                action_imag_residual: sol.action_imag_residual,
                closure_residual: sol.closure_residual,
                ode_residual: sol.ode_residual,
                min_period_lower_bound: sol.min_period_lower_bound,
                degenerate_family: search.degenerate_family,
                contraction: sol.contraction.clone(),
                initial_actions: init.actions.clone(),
                initial_angles: init.angles.clone(),
                initial_z_re: init.z.iter().map(|z| z.re).collect(),
                initial_z_im: init.z.iter().map(|z| z.im).collect(),
                samples_csv: csv_name.clone(),
            };
            if let Some(dir) = out {
                write_json(
                    &dir.join(format!("orbits/orbit_eta{eta}_{idx}.json")),
                    &artifact,
                )
                .map_err(io_err)?;
            }
            artifacts.push(artifact);
            solutions.push((eta, setup.clone(), sol.clone(), search.degenerate_family));
        }
    }
    Ok(OrbitStageOutput {
        artifacts,
        solutions,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub eta: f64,
    pub t_period: f64,
    pub phi_star: Vec<f64>,
    pub kind: orbit::SolutionKind,
    pub report: VerifyReport,
    /// (j, mismatch) of the trajectory against its own shift by T/j.
    pub self_shift: Vec<(usize, f64)>,
    pub min_period_lower_bound: f64,
    pub gcd_k: i64,
}

pub fn run_verify(
    nf: &NormalFormResult,
    orbits: &OrbitStageOutput,
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<Vec<VerifyRecord>, StageError> {
    let mut records = Vec::new();
    for (eta, setup, sol, _) in &orbits.solutions {
        let h_full = nf.h_full_at(*eta);
        let max_freq = setup
            .omega_tilde
            .iter()
            .chain(setup.omega_eta.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        let integ = IntegratorConfig::for_frequencies(Method::Rk8, max_freq, 100.0);
        let report = verify_orbit(
            &h_full,
            sol.trajectory.initial(),
            setup.t_period,
            &setup.omega_tilde,
            *eta,
            &integ,
        )
        .map_err(stage_err)?;
        let g = setup
            .k_vec
            .iter()
            .fold(0i64, |acc, &x| peritorus::resonance::gcd(acc, x))
            .max(1);
        let max_j = ((2 * g).min(16)).max(4) as usize;
        let self_shift: Vec<(usize, f64)> = (2..=max_j)
            .map(|j| (j, orbit::self_shift_mismatch(&sol.trajectory, j)))
            .collect();
        records.push(VerifyRecord {
            eta: *eta,
            t_period: setup.t_period,
            phi_star: sol.phi_star.clone(),
            kind: sol.kind,
            report,
            self_shift,
            min_period_lower_bound: sol.min_period_lower_bound,
            gcd_k: g,
        });
    }
    if let Some(dir) = out {
        write_json(&dir.join("verify_report.json"), &records).map_err(io_err)?;
    }
    // the artifact is always written before enforcing the closure criterion
    for r in &records {
        if r.report.closure > cfg.tolerances.closure.max(1e-7) {
            return Err(StageError {
                code: exit_code::CLOSURE,
                message: format!(
                    "verified closure {:.3e} exceeds tolerance at eta = {}, phi* = {:?}",
                    r.report.closure, r.eta, r.phi_star
                ),
            });
        }
    }
    Ok(records)
}

pub fn write_summary(
    out: &Path,
    orbits: &OrbitStageOutput,
    verify: Option<&[VerifyRecord]>,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join("summary.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let n = orbits
        .solutions
        .first()
        .map(|(_, s, _, _)| s.k_vec.len())
        .unwrap_or(0);
    let mut header = vec!["eta".to_string(), "T".to_string(), "kind".to_string()];
    header.extend((1..=n).map(|i| format!("phi_star_{i}")));
    header.extend(
        [
            "action",
            "action_imag",
            "closure",
            "ode_residual",
            "min_period_bound",
            "degenerate_family",
            "verify_closure",
            "energy_drift",
            "torus_sup_I",
            "torus_sup_z",
            "phase_sup",
        ]
        .map(String::from),
    );
    writeln!(file, "{}", header.join(","))?;
    for (idx, (eta, setup, sol, degenerate)) in orbits.solutions.iter().enumerate() {
        let mut row = vec![
            format!("{eta}"),
            format!("{:.12e}", setup.t_period),
            format!("{:?}", sol.kind).to_lowercase(),
        ];
        row.extend(sol.phi_star.iter().map(|p| format!("{p:.12e}")));
        row.push(format!("{:.12e}", sol.action_value));
        row.push(format!("{:.3e}", sol.action_imag_residual));
        row.push(format!("{:.3e}", sol.closure_residual));
        row.push(format!("{:.3e}", sol.ode_residual));
        row.push(format!("{:.6e}", sol.min_period_lower_bound));
        row.push(format!("{degenerate}"));
        match verify.and_then(|v| v.get(idx)) {
            Some(v) => {
                row.push(format!("{:.3e}", v.report.closure));
                row.push(format!("{:.3e}", v.report.energy_drift));
                row.push(format!("{:.6e}", v.report.torus_sup_action));
                row.push(format!("{:.6e}", v.report.torus_sup_elliptic));
                row.push(format!("{:.6e}", v.report.phase_sup));
            }
            None => {
                row.extend(std::iter::repeat("".to_string()).take(5));
            }
        }
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

pub struct PipelineOutput {
    pub melnikov: Option<MelnikovReport>,
    pub structure: Option<ResonanceStructure>,
    pub normalform: Option<NormalFormResult>,
    pub certificates: Vec<CertificateRecord>,
    pub orbits: Option<OrbitStageOutput>,
    pub verify: Option<Vec<VerifyRecord>>,
}

/// Run the selected stages in order, writing the artifact tree under
/// `cfg.out`.
pub fn run_pipeline(model: &LoadedModel, cfg: &PipelineConfig) -> Result<PipelineOutput, StageError> {
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out).map_err(|e| StageError {
        code: exit_code::PARSE,
        message: format!("cannot create output directory: {e}"),
    })?;
    write_json(&out.join("config_used.json"), cfg).map_err(io_err)?;
    let has = |s: Stage| cfg.stages.contains(&s);

    let mut result = PipelineOutput {
        melnikov: None,
        structure: None,
        normalform: None,
        certificates: Vec::new(),
        orbits: None,
        verify: None,
    };
    if has(Stage::Melnikov) {
        result.melnikov = Some(run_melnikov(model, cfg.melnikov_cutoff, Some(&out))?);
    }
    if has(Stage::Resonances) || has(Stage::Periods) {
        result.structure = Some(run_resonances(model, cfg, Some(&out))?);
    }
    if has(Stage::Normalform) || has(Stage::Periods) || has(Stage::Orbits) || has(Stage::Verify) {
        result.normalform = Some(run_normalform(model, cfg, Some(&out))?);
    }
    if has(Stage::Periods) || has(Stage::Orbits) || has(Stage::Verify) {
        let structure = result
            .structure
            .get_or_insert_with(|| detect_resonances(&model.freq, cfg.m_max, cfg.a_max, cfg.tolerances.relation, &model.declared).expect("resonance scan"));
        let nf = result.normalform.as_ref().unwrap();
        result.certificates = run_periods(model, structure, nf, cfg, Some(&out))?;
    }
    if has(Stage::Orbits) || has(Stage::Verify) {
        let nf = result.normalform.as_ref().unwrap();
        let orbits = run_orbits(model, nf, &result.certificates, cfg, Some(&out))?;
        result.orbits = Some(orbits);
    }
    if has(Stage::Verify) {
        let nf = result.normalform.as_ref().unwrap();
        let orbits = result.orbits.as_ref().unwrap();
        let verify = run_verify(nf, orbits, cfg, Some(&out))?;
        result.verify = Some(verify);
    }
    if let Some(orbits) = &result.orbits {
        write_summary(&out, orbits, result.verify.as_deref()).map_err(io_err)?;
    }
    Ok(result)
}
