//! Batch pipeline for periodic orbits near elliptic invariant tori: ingest a
//! Hamiltonian specification, run the melnikov / resonances / normalform /
//! periods / orbits / verify stages and emit machine-readable artifacts.

mod config;
mod input;
mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{PeriodRoute, PipelineConfig, Stage};
use input::HamiltonianSpec;
use pipeline::{exit_code, StageError};

#[derive(Parser)]
#[command(name = "peritorus", version, about = "periodic orbits accumulating on elliptic invariant tori")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// Hamiltonian input file (JSON).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory for the artifact tree.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rescaling parameters, comma separated.
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Start of the period search (default 1/eta^2).
    #[arg(long)]
    t0: Option<f64>,
    /// Ergodization budget of the shift search.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long = "degree-cap")]
    degree_cap: Option<u32>,
    #[arg(long = "fourier-cap")]
    fourier_cap: Option<u32>,
    /// Grid points per quotient-torus dimension in the critical-point scan.
    #[arg(long)]
    grid: Option<usize>,
    /// Period selection route: a, b or auto.
    #[arg(long)]
    route: Option<String>,
    #[arg(long = "tol-closure")]
    tol_closure: Option<f64>,
    #[arg(long = "tol-contraction")]
    tol_contraction: Option<f64>,
    #[arg(long = "tol-divisor")]
    tol_divisor: Option<f64>,
    #[arg(long = "tol-relation")]
    tol_relation: Option<f64>,
    #[arg(long = "tol-distinct")]
    tol_distinct: Option<f64>,
    /// Stages to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(v) = &self.input {
            cfg.input = v.display().to_string();
        }
        if let Some(v) = &self.out {
            cfg.out = v.display().to_string();
        }
        if let Some(v) = &self.eta {
            cfg.eta = v.clone();
        }
        if let Some(v) = self.t0 {
            cfg.t0 = Some(v);
        }
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = self.degree_cap {
            cfg.degree_cap = Some(v);
        }
        if let Some(v) = self.fourier_cap {
            cfg.fourier_cap = Some(v);
        }
        if let Some(v) = self.grid {
            cfg.grid_per_dim = v;
        }
        if let Some(v) = &self.route {
            cfg.period_route = match v.as_str() {
                "a" => PeriodRoute::A,
                "b" => PeriodRoute::B,
                "auto" => PeriodRoute::Auto,
                other => anyhow::bail!("unknown period route {other}"),
            };
        }
        if let Some(v) = self.tol_closure {
            cfg.tolerances.closure = v;
        }
        if let Some(v) = self.tol_contraction {
            cfg.tolerances.contraction_stop = v;
        }
        if let Some(v) = self.tol_divisor {
            cfg.tolerances.divisor_floor = v;
        }
        if let Some(v) = self.tol_relation {
            cfg.tolerances.relation = v;
        }
        if let Some(v) = self.tol_distinct {
            cfg.tolerances.distinct = v;
        }
        if let Some(v) = &self.stages {
            cfg.stages = v.clone();
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline (all configured stages).
    Run {
        /// Pipeline configuration file (JSON); flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Second-order Melnikov non-resonance scan.
    Melnikov {
        #[command(flatten)]
        overrides: Overrides,
        /// Fourier cutoff of the scan.
        #[arg(long, default_value_t = 10)]
        cutoff: u32,
    },
    /// Integer-relation detection among the frequencies.
    Resonances {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Third-order averaged normal form, twist and coupling matrices.
    Normalform {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Certified non-resonant period selection.
    Periods {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Construct and refine periodic orbits at the certified periods.
    Orbits {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Reintegrate stored orbits with an independent integrator.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Admissible mass-parameter window for a given period.
    Window {
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        c1: f64,
        #[arg(long, default_value_t = 1.0)]
        c2: f64,
        #[arg(long, default_value_t = 1.0)]
        c3: f64,
        #[arg(long, default_value_t = 1.0)]
        eps1: f64,
        /// Also locate the largest T with an empty window.
        #[arg(long)]
        crossing: bool,
    },
}

fn build_config(config_path: Option<&PathBuf>, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match config_path {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    if cfg.input.is_empty() {
        anyhow::bail!("no input file given (--input or config.input)");
    }
    Ok(cfg)
}

fn load_model(cfg: &PipelineConfig) -> Result<(input::LoadedModel, PipelineConfig)> {
    let spec = HamiltonianSpec::load(std::path::Path::new(&cfg.input))?;
    let mut spec = spec;
    spec.divisor_floor = cfg.tolerances.divisor_floor;
    let model = spec.into_model(cfg.degree_cap, cfg.fourier_cap)?;
    Ok((model, cfg.clone()))
}

fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn dispatch(command: Command) -> Result<(), StageError> {
    let parse_fail = |e: anyhow::Error| StageError {
        code: exit_code::PARSE,
        message: e.to_string(),
    };
    match command {
        Command::Run { config, overrides } => {
            let cfg = build_config(config.as_ref(), &overrides).map_err(parse_fail)?;
            init_threads(cfg.threads);
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let result = pipeline::run_pipeline(&model, &cfg)?;
            println!("pipeline complete: artifacts in {}", cfg.out);
            if let Some(orbits) = &result.orbits {
                println!("  {} orbit(s) constructed", orbits.solutions.len());
            }
            Ok(())
        }
        Command::Melnikov { overrides, cutoff } => {
            let cfg = build_config(None, &overrides).map_err(parse_fail)?;
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let report = pipeline::run_melnikov(&model, cutoff, Some(std::path::Path::new(&cfg.out)));
            match report {
                Ok(rep) => {
                    println!("{}", serde_json::to_string_pretty(&rep).unwrap());
                    Ok(())
                }
                Err(e) => Err(e),
            }
        }
        Command::Resonances { overrides } => {
            let cfg = build_config(None, &overrides).map_err(parse_fail)?;
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let st = pipeline::run_resonances(&model, &cfg, Some(std::path::Path::new(&cfg.out)))?;
            println!("{}", serde_json::to_string_pretty(&st).unwrap());
            Ok(())
        }
        Command::Normalform { overrides } => {
            let cfg = build_config(None, &overrides).map_err(parse_fail)?;
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let nf = pipeline::run_normalform(&model, &cfg, Some(std::path::Path::new(&cfg.out)))?;
            println!(
                "normal form written; det(twist) = {:.6e}, eliminated-class residual = {:.3e}",
                nf.twist.determinant(),
                nf.diagnostics.eliminated_residual
            );
            Ok(())
        }
        Command::Periods { overrides } => {
            let cfg = build_config(None, &overrides).map_err(parse_fail)?;
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let st = pipeline::run_resonances(&model, &cfg, Some(std::path::Path::new(&cfg.out)))?;
            let nf = pipeline::run_normalform(&model, &cfg, Some(std::path::Path::new(&cfg.out)))?;
            let records =
                pipeline::run_periods(&model, &st, &nf, &cfg, Some(std::path::Path::new(&cfg.out)))?;
            println!("{}", serde_json::to_string_pretty(&records).unwrap());
            Ok(())
        }
        Command::Orbits { overrides } => {
            let cfg = build_config(None, &overrides).map_err(parse_fail)?;
            init_threads(cfg.threads);
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let out = std::path::Path::new(&cfg.out);
            let st = pipeline::run_resonances(&model, &cfg, Some(out))?;
            let nf = pipeline::run_normalform(&model, &cfg, Some(out))?;
            let certs = pipeline::run_periods(&model, &st, &nf, &cfg, Some(out))?;
            let orbits = pipeline::run_orbits(&model, &nf, &certs, &cfg, Some(out))?;
            pipeline::write_summary(out, &orbits, None).map_err(|e| StageError {
                code: exit_code::PARSE,
                message: e.to_string(),
            })?;
            println!("{} orbit(s) written to {}", orbits.solutions.len(), cfg.out);
            Ok(())
        }
        Command::Verify { overrides } => {
            let cfg = build_config(None, &overrides).map_err(parse_fail)?;
            init_threads(cfg.threads);
            let (model, cfg) = load_model(&cfg).map_err(parse_fail)?;
            let out = std::path::Path::new(&cfg.out);
            let st = pipeline::run_resonances(&model, &cfg, Some(out))?;
            let nf = pipeline::run_normalform(&model, &cfg, Some(out))?;
            let certs = pipeline::run_periods(&model, &st, &nf, &cfg, Some(out))?;
            let orbits = pipeline::run_orbits(&model, &nf, &certs, &cfg, Some(out))?;
            let verify = pipeline::run_verify(&nf, &orbits, &cfg, Some(out))?;
            pipeline::write_summary(out, &orbits, Some(&verify)).map_err(|e| StageError {
                code: exit_code::PARSE,
                message: e.to_string(),
            })?;
            println!("{} orbit(s) verified", verify.len());
            Ok(())
        }
        Command::Window {
            t,
            c1,
            c2,
            c3,
            eps1,
            crossing,
        } => {
            let (lo, hi) = peritorus::resonance::epsilon_window(t, c1, c2, c3, eps1);
            let cross = if crossing {
                peritorus::resonance::window_crossing(c1, c2, c3, eps1)
            } else {
                None
            };
            let artifact = serde_json::json!({
                "T": t,
                "eps_lo": lo,
                "eps_hi": hi,
                "empty": lo > hi,
                "crossing_T0": cross,
            });
            println!("{}", serde_json::to_string_pretty(&artifact).unwrap());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {}", err.message);
            std::process::exit(err.code);
        }
    }
}
