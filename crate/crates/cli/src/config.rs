//! Pipeline configuration: a JSON file whose values are overridable by
//! command-line flags; all numeric defaults live here and are echoed into
//! every artifact.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Absolute small-divisor floor (combined with gamma/(1+|ell|^tau)).
    pub divisor_floor: f64,
    /// Contraction stop tolerance (sup-norm of one fixed-point step).
    pub contraction_stop: f64,
    /// Closure tolerance |I(T) - I(0)| for accepted orbits.
    pub closure: f64,
    /// Certification tolerance for detected/declared integer relations.
    pub relation: f64,
    /// Time-shift distinctness tolerance between returned orbits.
    pub distinct: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            divisor_floor: 1e-10,
            contraction_stop: 1e-15,
            closure: 1e-9,
            relation: 1e-9,
            distinct: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodRoute {
    A,
    B,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Melnikov,
    Resonances,
    Normalform,
    Periods,
    Orbits,
    Verify,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "melnikov" => Ok(Stage::Melnikov),
            "resonances" => Ok(Stage::Resonances),
            "normalform" => Ok(Stage::Normalform),
            "periods" => Ok(Stage::Periods),
            "orbits" => Ok(Stage::Orbits),
            "verify" => Ok(Stage::Verify),
            other => Err(format!("unknown stage {other}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: String,
    pub out: String,
    pub eta: Vec<f64>,
    /// Start of the period search; null means 1/eta^2 per eta.
    pub t0: Option<f64>,
    /// Ergodization budget of the shift search (flow-time units).
    pub budget: f64,
    pub degree_cap: Option<u32>,
    pub fourier_cap: Option<u32>,
    pub grid_per_dim: usize,
    pub points_per_period: f64,
    pub refine_factor: usize,
    pub melnikov_cutoff: u32,
    pub m_max: i64,
    pub a_max: i64,
    pub period_route: PeriodRoute,
    pub tolerances: Tolerances,
    pub stages: Vec<Stage>,
    pub threads: usize,
    pub seed: u64,
    /// Max rows written per orbit CSV (decimated uniformly).
    pub max_csv_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: String::new(),
            out: "out".into(),
            eta: vec![0.1],
            t0: None,
            budget: 1e5,
            degree_cap: None,
            fourier_cap: None,
            grid_per_dim: 12,
            points_per_period: 64.0,
            refine_factor: 4,
            melnikov_cutoff: 10,
            m_max: 12,
            a_max: 10,
            period_route: PeriodRoute::Auto,
            tolerances: Tolerances::default(),
            stages: vec![
                Stage::Melnikov,
                Stage::Resonances,
                Stage::Normalform,
                Stage::Periods,
                Stage::Orbits,
                Stage::Verify,
            ],
            threads: 0,
            seed: 0x5eed,
            max_csv_rows: 4096,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
