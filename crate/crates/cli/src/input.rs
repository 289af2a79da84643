//! Hamiltonian input file: the Taylor-Fourier coefficients of the
//! perturbation (weighted degree >= 3), the frequencies and Diophantine
//! constants, and optionally explicitly declared resonance relations.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use peritorus::resonance::{default_divisor_floor, FrequencyData, Relation};
use peritorus::tfseries::{TFSeries, TermJson, TermKey};

use num_complex::Complex64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationJson {
    /// 1-based index of the elliptic frequency the relation resolves.
    pub j: usize,
    #[serde(rename = "M")]
    pub m: i64,
    pub a: Vec<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub n: usize,
    pub m: usize,
    pub degree_cap: u32,
    pub fourier_cap: u32,
    pub omega: Vec<f64>,
    #[serde(rename = "Omega")]
    pub omega_elliptic: Vec<f64>,
    pub gamma: f64,
    pub tau: f64,
    #[serde(default = "default_divisor_floor")]
    pub divisor_floor: f64,
    pub terms: Vec<TermJson>,
    #[serde(default)]
    pub relations: Vec<RelationJson>,
}

pub struct LoadedModel {
    /// Perturbation terms only (degree >= 3).
    pub terms: TFSeries,
    pub freq: FrequencyData,
    pub declared: Vec<Relation>,
}

impl HamiltonianSpec {
    pub fn load(path: &std::path::Path) -> Result<HamiltonianSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read input file {}", path.display()))?;
        let spec: HamiltonianSpec =
            serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        Ok(spec)
    }

    pub fn into_model(self, degree_cap: Option<u32>, fourier_cap: Option<u32>) -> Result<LoadedModel> {
        if self.omega.len() != self.n || self.omega_elliptic.len() != self.m {
            bail!(
                "frequency lengths ({}, {}) do not match (n, m) = ({}, {})",
                self.omega.len(),
                self.omega_elliptic.len(),
                self.n,
                self.m
            );
        }
        if self.gamma <= 0.0 || self.tau <= 0.0 {
            bail!("gamma and tau must be positive");
        }
        let dcap = degree_cap.unwrap_or(self.degree_cap);
        let fcap = fourier_cap.unwrap_or(self.fourier_cap);
        let mut terms = TFSeries::zero(self.n, self.m, dcap, fcap);
        for t in &self.terms {
            if t.k.len() != self.n || t.ell.len() != self.n || t.a.len() != self.m || t.abar.len() != self.m {
                bail!("term exponent lengths do not match (n, m)");
            }
            let key = TermKey::new(t.k.clone(), t.a.clone(), t.abar.clone(), t.ell.clone());
            if key.degree() < 3 {
                bail!(
                    "perturbation terms must have weighted degree >= 3 (the linear part is given by omega, Omega); found {key}"
                );
            }
            if key.degree() > dcap {
                bail!("term {key} exceeds the degree cap {dcap}");
            }
            if key.ell_norm() > fcap {
                bail!("term {key} exceeds the Fourier cap {fcap}");
            }
            terms.insert(key, Complex64::new(t.re, t.im));
        }
        let reality = terms.check_reality();
        if !reality.passes(1e-12) {
            bail!(
                "input violates the reality condition by {:.3e} at {}",
                reality.max_violation,
                reality.worst_key.map(|k| k.to_string()).unwrap_or_default()
            );
        }
        terms.set_real_flag(true);
        let freq = FrequencyData {
            omega: self.omega,
            omega_elliptic: self.omega_elliptic,
            gamma: self.gamma,
            tau: self.tau,
            divisor_floor: self.divisor_floor,
        };
        let n_hat_full = |m_hat: usize| self.n + self.m - m_hat;
        let declared: Vec<Relation> = self
            .relations
            .iter()
            .map(|r| {
                if r.j == 0 || r.j > self.m {
                    bail!("relation index j = {} out of range 1..={}", r.j, self.m);
                }
                if r.m <= 0 {
                    bail!("relation modulus M must be positive");
                }
                Ok(Relation {
                    j: r.j - 1,
                    m_factor: r.m,
                    a: r.a.clone(),
                    residual: f64::NAN,
                })
            })
            .collect::<Result<_>>()?;
        if !declared.is_empty() {
            let expect = n_hat_full(declared.len());
            for rel in &declared {
                if rel.a.len() != expect {
                    bail!(
                        "relation a-vectors must have length n + m - m_hat = {expect}, got {}",
                        rel.a.len()
                    );
                }
            }
        }
        Ok(LoadedModel {
            terms,
            freq,
            declared,
        })
    }
}
