//! Truncated Taylor-Fourier series in n action variables, n angles and m
//! pairs of complex elliptic coordinates.
//!
//! A series is a finite sum of monomials
//! `c * I^k * z^a * zbar^abar * exp(i ell.phi)` stored sparsely in a
//! `BTreeMap` keyed by the exponent tuple. The weighted degree of a key is
//! `2|k| + |a| + |abar|`; series are kept truncated to a degree cap and a
//! Fourier cap `|ell|_1`. Coefficients below `DROP_TOL` are removed so the
//! stored form is canonical.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};

/// Magnitude below which stored coefficients are dropped.
pub const DROP_TOL: f64 = 1e-15;

/// Tolerance used when deciding whether a series is real-valued.
pub const REALITY_TOL: f64 = 1e-12;

/// Exponent tuple of one monomial.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermKey {
    /// Action exponents, length n.
    pub k: Vec<u32>,
    /// Elliptic exponents of z, length m.
    pub a: Vec<u32>,
    /// Elliptic exponents of zbar, length m.
    pub abar: Vec<u32>,
    /// Fourier mode, length n.
    pub ell: Vec<i32>,
}

impl TermKey {
    pub fn new(k: Vec<u32>, a: Vec<u32>, abar: Vec<u32>, ell: Vec<i32>) -> Self {
        TermKey { k, a, abar, ell }
    }

    /// Weighted degree 2|k| + |a + abar|.
    pub fn degree(&self) -> u32 {
        2 * self.k.iter().sum::<u32>() + self.a.iter().sum::<u32>() + self.abar.iter().sum::<u32>()
    }

    /// l1 norm of the Fourier mode.
    pub fn ell_norm(&self) -> u32 {
        self.ell.iter().map(|e| e.unsigned_abs()).sum()
    }

    /// Key of the reality partner: swap a and abar, negate ell.
    pub fn conjugate_partner(&self) -> TermKey {
        TermKey {
            k: self.k.clone(),
            a: self.abar.clone(),
            abar: self.a.clone(),
            ell: self.ell.iter().map(|e| -e).collect(),
        }
    }
}

impl fmt::Display for TermKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(k={:?}, a={:?}, abar={:?}, ell={:?})",
            self.k, self.a, self.abar, self.ell
        )
    }
}

/// Report of a reality-condition scan, see [`TFSeries::check_reality`].
#[derive(Debug, Clone)]
pub struct RealityReport {
    pub max_violation: f64,
    pub worst_key: Option<TermKey>,
}

impl RealityReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

/// Sparse truncated Taylor-Fourier series.
#[derive(Debug, Clone)]
pub struct TFSeries {
    n: usize,
    m: usize,
    degree_cap: u32,
    fourier_cap: u32,
    terms: BTreeMap<TermKey, Complex64>,
    real_flagged: bool,
    /// Number of monomials discarded by cap truncation while building this value.
    truncation_loss: u64,
    /// Largest coefficient magnitude discarded by cap truncation.
    max_dropped: f64,
}

impl TFSeries {
    pub fn zero(n: usize, m: usize, degree_cap: u32, fourier_cap: u32) -> Self {
        TFSeries {
            n,
            m,
            degree_cap,
            fourier_cap,
            terms: BTreeMap::new(),
            real_flagged: true,
            truncation_loss: 0,
            max_dropped: 0.0,
        }
    }

    pub fn constant(n: usize, m: usize, degree_cap: u32, fourier_cap: u32, c: Complex64) -> Self {
        let mut s = Self::zero(n, m, degree_cap, fourier_cap);
        s.insert(TermKey::new(vec![0; n], vec![0; m], vec![0; m], vec![0; n]), c);
        s.real_flagged = c.im.abs() <= REALITY_TOL;
        s
    }

    /// The monomial I_i.
    pub fn action(n: usize, m: usize, degree_cap: u32, fourier_cap: u32, i: usize) -> Self {
        let mut s = Self::zero(n, m, degree_cap, fourier_cap);
        let mut k = vec![0; n];
        k[i] = 1;
        s.insert(TermKey::new(k, vec![0; m], vec![0; m], vec![0; n]), Complex64::new(1.0, 0.0));
        s
    }

    /// The monomial exp(i ell.phi).
    pub fn fourier_mode(n: usize, m: usize, degree_cap: u32, fourier_cap: u32, ell: Vec<i32>) -> Self {
        let mut s = Self::zero(n, m, degree_cap, fourier_cap);
        s.insert(TermKey::new(vec![0; n], vec![0; m], vec![0; m], ell), Complex64::new(1.0, 0.0));
        s.real_flagged = false;
        s
    }

    /// The monomial z_j.
    pub fn elliptic(n: usize, m: usize, degree_cap: u32, fourier_cap: u32, j: usize) -> Self {
        let mut s = Self::zero(n, m, degree_cap, fourier_cap);
        let mut a = vec![0; m];
        a[j] = 1;
        s.insert(TermKey::new(vec![0; n], a, vec![0; m], vec![0; n]), Complex64::new(1.0, 0.0));
        s.real_flagged = false;
        s
    }

    /// The monomial zbar_j.
    pub fn elliptic_bar(n: usize, m: usize, degree_cap: u32, fourier_cap: u32, j: usize) -> Self {
        let mut s = Self::zero(n, m, degree_cap, fourier_cap);
        let mut abar = vec![0; m];
        abar[j] = 1;
        s.insert(TermKey::new(vec![0; n], vec![0; m], abar, vec![0; n]), Complex64::new(1.0, 0.0));
        s.real_flagged = false;
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn degree_cap(&self) -> u32 {
        self.degree_cap
    }

    pub fn fourier_cap(&self) -> u32 {
        self.fourier_cap
    }

    pub fn is_real_flagged(&self) -> bool {
        self.real_flagged
    }

    pub fn set_real_flag(&mut self, flag: bool) {
        self.real_flagged = flag;
    }

    pub fn truncation_loss(&self) -> u64 {
        self.truncation_loss
    }

    pub fn max_dropped(&self) -> f64 {
        self.max_dropped
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TermKey, &Complex64)> {
        self.terms.iter()
    }

    pub fn coeff(&self, key: &TermKey) -> Complex64 {
        self.terms.get(key).copied().unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Insert `c` additively at `key`, truncating against the caps and
    /// dropping canonical-form dust.
    pub fn insert(&mut self, key: TermKey, c: Complex64) {
        debug_assert_eq!(key.k.len(), self.n);
        debug_assert_eq!(key.a.len(), self.m);
        debug_assert_eq!(key.abar.len(), self.m);
        debug_assert_eq!(key.ell.len(), self.n);
        if c.norm() == 0.0 {
            return;
        }
        if key.degree() > self.degree_cap || key.ell_norm() > self.fourier_cap {
            self.truncation_loss += 1;
            self.max_dropped = self.max_dropped.max(c.norm());
            return;
        }
        let entry = self.terms.entry(key.clone()).or_insert(Complex64::new(0.0, 0.0));
        *entry += c;
        if entry.norm() < DROP_TOL {
            self.terms.remove(&key);
        }
    }

    fn check_same_shape(&self, other: &TFSeries) -> CoreResult<()> {
        if self.n != other.n || self.m != other.m {
            return Err(CoreError::DimensionMismatch(format!(
                "(n, m) = ({}, {}) vs ({}, {})",
                self.n, self.m, other.n, other.m
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &TFSeries) -> CoreResult<TFSeries> {
        self.check_same_shape(other)?;
        let mut out = TFSeries::zero(
            self.n,
            self.m,
            self.degree_cap.min(other.degree_cap),
            self.fourier_cap.min(other.fourier_cap),
        );
        for (key, c) in self.terms.iter().chain(other.terms.iter()) {
            out.insert(key.clone(), *c);
        }
        out.real_flagged = self.real_flagged && other.real_flagged;
        Ok(out)
    }

    pub fn sub(&self, other: &TFSeries) -> CoreResult<TFSeries> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for (key, v) in &self.terms {
            out.insert(key.clone(), v * c);
        }
        out.real_flagged = self.real_flagged && c.im == 0.0;
        out
    }

    pub fn mul(&self, other: &TFSeries) -> CoreResult<TFSeries> {
        self.check_same_shape(other)?;
        let mut out = TFSeries::zero(
            self.n,
            self.m,
            self.degree_cap.min(other.degree_cap),
            self.fourier_cap.min(other.fourier_cap),
        );
        for (k1, c1) in &self.terms {
            for (k2, c2) in &other.terms {
                let key = TermKey {
                    k: k1.k.iter().zip(&k2.k).map(|(x, y)| x + y).collect(),
                    a: k1.a.iter().zip(&k2.a).map(|(x, y)| x + y).collect(),
                    abar: k1.abar.iter().zip(&k2.abar).map(|(x, y)| x + y).collect(),
                    ell: k1.ell.iter().zip(&k2.ell).map(|(x, y)| x + y).collect(),
                };
                out.insert(key, c1 * c2);
            }
        }
        out.real_flagged = self.real_flagged && other.real_flagged;
        Ok(out)
    }

    /// Poisson bracket {self, other} with the convention
    /// `{f, g} = d_phi f . d_I g - d_I f . d_phi g + i d_z f . d_zbar g - i d_zbar f . d_z g`,
    /// evaluated term-pairwise through the closed monomial formula.
    pub fn poisson_bracket(&self, other: &TFSeries) -> CoreResult<TFSeries> {
        self.check_same_shape(other)?;
        let mut out = TFSeries::zero(
            self.n,
            self.m,
            self.degree_cap.min(other.degree_cap),
            self.fourier_cap.min(other.fourier_cap),
        );
        let i_unit = Complex64::new(0.0, 1.0);
        for (k1, c1) in &self.terms {
            for (k2, c2) in &other.terms {
                let cc = i_unit * c1 * c2;
                // Angle-action part: sum_i (ell_i k'_i - ell'_i k_i) I^(k+k'-e_i).
                for i in 0..self.n {
                    let factor = k1.ell[i] as f64 * k2.k[i] as f64 - k2.ell[i] as f64 * k1.k[i] as f64;
                    if factor == 0.0 {
                        continue;
                    }
                    let mut k = Vec::with_capacity(self.n);
                    for (idx, (x, y)) in k1.k.iter().zip(&k2.k).enumerate() {
                        let s = x + y;
                        k.push(if idx == i { s - 1 } else { s });
                    }
                    let key = TermKey {
                        k,
                        a: k1.a.iter().zip(&k2.a).map(|(x, y)| x + y).collect(),
                        abar: k1.abar.iter().zip(&k2.abar).map(|(x, y)| x + y).collect(),
                        ell: k1.ell.iter().zip(&k2.ell).map(|(x, y)| x + y).collect(),
                    };
                    out.insert(key, cc * factor);
                }
                // Elliptic part: sum_j (a_j abar'_j - abar_j a'_j) z^(a+a'-e_j) zbar^(abar+abar'-e_j).
                for j in 0..self.m {
                    let factor =
                        k1.a[j] as f64 * k2.abar[j] as f64 - k1.abar[j] as f64 * k2.a[j] as f64;
                    if factor == 0.0 {
                        continue;
                    }
                    let mut a = Vec::with_capacity(self.m);
                    let mut abar = Vec::with_capacity(self.m);
                    for (idx, ((x, y), (xb, yb))) in k1
                        .a
                        .iter()
                        .zip(&k2.a)
                        .zip(k1.abar.iter().zip(&k2.abar))
                        .enumerate()
                    {
                        let s = x + y;
                        let sb = xb + yb;
                        a.push(if idx == j { s - 1 } else { s });
                        abar.push(if idx == j { sb - 1 } else { sb });
                    }
                    let key = TermKey {
                        k: k1.k.iter().zip(&k2.k).map(|(x, y)| x + y).collect(),
                        a,
                        abar,
                        ell: k1.ell.iter().zip(&k2.ell).map(|(x, y)| x + y).collect(),
                    };
                    out.insert(key, cc * factor);
                }
            }
        }
        out.real_flagged = self.real_flagged && other.real_flagged;
        Ok(out)
    }

    /// Keep exactly the terms whose key satisfies the predicate.
    pub fn project<F: Fn(&TermKey) -> bool>(&self, selector: F) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for (key, c) in &self.terms {
            if selector(key) {
                out.terms.insert(key.clone(), *c);
            }
        }
        out.real_flagged = self.real_flagged;
        out
    }

    /// Terms of one weighted degree.
    pub fn degree_slice(&self, d: u32) -> TFSeries {
        self.project(|key| key.degree() == d)
    }

    /// Max over stored keys of |conj(c(k,a,abar,ell)) - c(k,abar,a,-ell)|.
    pub fn check_reality(&self) -> RealityReport {
        let mut max_violation: f64 = 0.0;
        let mut worst_key = None;
        for (key, c) in &self.terms {
            let partner = self.coeff(&key.conjugate_partner());
            let violation = (c.conj() - partner).norm();
            if violation > max_violation {
                max_violation = violation;
                worst_key = Some(key.clone());
            }
        }
        RealityReport {
            max_violation,
            worst_key,
        }
    }

    /// Evaluate at a point, with zbar taken as the complex conjugate of z.
    pub fn evaluate(&self, actions: &[f64], angles: &[f64], z: &[Complex64]) -> CoreResult<Complex64> {
        if actions.len() != self.n || angles.len() != self.n || z.len() != self.m {
            return Err(CoreError::DimensionMismatch(format!(
                "evaluate: got ({}, {}, {}) for (n, m) = ({}, {})",
                actions.len(),
                angles.len(),
                z.len(),
                self.n,
                self.m
            )));
        }
        let zbar: Vec<Complex64> = z.iter().map(|w| w.conj()).collect();
        let mut total = Complex64::new(0.0, 0.0);
        for (key, c) in &self.terms {
            let mut v = *c;
            for (i, &e) in key.k.iter().enumerate() {
                v *= actions[i].powi(e as i32);
            }
            for (j, &e) in key.a.iter().enumerate() {
                v *= z[j].powu(e);
            }
            for (j, &e) in key.abar.iter().enumerate() {
                v *= zbar[j].powu(e);
            }
            let phase: f64 = key
                .ell
                .iter()
                .zip(angles)
                .map(|(&l, &phi)| l as f64 * phi)
                .sum();
            v *= Complex64::new(0.0, phase).exp();
            total += v;
        }
        Ok(total)
    }

    pub fn diff_action(&self, i: usize) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for (key, c) in &self.terms {
            if key.k[i] == 0 {
                continue;
            }
            let mut k = key.k.clone();
            let e = k[i];
            k[i] -= 1;
            out.insert(
                TermKey::new(k, key.a.clone(), key.abar.clone(), key.ell.clone()),
                c * e as f64,
            );
        }
        out.real_flagged = self.real_flagged;
        out
    }

    pub fn diff_angle(&self, i: usize) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for (key, c) in &self.terms {
            if key.ell[i] == 0 {
                continue;
            }
            out.insert(key.clone(), c * Complex64::new(0.0, key.ell[i] as f64));
        }
        out.real_flagged = false;
        out
    }

    pub fn diff_z(&self, j: usize) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for (key, c) in &self.terms {
            if key.a[j] == 0 {
                continue;
            }
            let mut a = key.a.clone();
            let e = a[j];
            a[j] -= 1;
            out.insert(
                TermKey::new(key.k.clone(), a, key.abar.clone(), key.ell.clone()),
                c * e as f64,
            );
        }
        out.real_flagged = false;
        out
    }

    pub fn diff_zbar(&self, j: usize) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for (key, c) in &self.terms {
            if key.abar[j] == 0 {
                continue;
            }
            let mut abar = key.abar.clone();
            let e = abar[j];
            abar[j] -= 1;
            out.insert(
                TermKey::new(key.k.clone(), key.a.clone(), abar, key.ell.clone()),
                c * e as f64,
            );
        }
        out.real_flagged = false;
        out
    }

    /// Component series of the Hamiltonian vector field
    /// `(Idot, phidot, zdot) = (-d_phi H, d_I H, i d_zbar H)`.
    pub fn hamiltonian_vector_field(&self) -> VectorFieldSeries {
        let idot = (0..self.n)
            .map(|i| self.diff_angle(i).scale(Complex64::new(-1.0, 0.0)))
            .collect();
        let phidot = (0..self.n).map(|i| self.diff_action(i)).collect();
        let zdot = (0..self.m)
            .map(|j| self.diff_zbar(j).scale(Complex64::new(0.0, 1.0)))
            .collect();
        VectorFieldSeries {
            n: self.n,
            m: self.m,
            idot,
            phidot,
            zdot,
        }
    }

    /// Polydisc majorant of the sup-Fourier norm:
    /// `sum_ell ( sum_{k,a,abar} |c| r^|k| rho^|a+abar| ) e^(|ell|_1 s)`.
    pub fn sup_fourier_norm(&self, r: f64, rho: f64, s: f64) -> f64 {
        assert!(r > 0.0 && rho > 0.0 && s > 0.0, "norm radii must be positive");
        let mut by_mode: BTreeMap<&[i32], f64> = BTreeMap::new();
        for (key, c) in &self.terms {
            let w = c.norm()
                * r.powi(key.k.iter().sum::<u32>() as i32)
                * rho.powi((key.a.iter().sum::<u32>() + key.abar.iter().sum::<u32>()) as i32);
            *by_mode.entry(key.ell.as_slice()).or_insert(0.0) += w;
        }
        by_mode
            .iter()
            .map(|(ell, w)| {
                let l1: u32 = ell.iter().map(|e| e.unsigned_abs()).sum();
                w * (l1 as f64 * s).exp()
            })
            .sum()
    }

    /// Largest coefficient magnitude.
    pub fn max_coeff(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Sum of coefficient magnitudes.
    pub fn l1_coeff(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).sum()
    }

    /// Max coefficient-wise distance to another series over the union of keys.
    pub fn max_coeff_distance(&self, other: &TFSeries) -> f64 {
        let mut d: f64 = 0.0;
        for (key, c) in &self.terms {
            d = d.max((c - other.coeff(key)).norm());
        }
        for (key, c) in &other.terms {
            d = d.max((c - self.coeff(key)).norm());
        }
        d
    }

    /// Rebuild with new caps (used to give bracket-heavy computations slack).
    pub fn with_caps(&self, degree_cap: u32, fourier_cap: u32) -> TFSeries {
        let mut out = TFSeries::zero(self.n, self.m, degree_cap, fourier_cap);
        for (key, c) in &self.terms {
            out.insert(key.clone(), *c);
        }
        out.real_flagged = self.real_flagged;
        out
    }
}

/// The (n + n + m) component series of a Hamiltonian vector field.
#[derive(Debug, Clone)]
pub struct VectorFieldSeries {
    pub n: usize,
    pub m: usize,
    pub idot: Vec<TFSeries>,
    pub phidot: Vec<TFSeries>,
    pub zdot: Vec<TFSeries>,
}

impl VectorFieldSeries {
    /// Evaluate all components at a phase-space point.
    pub fn evaluate(
        &self,
        actions: &[f64],
        angles: &[f64],
        z: &[Complex64],
    ) -> CoreResult<(Vec<f64>, Vec<f64>, Vec<Complex64>)> {
        let mut idot = Vec::with_capacity(self.n);
        let mut phidot = Vec::with_capacity(self.n);
        let mut zdot = Vec::with_capacity(self.m);
        for s in &self.idot {
            idot.push(s.evaluate(actions, angles, z)?.re);
        }
        for s in &self.phidot {
            phidot.push(s.evaluate(actions, angles, z)?.re);
        }
        for s in &self.zdot {
            zdot.push(s.evaluate(actions, angles, z)?);
        }
        Ok((idot, phidot, zdot))
    }
}

/// JSON shape of one stored term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermJson {
    pub k: Vec<u32>,
    pub a: Vec<u32>,
    pub abar: Vec<u32>,
    pub ell: Vec<i32>,
    pub re: f64,
    pub im: f64,
}

/// JSON shape of a whole series; the wire format of the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TFSeriesJson {
    pub n: usize,
    pub m: usize,
    pub degree_cap: u32,
    pub fourier_cap: u32,
    pub terms: Vec<TermJson>,
}

impl From<&TFSeries> for TFSeriesJson {
    fn from(s: &TFSeries) -> Self {
        TFSeriesJson {
            n: s.n,
            m: s.m,
            degree_cap: s.degree_cap,
            fourier_cap: s.fourier_cap,
            terms: s
                .terms
                .iter()
                .map(|(key, c)| TermJson {
                    k: key.k.clone(),
                    a: key.a.clone(),
                    abar: key.abar.clone(),
                    ell: key.ell.clone(),
                    re: c.re,
                    im: c.im,
                })
                .collect(),
        }
    }
}

impl TFSeriesJson {
    pub fn into_series(self) -> CoreResult<TFSeries> {
        let mut s = TFSeries::zero(self.n, self.m, self.degree_cap, self.fourier_cap);
        for t in self.terms {
            if t.k.len() != self.n || t.ell.len() != self.n || t.a.len() != self.m || t.abar.len() != self.m {
                return Err(CoreError::InvalidInput(format!(
                    "term exponent lengths do not match (n, m) = ({}, {})",
                    self.n, self.m
                )));
            }
            s.insert(TermKey::new(t.k, t.a, t.abar, t.ell), Complex64::new(t.re, t.im));
        }
        s.real_flagged = s.check_reality().passes(REALITY_TOL);
        Ok(s)
    }
}

impl Serialize for TFSeries {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TFSeriesJson::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TFSeries {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = TFSeriesJson::deserialize(deserializer)?;
        json.into_series().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_series(rng: &mut ChaCha8Rng, n: usize, m: usize, deg: u32, caps: (u32, u32)) -> TFSeries {
        let mut s = TFSeries::zero(n, m, caps.0, caps.1);
        for _ in 0..8 {
            let k: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let a: Vec<u32> = (0..m).map(|_| rng.gen_range(0..=1)).collect();
            let abar: Vec<u32> = (0..m).map(|_| rng.gen_range(0..=1)).collect();
            let ell: Vec<i32> = (0..n).map(|_| rng.gen_range(-2..=2)).collect();
            let key = TermKey::new(k, a, abar, ell);
            if key.degree() > deg {
                continue;
            }
            s.insert(key, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        s
    }

    /// Symmetrize a random series so it satisfies the reality condition.
    fn random_real_series(rng: &mut ChaCha8Rng, n: usize, m: usize, deg: u32, caps: (u32, u32)) -> TFSeries {
        let s = random_series(rng, n, m, deg, caps);
        let mut out = TFSeries::zero(n, m, caps.0, caps.1);
        for (key, c) in s.iter() {
            out.insert(key.clone(), 0.5 * c);
            out.insert(key.conjugate_partner(), 0.5 * c.conj());
        }
        out.real_flagged = true;
        out
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_series(&mut rng, 2, 1, 4, (6, 8));
        let zero = TFSeries::zero(2, 1, 6, 8);
        let sum = f.add(&zero).unwrap();
        assert_eq!(sum.max_coeff_distance(&f), 0.0);
    }

    #[test]
    fn monomial_product() {
        let i1 = TFSeries::action(2, 1, 6, 8, 0);
        let p = i1.mul(&i1).unwrap();
        assert_eq!(p.len(), 1);
        let key = TermKey::new(vec![2, 0], vec![0], vec![0], vec![0, 0]);
        assert_eq!(p.coeff(&key), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn z_zbar_product_preserves_reality() {
        let z1 = TFSeries::elliptic(1, 1, 6, 8, 0);
        let zb1 = TFSeries::elliptic_bar(1, 1, 6, 8, 0);
        let p = z1.mul(&zb1).unwrap();
        let key = TermKey::new(vec![0], vec![1], vec![1], vec![0]);
        assert_eq!(p.coeff(&key), Complex64::new(1.0, 0.0));
        // z1 * zbar1 is real-valued even though the factors are not flagged
        assert!(p.check_reality().passes(0.0));
    }

    #[test]
    fn mul_truncation_is_counted() {
        let i1 = TFSeries::action(1, 0, 2, 4, 0);
        let sq = i1.mul(&i1).unwrap();
        // degree 4 > cap 2: dropped, counted
        assert!(sq.is_zero());
        assert_eq!(sq.truncation_loss(), 1);
        assert_eq!(sq.max_dropped(), 1.0);
    }

    #[test]
    fn bracket_antisymmetry_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let f = random_series(&mut rng, 2, 2, 4, (12, 16));
            let ff = f.poisson_bracket(&f).unwrap();
            assert!(ff.max_coeff() <= 1e-12, "{{f,f}} = {:.3e}", ff.max_coeff());
            let g = random_series(&mut rng, 2, 2, 4, (12, 16));
            let fg = f.poisson_bracket(&g).unwrap();
            let gf = g.poisson_bracket(&f).unwrap();
            assert!(fg.add(&gf).unwrap().max_coeff() <= 1e-12);
        }
    }

    #[test]
    fn bracket_exp_phi_with_action() {
        // n=1, m=0: {e^{i phi}, I} = i e^{i phi}
        let e = TFSeries::fourier_mode(1, 0, 6, 8, vec![1]);
        let i1 = TFSeries::action(1, 0, 6, 8, 0);
        let b = e.poisson_bracket(&i1).unwrap();
        let key = TermKey::new(vec![0], vec![], vec![], vec![1]);
        assert_eq!(b.len(), 1);
        assert!((b.coeff(&key) - Complex64::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn bracket_zzbar_with_z() {
        // m=1: {z zbar, z} = -i z
        let z = TFSeries::elliptic(0, 1, 6, 8, 0);
        let zb = TFSeries::elliptic_bar(0, 1, 6, 8, 0);
        let zzb = z.mul(&zb).unwrap();
        let b = zzb.poisson_bracket(&z).unwrap();
        let key = TermKey::new(vec![], vec![1], vec![0], vec![]);
        assert_eq!(b.len(), 1);
        assert!((b.coeff(&key) - Complex64::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn canonical_pair_bracket() {
        // {e^{i phi_j}, I_i} = i delta_ij e^{i phi_j}
        for i in 0..2 {
            for j in 0..2 {
                let mut ell = vec![0, 0];
                ell[j] = 1;
                let e = TFSeries::fourier_mode(2, 0, 6, 8, ell.clone());
                let ii = TFSeries::action(2, 0, 6, 8, i);
                let b = e.poisson_bracket(&ii).unwrap();
                let key = TermKey::new(vec![0, 0], vec![], vec![], ell);
                let expected = if i == j {
                    Complex64::new(0.0, 1.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert!((b.coeff(&key) - expected).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn oscillator_action_is_invariant() {
        // {z_j zbar_j, Omega z zbar} = 0
        let z = TFSeries::elliptic(0, 2, 6, 8, 0);
        let zb = TFSeries::elliptic_bar(0, 2, 6, 8, 0);
        let zzb = z.mul(&zb).unwrap();
        let mut h = TFSeries::zero(0, 2, 6, 8);
        h = h.add(&zzb.scale(Complex64::new(1.3, 0.0))).unwrap();
        let z2 = TFSeries::elliptic(0, 2, 6, 8, 1);
        let zb2 = TFSeries::elliptic_bar(0, 2, 6, 8, 1);
        h = h.add(&z2.mul(&zb2).unwrap().scale(Complex64::new(0.7, 0.0))).unwrap();
        let b = zzb.poisson_bracket(&h).unwrap();
        assert!(b.max_coeff() <= 1e-15);
    }

    #[test]
    fn jacobi_and_leibniz_with_slack_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let f = random_series(&mut rng, 2, 1, 3, (16, 24));
            let g = random_series(&mut rng, 2, 1, 3, (16, 24));
            let h = random_series(&mut rng, 2, 1, 3, (16, 24));
            let jac = f
                .poisson_bracket(&g.poisson_bracket(&h).unwrap())
                .unwrap()
                .add(&g.poisson_bracket(&h.poisson_bracket(&f).unwrap()).unwrap())
                .unwrap()
                .add(&h.poisson_bracket(&f.poisson_bracket(&g).unwrap()).unwrap())
                .unwrap();
            assert!(jac.max_coeff() <= 1e-12, "jacobi residual {:.3e}", jac.max_coeff());
            let lhs = f.poisson_bracket(&g.mul(&h).unwrap()).unwrap();
            let rhs = f
                .poisson_bracket(&g)
                .unwrap()
                .mul(&h)
                .unwrap()
                .add(&g.mul(&f.poisson_bracket(&h).unwrap()).unwrap())
                .unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_coeff() <= 1e-12);
        }
    }

    #[test]
    fn reality_closure_under_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let f = random_real_series(&mut rng, 2, 1, 3, (12, 16));
            let g = random_real_series(&mut rng, 2, 1, 3, (12, 16));
            assert!(f.check_reality().passes(1e-12));
            assert!(f.mul(&g).unwrap().check_reality().passes(1e-12));
            assert!(f.add(&g).unwrap().check_reality().passes(1e-12));
            assert!(f.poisson_bracket(&g).unwrap().check_reality().passes(1e-12));
        }
    }

    #[test]
    fn reality_violation_is_measured() {
        let mut s = TFSeries::zero(1, 1, 6, 8);
        s.insert(TermKey::new(vec![0], vec![1], vec![0], vec![2]), Complex64::new(1.0, 0.0));
        s.insert(TermKey::new(vec![0], vec![0], vec![1], vec![-2]), Complex64::new(1.0, 0.0));
        assert_eq!(s.check_reality().max_violation, 0.0);
        let mut bad = s.clone();
        bad.insert(TermKey::new(vec![0], vec![0], vec![1], vec![-2]), Complex64::new(0.0, 1.0));
        let report = bad.check_reality();
        assert!((report.max_violation - 1.0).abs() < 1e-15);
    }

    #[test]
    fn project_identity_and_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_series(&mut rng, 2, 1, 4, (6, 8));
        assert_eq!(f.project(|_| true).max_coeff_distance(&f), 0.0);
        assert!(f.project(|_| false).is_zero());
        let even = f.project(|k| k.degree() % 2 == 0);
        let odd = f.project(|k| k.degree() % 2 != 0);
        assert_eq!(even.add(&odd).unwrap().max_coeff_distance(&f), 0.0);
        // idempotent
        assert_eq!(even.project(|k| k.degree() % 2 == 0).max_coeff_distance(&even), 0.0);
    }

    #[test]
    fn projection_on_twist_slice() {
        // one |k|=2 term and one cubic term: only the former is in S_2^2
        let mut s = TFSeries::zero(2, 1, 6, 8);
        s.insert(TermKey::new(vec![2, 0], vec![0], vec![0], vec![0, 0]), Complex64::new(0.5, 0.0));
        s.insert(TermKey::new(vec![1, 0], vec![1], vec![0], vec![0, 0]), Complex64::new(0.3, 0.0));
        let sel = s.project(|key| {
            key.degree() == 4
                && key.k.iter().sum::<u32>() == 2
                && key.a.iter().all(|&x| x == 0)
                && key.abar.iter().all(|&x| x == 0)
                && key.ell.iter().all(|&x| x == 0)
        });
        assert_eq!(sel.len(), 1);
        assert_eq!(
            sel.coeff(&TermKey::new(vec![2, 0], vec![0], vec![0], vec![0, 0])),
            Complex64::new(0.5, 0.0)
        );
    }

    #[test]
    fn evaluate_examples() {
        let c = TFSeries::constant(1, 1, 6, 8, Complex64::new(2.5, -0.5));
        assert_eq!(
            c.evaluate(&[0.3], &[1.0], &[Complex64::new(0.2, 0.1)]).unwrap(),
            Complex64::new(2.5, -0.5)
        );
        // f = I_1 e^{i phi_1} at I = 2, phi = pi/2 -> 2i
        let mut f = TFSeries::zero(1, 0, 6, 8);
        f.insert(TermKey::new(vec![1], vec![], vec![], vec![1]), Complex64::new(1.0, 0.0));
        let v = f.evaluate(&[2.0], &[std::f64::consts::FRAC_PI_2], &[]).unwrap();
        assert!((v - Complex64::new(0.0, 2.0)).norm() < 1e-14);
        // f = z1 zbar1 at z1 = 1 + i -> 2
        let z = TFSeries::elliptic(0, 1, 6, 8, 0);
        let zb = TFSeries::elliptic_bar(0, 1, 6, 8, 0);
        let zzb1 = z.mul(&zb).unwrap();
        let v = zzb1.evaluate(&[], &[], &[Complex64::new(1.0, 1.0)]).unwrap();
        assert!((v - Complex64::new(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn vector_field_examples() {
        // H = omega . I  ->  (0, omega, -)
        let mut h = TFSeries::zero(2, 0, 6, 8);
        h.insert(TermKey::new(vec![1, 0], vec![], vec![], vec![0, 0]), Complex64::new(1.5, 0.0));
        h.insert(TermKey::new(vec![0, 1], vec![], vec![], vec![0, 0]), Complex64::new(0.5, 0.0));
        let vf = h.hamiltonian_vector_field();
        assert!(vf.idot[0].is_zero() && vf.idot[1].is_zero());
        let (_, phidot, _) = vf.evaluate(&[0.7, -0.2], &[0.1, 0.3], &[]).unwrap();
        assert!((phidot[0] - 1.5).abs() < 1e-15 && (phidot[1] - 0.5).abs() < 1e-15);

        // H = Omega z zbar -> zdot = i Omega z
        let z = TFSeries::elliptic(0, 1, 6, 8, 0);
        let zb = TFSeries::elliptic_bar(0, 1, 6, 8, 0);
        let h = z.mul(&zb).unwrap().scale(Complex64::new(1.3, 0.0));
        let vf = h.hamiltonian_vector_field();
        let z0 = Complex64::new(0.4, -0.2);
        let (_, _, zdot) = vf.evaluate(&[], &[], &[z0]).unwrap();
        assert!((zdot[0] - Complex64::new(0.0, 1.3) * z0).norm() < 1e-15);

        // H = (e^{i phi} + e^{-i phi}) I_1 -> Idot_1 = (i e^{-i phi} - i e^{i phi}) I_1
        let mut h = TFSeries::zero(1, 0, 6, 8);
        h.insert(TermKey::new(vec![1], vec![], vec![], vec![1]), Complex64::new(1.0, 0.0));
        h.insert(TermKey::new(vec![1], vec![], vec![], vec![-1]), Complex64::new(1.0, 0.0));
        let vf = h.hamiltonian_vector_field();
        let phi = 0.37;
        let (idot, _, _) = vf.evaluate(&[2.0], &[phi], &[]).unwrap();
        let expected = 2.0 * (2.0 * phi.sin());
        assert!((idot[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn sup_fourier_norm_examples() {
        let zero = TFSeries::zero(2, 1, 6, 8);
        assert_eq!(zero.sup_fourier_norm(0.5, 0.5, 1.0), 0.0);
        let mut s = TFSeries::zero(2, 1, 6, 8);
        s.insert(TermKey::new(vec![1, 0], vec![0], vec![0], vec![1, 0]), Complex64::new(2.0, 0.0));
        let norm = s.sup_fourier_norm(0.5, 0.7, 1.0);
        assert!((norm - std::f64::consts::E).abs() < 1e-12);
        // absolute homogeneity
        let scaled = s.scale(Complex64::new(0.0, -3.0));
        assert!((scaled.sup_fourier_norm(0.5, 0.7, 1.0) - 3.0 * norm).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_real_series(&mut rng, 2, 2, 4, (6, 8));
        let j1 = serde_json::to_string(&s).unwrap();
        let back: TFSeries = serde_json::from_str(&j1).unwrap();
        let j2 = serde_json::to_string(&back).unwrap();
        assert_eq!(j1, j2);
        assert!(back.is_real_flagged());
    }
}
