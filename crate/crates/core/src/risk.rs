//! Coherent transition risk mappings.
//!
//! A transition risk mapping `sigma_i(p, v)` is the risk-averse analogue of
//! the conditional expectation of the next-state value: for every probability
//! vector `p` it is a coherent risk measure in `v`. Three families are
//! implemented in closed form (expectation, mean-semideviation, CVaR),
//! together with their dual envelopes, distortion coefficients, and the
//! sample-based plug-in estimators used by the stochastic learners.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};

/// Largest support size for which dual envelopes are enumerated explicitly.
pub const DEFAULT_SUPPORT_LIMIT: usize = 12;
/// Largest number of `N`-tuples enumerated by [`exact_sample_mapping`].
pub const DEFAULT_TUPLE_LIMIT: usize = 1_000_000;

/// A coherent transition risk mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskMapping {
    /// Risk-neutral: `sigma(p, v) = <p, v>`.
    Expectation,
    /// `mu + beta * sum_j p_j max(0, v_j - mu)` with `mu = <p, v>`, `beta in [0,1]`.
    MeanSemideviation { beta: f64 },
    /// Conditional value at risk at level `kappa in (0,1]`, evaluated through
    /// the scalar minimization form `min_t { t + (1/kappa) sum_j p_j (v_j - t)_+ }`.
    Cvar { kappa: f64 },
}

impl RiskMapping {
    pub fn expectation() -> Self {
        RiskMapping::Expectation
    }

    pub fn mean_semideviation(beta: f64) -> Result<Self> {
        let m = RiskMapping::MeanSemideviation { beta };
        m.validate()?;
        Ok(m)
    }

    pub fn cvar(kappa: f64) -> Result<Self> {
        let m = RiskMapping::Cvar { kappa };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskMapping::Expectation => Ok(()),
            RiskMapping::MeanSemideviation { beta } => {
                if (0.0..=1.0).contains(&beta) && beta.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!("beta must lie in [0,1], got {beta}")))
                }
            }
            RiskMapping::Cvar { kappa } => {
                if kappa > 0.0 && kappa <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::Invalid(format!("kappa must lie in (0,1], got {kappa}")))
                }
            }
        }
    }

    /// Evaluates `sigma(p, v)` for a general probability vector.
    pub fn evaluate(&self, p: &[f64], v: &[f64]) -> Result<f64> {
        validate_probability(p)?;
        if p.len() != v.len() {
            return Err(Error::Invalid(format!(
                "p has length {} but v has length {}",
                p.len(),
                v.len()
            )));
        }
        Ok(self.evaluate_unchecked(p, v))
    }

    fn evaluate_unchecked(&self, p: &[f64], v: &[f64]) -> f64 {
        match *self {
            RiskMapping::Expectation => dot(p, v),
            RiskMapping::MeanSemideviation { beta } => {
                let mu = dot(p, v);
                let mut dev = 0.0;
                for j in 0..p.len() {
                    let d = v[j] - mu;
                    if d > 0.0 {
                        dev += p[j] * d;
                    }
                }
                mu + beta * dev
            }
            RiskMapping::Cvar { kappa } => {
                let mut best = f64::INFINITY;
                for (k, &t) in v.iter().enumerate() {
                    if p[k] == 0.0 {
                        continue;
                    }
                    let mut tail = 0.0;
                    for j in 0..p.len() {
                        let d = v[j] - t;
                        if d > 0.0 {
                            tail += p[j] * d;
                        }
                    }
                    let g = t + tail / kappa;
                    if g < best {
                        best = g;
                    }
                }
                best
            }
        }
    }

    /// Closed-form evaluation on an equal-weight sample of observed values,
    /// exactly the plug-in formula on the empirical distribution. Summation
    /// order is fixed (sample order) so results are bit-reproducible.
    pub fn evaluate_on_sample(&self, w: &[f64]) -> f64 {
        let n = w.len();
        debug_assert!(n > 0);
        match *self {
            RiskMapping::Expectation => sum(w) / n as f64,
            RiskMapping::MeanSemideviation { beta } => {
                let mu = sum(w) / n as f64;
                let mut dev = 0.0;
                for &x in w {
                    let d = x - mu;
                    if d > 0.0 {
                        dev += d;
                    }
                }
                mu + beta * dev / n as f64
            }
            RiskMapping::Cvar { kappa } => {
                let mut best = f64::INFINITY;
                for &t in w {
                    let mut tail = 0.0;
                    for &x in w {
                        let d = x - t;
                        if d > 0.0 {
                            tail += d;
                        }
                    }
                    let g = t + tail / (kappa * n as f64);
                    if g < best {
                        best = g;
                    }
                }
                best
            }
        }
    }

    /// Applies the vector-valued transition risk operator: component `i` is
    /// `sigma(row i of P, v)`.
    pub fn apply_operator(&self, p: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let n = p.nrows();
        if p.ncols() != n || v.len() != n {
            return Err(Error::Invalid("operator dimensions disagree".into()));
        }
        let vs = v.as_slice();
        let mut row = vec![0.0; n];
        let mut out = DVector::zeros(n);
        for i in 0..n {
            for j in 0..n {
                row[j] = p[(i, j)];
            }
            out[i] = self.evaluate(&row, vs)?;
        }
        Ok(out)
    }

    /// Dual envelope vertices at base distribution `p`.
    pub fn envelope_vertices(&self, p: &[f64]) -> Result<EnvelopeVertexSet> {
        self.envelope_vertices_with_limit(p, DEFAULT_SUPPORT_LIMIT)
    }

    /// As [`envelope_vertices`](Self::envelope_vertices) with an explicit
    /// support-size limit.
    pub fn envelope_vertices_with_limit(
        &self,
        p: &[f64],
        support_limit: usize,
    ) -> Result<EnvelopeVertexSet> {
        validate_probability(p)?;
        let support: Vec<usize> = (0..p.len()).filter(|&j| p[j] > 0.0).collect();
        if support.len() > support_limit {
            return Err(Error::Enumeration(format!(
                "support size {} exceeds the enumeration limit {}; \
                 use the distortion bound instead",
                support.len(),
                support_limit
            )));
        }
        let vertices = match *self {
            RiskMapping::Expectation => vec![p.to_vec()],
            RiskMapping::MeanSemideviation { beta } => {
                // Extreme points mu = p o (1 + beta (delta - <p, delta>)) over
                // delta in {0,1}^support. Ties at the kink are covered because
                // both delta values are enumerated.
                let s = support.len();
                let mut out = Vec::new();
                for mask in 0u64..(1u64 << s) {
                    let mut pdelta = 0.0;
                    for (b, &j) in support.iter().enumerate() {
                        if mask >> b & 1 == 1 {
                            pdelta += p[j];
                        }
                    }
                    let mut mu = vec![0.0; p.len()];
                    for (b, &j) in support.iter().enumerate() {
                        let d = if mask >> b & 1 == 1 { 1.0 } else { 0.0 };
                        mu[j] = p[j] * (1.0 + beta * (d - pdelta));
                    }
                    out.push(mu);
                }
                out
            }
            RiskMapping::Cvar { kappa } => {
                // Basic feasible points of {mu >= 0, sum mu = 1, mu_j <= p_j/kappa}:
                // all coordinates at a bound except at most one carrying the
                // remainder.
                let caps: Vec<f64> = support.iter().map(|&j| p[j] / kappa).collect();
                let s = support.len();
                let mut out = Vec::new();
                for mask in 0u64..(1u64 << s) {
                    let mut capped = 0.0;
                    for (b, &cap) in caps.iter().enumerate() {
                        if mask >> b & 1 == 1 {
                            capped += cap;
                        }
                    }
                    if capped > 1.0 + 1e-12 {
                        continue;
                    }
                    let remainder = 1.0 - capped;
                    if remainder.abs() <= 1e-12 {
                        let mut mu = vec![0.0; p.len()];
                        for (b, &j) in support.iter().enumerate() {
                            if mask >> b & 1 == 1 {
                                mu[j] = caps[b];
                            }
                        }
                        out.push(mu);
                        continue;
                    }
                    for (b, &j) in support.iter().enumerate() {
                        if mask >> b & 1 == 1 || caps[b] < remainder - 1e-12 {
                            continue;
                        }
                        let mut mu = vec![0.0; p.len()];
                        for (bb, &jj) in support.iter().enumerate() {
                            if mask >> bb & 1 == 1 {
                                mu[jj] = caps[bb];
                            }
                        }
                        mu[j] = remainder;
                        out.push(mu);
                    }
                }
                out
            }
        };
        Ok(EnvelopeVertexSet { vertices: dedupe(vertices), base: p.to_vec() })
    }

    /// Worst relative distortion `|mu_ij - p_ij| / p_ij` of the risk
    /// multikernel over all states, envelope vertices, and successors with
    /// positive probability; zero-probability pairs are skipped since every
    /// envelope element vanishes there.
    pub fn distortion_coefficient(&self, p: &DMatrix<f64>, alpha: f64) -> Result<DistortionReport> {
        self.distortion_with_limit(p, alpha, DEFAULT_SUPPORT_LIMIT)
    }

    pub fn distortion_with_limit(
        &self,
        p: &DMatrix<f64>,
        alpha: f64,
        support_limit: usize,
    ) -> Result<DistortionReport> {
        let n = p.nrows();
        if p.ncols() != n || n == 0 {
            return Err(Error::Invalid("distortion needs a square transition matrix".into()));
        }
        let mut kappa = 0.0f64;
        let mut witness_state = 0usize;
        let mut witness_index = 0usize;
        let mut witness_vertex: Vec<f64> = (0..n).map(|j| p[(0, j)]).collect();
        let mut row = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                row[j] = p[(i, j)];
            }
            let support: Vec<usize> = (0..n).filter(|&j| row[j] > 0.0).collect();
            let enumerable = support.len() <= support_limit;
            match (*self, enumerable) {
                (RiskMapping::Expectation, _) => {}
                (_, true) => {
                    let env = self.envelope_vertices_with_limit(&row, support_limit)?;
                    for mu in &env.vertices {
                        for &j in &support {
                            let ratio = (mu[j] - row[j]).abs() / row[j];
                            if ratio > kappa {
                                kappa = ratio;
                                witness_state = i;
                                witness_index = j;
                                witness_vertex = mu.clone();
                            }
                        }
                    }
                }
                (RiskMapping::MeanSemideviation { beta }, false) => {
                    // Exact analytic value: per pair (i,j) the extreme ratio is
                    // beta * (1 - p_ij), attained at delta = indicator of j.
                    let (&jmin, _) = support
                        .iter()
                        .map(|j| (j, row[*j]))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .expect("nonempty support");
                    let ratio = beta * (1.0 - row[jmin]);
                    if ratio > kappa {
                        kappa = ratio;
                        witness_state = i;
                        witness_index = jmin;
                        let mut mu = vec![0.0; n];
                        for &j in &support {
                            let d = if j == jmin { 1.0 } else { 0.0 };
                            mu[j] = row[j] * (1.0 + beta * (d - row[jmin]));
                        }
                        witness_vertex = mu;
                    }
                }
                (RiskMapping::Cvar { .. }, false) => {
                    return Err(Error::Enumeration(format!(
                        "row {i} has support {} above the enumeration limit {} and \
                         CVaR has no analytic distortion shortcut",
                        support.len(),
                        support_limit
                    )));
                }
            }
        }
        Ok(DistortionReport {
            kappa,
            witness_state,
            witness_index,
            witness_vertex,
            alpha,
            condition_td0: alpha * (1.0 + kappa).sqrt() < 1.0,
            condition_tdlambda: alpha * (1.0 + kappa) < 1.0,
        })
    }

    /// A priori upper bound on the distortion coefficient, independent of the
    /// transition matrix. Used for reporting when exact enumeration is not
    /// feasible (e.g. the fleet environment).
    pub fn distortion_upper_bound(&self) -> f64 {
        match *self {
            RiskMapping::Expectation => 0.0,
            RiskMapping::MeanSemideviation { beta } => beta,
            RiskMapping::Cvar { kappa } => {
                if kappa >= 1.0 {
                    0.0
                } else {
                    (1.0 / kappa - 1.0).max(1.0)
                }
            }
        }
    }

    /// Plug-in estimate from `N` sampled successor states: the mapping
    /// evaluated on the empirical distribution of the sample.
    pub fn sample_plug_in(&self, successors: &[usize], v: &[f64]) -> Result<SampleRiskEstimate> {
        if successors.is_empty() {
            return Err(Error::Invalid("plug-in estimate needs a nonempty sample".into()));
        }
        if let Some(&s) = successors.iter().find(|&&s| s >= v.len()) {
            return Err(Error::Invalid(format!("sampled state {s} out of range")));
        }
        let w: Vec<f64> = successors.iter().map(|&s| v[s]).collect();
        Ok(SampleRiskEstimate {
            value: self.evaluate_on_sample(&w),
            sample: successors.to_vec(),
            n_samples: successors.len(),
        })
    }

    /// The sample-based transition risk mapping `sigma^N(p, v)`: the exact
    /// expectation of the plug-in estimate over all ordered `N`-tuples of
    /// successors drawn from `p`. This is the target the plug-in estimator is
    /// unbiased for, by construction.
    pub fn exact_sample_mapping(&self, p: &[f64], v: &[f64], n_samples: usize) -> Result<f64> {
        self.exact_sample_mapping_with_limit(p, v, n_samples, DEFAULT_TUPLE_LIMIT)
    }

    pub fn exact_sample_mapping_with_limit(
        &self,
        p: &[f64],
        v: &[f64],
        n_samples: usize,
        tuple_limit: usize,
    ) -> Result<f64> {
        validate_probability(p)?;
        if n_samples == 0 {
            return Err(Error::Invalid("sample size must be at least 1".into()));
        }
        if p.len() != v.len() {
            return Err(Error::Invalid("p and v lengths disagree".into()));
        }
        let support: Vec<usize> = (0..p.len()).filter(|&j| p[j] > 0.0).collect();
        let count = (support.len() as f64).powi(n_samples as i32);
        if count > tuple_limit as f64 {
            return Err(Error::Enumeration(format!(
                "{}^{} tuples exceed the limit {}; use a Monte-Carlo check instead",
                support.len(),
                n_samples,
                tuple_limit
            )));
        }
        // Odometer over ordered tuples; each tuple weighted by the product of
        // its probabilities.
        let mut idx = vec![0usize; n_samples];
        let mut w = vec![0.0; n_samples];
        let mut total = 0.0;
        loop {
            let mut prob = 1.0;
            for (slot, &b) in idx.iter().enumerate() {
                let j = support[b];
                prob *= p[j];
                w[slot] = v[j];
            }
            total += prob * self.evaluate_on_sample(&w);
            let mut slot = 0;
            loop {
                if slot == n_samples {
                    return Ok(total);
                }
                idx[slot] += 1;
                if idx[slot] < support.len() {
                    break;
                }
                idx[slot] = 0;
                slot += 1;
            }
        }
    }
}

/// Vertices of the dual envelope `A(p)` of a mapping at base distribution `p`.
#[derive(Debug, Clone)]
pub struct EnvelopeVertexSet {
    pub vertices: Vec<Vec<f64>>,
    pub base: Vec<f64>,
}

impl EnvelopeVertexSet {
    /// `max_{mu in vertices} <mu, v>`, which must reproduce the closed form.
    pub fn max_inner(&self, v: &[f64]) -> f64 {
        self.vertices
            .iter()
            .map(|mu| dot(mu, v))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Distortion coefficient with its attaining witness and the two contraction
/// conditions it implies at a given discount.
#[derive(Debug, Clone, Serialize)]
pub struct DistortionReport {
    pub kappa: f64,
    pub witness_state: usize,
    pub witness_index: usize,
    pub witness_vertex: Vec<f64>,
    pub alpha: f64,
    /// `alpha * sqrt(1 + kappa) < 1`.
    pub condition_td0: bool,
    /// `alpha * (1 + kappa) < 1`.
    pub condition_tdlambda: bool,
}

impl DistortionReport {
    /// Recomputes the distortion ratio from the stored witness.
    pub fn witness_ratio(&self, p: &DMatrix<f64>) -> f64 {
        let pij = p[(self.witness_state, self.witness_index)];
        if pij == 0.0 {
            return 0.0;
        }
        (self.witness_vertex[self.witness_index] - pij).abs() / pij
    }
}

/// A plug-in risk estimate together with the sample that produced it.
#[derive(Debug, Clone)]
pub struct SampleRiskEstimate {
    pub value: f64,
    pub sample: Vec<usize>,
    pub n_samples: usize,
}

fn validate_probability(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Invalid("empty probability vector".into()));
    }
    let mut sum = 0.0;
    for (j, &x) in p.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::Invalid(format!("p[{j}] = {x} is not a probability")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

fn sum(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in a {
        acc += x;
    }
    acc
}

fn dedupe(vertices: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for v in vertices {
        let key: Vec<i64> = v.iter().map(|&x| (x * 1e12).round() as i64).collect();
        if seen.insert(key) {
            out.push(v);
        }
    }
    out
}
