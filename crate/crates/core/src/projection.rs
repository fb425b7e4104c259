//! Exact projected-equation machinery: the q-weighted projection onto the
//! feature subspace, the operators D, U and U-bar, and deterministic solvers
//! for the single-step and multistep projected equations. These are the
//! ground-truth oracles the stochastic learners are judged against.

use nalgebra::{DMatrix, DVector, Dyn, SVD};
use serde_json::json;

use crate::error::{Error, Result};
use crate::markov::{q_norm, MarkovChain, MultistepMatrix, StationaryDistribution};
use crate::risk::RiskMapping;

/// Rank tolerance for the feature matrix.
pub const RANK_TOL: f64 = 1e-10;

/// Feature matrix together with the stationary weights defining the
/// projection norm. Row `i` of `phi` is the feature vector of state `i`.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    phi: DMatrix<f64>,
    q: DVector<f64>,
    sqrt_q: DVector<f64>,
    svd: SVD<f64, Dyn, Dyn>,
    sv_eps: f64,
    rank_full: bool,
}

impl FeatureModel {
    pub fn new(phi: DMatrix<f64>, stationary: &StationaryDistribution) -> Result<Self> {
        let (n, m) = phi.shape();
        if m == 0 || n == 0 {
            return Err(Error::Invalid("feature matrix is empty".into()));
        }
        if m > n {
            return Err(Error::Invalid(format!(
                "feature count {m} exceeds state count {n}"
            )));
        }
        if stationary.q.len() != n {
            return Err(Error::Invalid(format!(
                "stationary vector has {} entries for {} states",
                stationary.q.len(),
                n
            )));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("feature matrix has a non-finite entry".into()));
        }
        let q = stationary.q.clone();
        let sqrt_q = q.map(f64::sqrt);
        let mut scaled = phi.clone();
        for i in 0..n {
            for j in 0..m {
                scaled[(i, j)] *= sqrt_q[i];
            }
        }
        let svd = scaled.svd(true, true);
        let sv_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let sv_eps = RANK_TOL * sv_max.max(1.0);
        let rank = svd.singular_values.iter().filter(|&&s| s > sv_eps).count();
        Ok(FeatureModel { phi, q, sqrt_q, svd, sv_eps, rank_full: rank == m })
    }

    /// Loads the `{"Phi": [[...]]}` document against a given stationary vector.
    pub fn from_json(text: &str, stationary: &StationaryDistribution) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct PhiJson {
            #[serde(rename = "Phi")]
            phi: Vec<Vec<f64>>,
        }
        let doc: PhiJson =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("features file: {e}")))?;
        let n = doc.phi.len();
        if n == 0 {
            return Err(Error::Config("features file has no rows".into()));
        }
        let m = doc.phi[0].len();
        if doc.phi.iter().any(|r| r.len() != m) {
            return Err(Error::Config("feature rows have unequal lengths".into()));
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| doc.phi[i][j]), stationary)
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.phi.ncols()
    }

    pub fn rank_full(&self) -> bool {
        self.rank_full
    }

    /// Feature vector of state `i` as a contiguous slice.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        (0..self.phi.ncols()).map(|j| self.phi[(i, j)]).collect()
    }

    /// Minimum-norm weights of the q-weighted least-squares fit of `w`:
    /// `argmin_r || Phi r - w ||_q`.
    pub fn fit_weights(&self, w: &DVector<f64>) -> DVector<f64> {
        let rhs = DVector::from_fn(w.len(), |i, _| self.sqrt_q[i] * w[i]);
        self.svd
            .solve(&rhs, self.sv_eps)
            .expect("SVD solve cannot fail when U and V are computed")
            .column(0)
            .into_owned()
    }

    /// q-weighted orthogonal projection of `w` onto the feature subspace.
    pub fn project_q(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.phi * self.fit_weights(w)
    }

    /// `|| w ||_q` in this model's stationary norm.
    pub fn norm_q(&self, w: &DVector<f64>) -> f64 {
        q_norm(&self.q, w)
    }
}

/// The projected risk-averse backup `D(v) = L(c + alpha * sigma(P, v))`.
pub fn apply_d(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let sig = mapping.apply_operator(chain.transition_matrix(), v)?;
    Ok(fm.project_q(&(chain.costs() + chain.alpha() * sig)))
}

/// `U(r) = Phi^T Q [Phi r - c - alpha * sigma(P, Phi r)]`, the expected
/// direction of the stochastic TD(0) update.
pub fn u_operator(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = residual_vector(fm, chain, mapping, r)?;
    Ok(fm.phi.transpose() * g.component_mul(&fm.q))
}

/// `U-bar(r) = Phi^T Q P-bar [Phi r - c - alpha * sigma(P, Phi r)]`.
pub fn ubar_operator(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    lambda: f64,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let pbar = chain.multistep_matrix(lambda)?;
    ubar_with(fm, chain, mapping, &pbar, r)
}

/// As [`ubar_operator`] with a precomputed multistep matrix.
pub fn ubar_with(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    pbar: &MultistepMatrix,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = residual_vector(fm, chain, mapping, r)?;
    let pg = &pbar.pbar * g;
    Ok(fm.phi.transpose() * pg.component_mul(&fm.q))
}

/// `Phi r - c - alpha * sigma(P, Phi r)`.
pub fn residual_vector(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let v = &fm.phi * r;
    let sig = mapping.apply_operator(chain.transition_matrix(), &v)?;
    Ok(v - chain.costs() - chain.alpha() * sig)
}

/// Which projected equation a solution satisfies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectedEquation {
    SingleStep,
    Multistep { lambda: f64 },
}

/// A solved projected equation with convergence metadata.
#[derive(Debug, Clone)]
pub struct ProjectedSolution {
    pub r_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub equation: ProjectedEquation,
    /// True when the feature matrix has full column rank, making `r_star`
    /// the unique representative of the solution set.
    pub unique: bool,
    /// Stepsize used by the multistep solver, when applicable.
    pub gamma_bar: Option<f64>,
    /// True when `gamma_bar` came from the adaptive Lipschitz estimate
    /// rather than from the caller.
    pub gamma_adaptive: bool,
}

impl ProjectedSolution {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "equation": match self.equation {
                ProjectedEquation::SingleStep => "single-step".to_string(),
                ProjectedEquation::Multistep { lambda } => format!("multistep(lambda={lambda})"),
            },
            "r_star": self.r_star.as_slice(),
            "v_star": self.v_star.as_slice(),
            "residual": self.residual,
            "iterations": self.iterations,
            "unique": self.unique,
            "gamma_bar": self.gamma_bar,
            "gamma_adaptive": self.gamma_adaptive,
        })
    }
}

/// Solves the single-step projected equation `Phi r = L(c + alpha sigma(P, Phi r))`
/// by fixed-point iteration on `D`, which is a contraction whenever
/// `alpha * sqrt(1 + kappa) < 1`.
pub fn solve_single_step(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    tol: f64,
    max_iter: usize,
    override_contraction: bool,
) -> Result<ProjectedSolution> {
    let report = mapping.distortion_coefficient(chain.transition_matrix(), chain.alpha())?;
    if !report.condition_td0 && !override_contraction {
        return Err(Error::Numerical(format!(
            "contraction condition fails: alpha*sqrt(1+kappa) = {} >= 1 (kappa = {}); \
             pass the override flag to proceed anyway",
            chain.alpha() * (1.0 + report.kappa).sqrt(),
            report.kappa
        )));
    }
    let mut v = DVector::zeros(chain.n());
    let mut last_residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = apply_d(fm, chain, mapping, &v)?;
        last_residual = fm.norm_q(&(&next - &v));
        v = next;
        if last_residual <= tol {
            let r_star = fm.fit_weights(&v);
            let v_star = &fm.phi * &r_star;
            let d = apply_d(fm, chain, mapping, &v_star)?;
            let residual = fm.norm_q(&(&v_star - d));
            return Ok(ProjectedSolution {
                r_star,
                v_star,
                residual,
                iterations: it + 1,
                equation: ProjectedEquation::SingleStep,
                unique: fm.rank_full(),
                gamma_bar: None,
                gamma_adaptive: false,
            });
        }
    }
    Err(Error::Numerical(format!(
        "fixed-point iteration exhausted {max_iter} iterations; last residual {last_residual}"
    )))
}

/// Solves the multistep projected equation
/// `L P-bar Phi r = L P-bar (c + alpha sigma(P, Phi r))`
/// by the deterministic iteration `r <- r - gamma_bar * U-bar(r)`.
///
/// When `gamma_bar` is `None` the stable stepsize is estimated by sampling
/// Lipschitz ratios of `U-bar` around the current iterate and halving the
/// resulting bound `2 (1 - alpha (1 + kappa)) / C-bar`.
#[allow(clippy::too_many_arguments)]
pub fn solve_multistep(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    lambda: f64,
    gamma_bar: Option<f64>,
    tol: f64,
    max_iter: usize,
    override_contraction: bool,
) -> Result<ProjectedSolution> {
    let report = mapping.distortion_coefficient(chain.transition_matrix(), chain.alpha())?;
    if !report.condition_tdlambda && !override_contraction {
        return Err(Error::Numerical(format!(
            "contraction condition fails: alpha*(1+kappa) = {} >= 1 (kappa = {}); \
             pass the override flag to proceed anyway",
            chain.alpha() * (1.0 + report.kappa),
            report.kappa
        )));
    }
    let pbar = chain.multistep_matrix(lambda)?;
    let m = fm.n_features();
    let mut r = DVector::zeros(m);
    let adaptive = gamma_bar.is_none();
    let gamma = match gamma_bar {
        Some(g) => {
            if g <= 0.0 {
                return Err(Error::Invalid(format!("gamma_bar must be positive, got {g}")));
            }
            g
        }
        None => estimate_stable_step(fm, chain, mapping, &pbar, &r, report.kappa)?,
    };
    let growth_bound = 1e9;
    let mut last = f64::INFINITY;
    for it in 0..max_iter {
        let u = ubar_with(fm, chain, mapping, &pbar, &r)?;
        last = u.norm();
        if last <= tol {
            // ||U-bar|| and the equation residual differ by a conditioning
            // factor of Phi^T Q Phi; iterate until both are below tolerance.
            let g = residual_vector(fm, chain, mapping, &r)?;
            let residual = fm.norm_q(&fm.project_q(&(&pbar.pbar * g)));
            if residual <= tol {
                let v_star = &fm.phi * &r;
                return Ok(ProjectedSolution {
                    r_star: r,
                    v_star,
                    residual,
                    iterations: it,
                    equation: ProjectedEquation::Multistep { lambda },
                    unique: fm.rank_full(),
                    gamma_bar: Some(gamma),
                    gamma_adaptive: adaptive,
                });
            }
        }
        r -= gamma * u;
        if !r.iter().all(|x| x.is_finite()) || r.amax() > growth_bound {
            return Err(Error::Numerical(format!(
                "iterates diverged (|r| > {growth_bound}); retry with a smaller gamma_bar \
                 than {gamma}"
            )));
        }
    }
    Err(Error::Numerical(format!(
        "multistep iteration exhausted {max_iter} iterations; last ||U-bar|| = {last}"
    )))
}

fn estimate_stable_step(
    fm: &FeatureModel,
    chain: &MarkovChain,
    mapping: &RiskMapping,
    pbar: &MultistepMatrix,
    center: &DVector<f64>,
    kappa: f64,
) -> Result<f64> {
    use rand::Rng;
    let m = fm.n_features();
    let mut rng = crate::seeding::stream_rng(0x5eed_c0de, 2);
    let radius = center.amax().max(1.0);
    let mut cbar: f64 = 0.0;
    for _ in 0..40 {
        let a = center + DVector::from_fn(m, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * radius);
        let b = center + DVector::from_fn(m, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * radius);
        let denom = fm.norm_q(&(&fm.phi * (&a - &b)));
        if denom < 1e-12 {
            continue;
        }
        let ua = ubar_with(fm, chain, mapping, pbar, &a)?;
        let ub = ubar_with(fm, chain, mapping, pbar, &b)?;
        cbar = cbar.max((ua - ub).norm_squared() / (denom * denom));
    }
    if cbar <= 0.0 {
        return Err(Error::Numerical(
            "could not estimate a Lipschitz constant for U-bar (degenerate features?)".into(),
        ));
    }
    let margin = (1.0 - chain.alpha() * (1.0 + kappa)).max(0.1 * (1.0 - chain.alpha()));
    // Theoretical bound 2*margin/C, halved.
    Ok(margin / cbar)
}
