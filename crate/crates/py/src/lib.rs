//! Python bindings for the risk-averse TD learning library.
//!
//! Scalars, vectors and matrices cross the boundary as native Python
//! numbers and (nested) lists; structured reports (solutions, distortion,
//! experiment summaries) are returned as JSON strings for `json.loads`.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use riskd_core::error::Error;
use riskd_core::harness::{dominance_check, empirical_cdf, run_experiment, ExperimentConfig};
use riskd_core::markov::MarkovChain as CoreChain;
use riskd_core::projection::{solve_multistep, solve_single_step, FeatureModel};
use riskd_core::risk::RiskMapping as CoreRisk;
use riskd_core::td::{run_learner, validate_schedule, LearnerState, StepsizeSchedule};
use riskd_core::{fleet, seeding};

fn err(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err("empty matrix"));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// A finite Markov chain with per-state costs and a discount factor.
#[pyclass(frozen)]
struct MarkovChain {
    inner: CoreChain,
}

#[pymethods]
impl MarkovChain {
    #[new]
    fn new(p: Vec<Vec<f64>>, c: Vec<f64>, alpha: f64) -> PyResult<Self> {
        Ok(MarkovChain { inner: CoreChain::new(p, c, alpha).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(MarkovChain { inner: CoreChain::from_json(text).map_err(err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    /// Stationary distribution of the (ergodic) chain.
    fn stationary(&self) -> PyResult<Vec<f64>> {
        let sd = self.inner.stationary_distribution(1e-12).map_err(err)?;
        Ok(sd.q.as_slice().to_vec())
    }

    /// Risk-neutral policy value `(I - alpha P)^{-1} c`.
    fn neutral_value(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.neutral_policy_value().map_err(err)?.as_slice().to_vec())
    }

    /// Multistep matrix `(1 - lambda alpha) sum (lambda alpha)^l P^l`.
    fn multistep(&self, lam: f64) -> PyResult<Vec<Vec<f64>>> {
        let mm = self.inner.multistep_matrix(lam).map_err(err)?;
        Ok((0..self.inner.n())
            .map(|i| (0..self.inner.n()).map(|j| mm.pbar[(i, j)]).collect())
            .collect())
    }

    /// Seeded trajectory of state indices (length `steps + 1`).
    fn simulate(&self, start: usize, steps: usize, seed: u64) -> PyResult<Vec<usize>> {
        Ok(self.inner.simulate(start, steps, seed).map_err(err)?.states)
    }

    fn __repr__(&self) -> String {
        format!("MarkovChain(n={}, alpha={})", self.inner.n(), self.inner.alpha())
    }
}

/// A coherent transition risk mapping.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct RiskMapping {
    inner: CoreRisk,
}

#[pymethods]
impl RiskMapping {
    #[staticmethod]
    fn expectation() -> Self {
        RiskMapping { inner: CoreRisk::Expectation }
    }

    #[staticmethod]
    fn mean_semideviation(beta: f64) -> PyResult<Self> {
        Ok(RiskMapping { inner: CoreRisk::mean_semideviation(beta).map_err(err)? })
    }

    #[staticmethod]
    fn cvar(kappa: f64) -> PyResult<Self> {
        Ok(RiskMapping { inner: CoreRisk::cvar(kappa).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreRisk =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(RiskMapping { inner })
    }

    /// `sigma(p, v)` for a probability vector `p`.
    fn evaluate(&self, p: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
        self.inner.evaluate(&p, &v).map_err(err)
    }

    /// Closed-form plug-in value on an equal-weight sample of observations.
    fn evaluate_sample(&self, values: Vec<f64>) -> PyResult<f64> {
        if values.is_empty() {
            return Err(PyValueError::new_err("empty sample"));
        }
        Ok(self.inner.evaluate_on_sample(&values))
    }

    /// Component-wise operator: `[sigma(row_i(P), v)]_i`.
    fn apply(&self, p: Vec<Vec<f64>>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let pm = matrix_from_rows(&p)?;
        let out = self
            .inner
            .apply_operator(&pm, &nalgebra::DVector::from_vec(v))
            .map_err(err)?;
        Ok(out.as_slice().to_vec())
    }

    /// Vertices of the dual envelope at base distribution `p`.
    fn envelope_vertices(&self, p: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.envelope_vertices(&p).map_err(err)?.vertices)
    }

    /// Distortion coefficient and contraction-condition flags as JSON.
    fn distortion_json(&self, p: Vec<Vec<f64>>, alpha: f64) -> PyResult<String> {
        let pm = matrix_from_rows(&p)?;
        let rep = self.inner.distortion_coefficient(&pm, alpha).map_err(err)?;
        serde_json::to_string(&rep).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Plug-in estimate from explicit sampled successor states.
    fn sample_plug_in(&self, successors: Vec<usize>, v: Vec<f64>) -> PyResult<f64> {
        Ok(self.inner.sample_plug_in(&successors, &v).map_err(err)?.value)
    }

    /// Exact expectation of the plug-in over all ordered `N`-tuples.
    fn exact_sample_mapping(&self, p: Vec<f64>, v: Vec<f64>, n: usize) -> PyResult<f64> {
        self.inner.exact_sample_mapping(&p, &v, n).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("RiskMapping({:?})", self.inner)
    }
}

fn build_fm(chain: &CoreChain, phi: &[Vec<f64>]) -> PyResult<FeatureModel> {
    let sd = chain.stationary_distribution(1e-12).map_err(err)?;
    FeatureModel::new(matrix_from_rows(phi)?, &sd).map_err(err)
}

/// Solves `Phi r = L(c + alpha sigma(P, Phi r))`; returns the solution as JSON.
#[pyfunction]
#[pyo3(signature = (chain, phi, risk, tol=1e-10, max_iter=200_000, override_contraction=false))]
fn solve_single_step_json(
    chain: &MarkovChain,
    phi: Vec<Vec<f64>>,
    risk: &RiskMapping,
    tol: f64,
    max_iter: usize,
    override_contraction: bool,
) -> PyResult<String> {
    let fm = build_fm(&chain.inner, &phi)?;
    let sol = solve_single_step(&fm, &chain.inner, &risk.inner, tol, max_iter, override_contraction)
        .map_err(err)?;
    Ok(sol.to_json().to_string())
}

/// Solves the multistep projected equation; returns the solution as JSON.
#[pyfunction]
#[pyo3(signature = (chain, phi, risk, lam, tol=1e-10, max_iter=2_000_000, override_contraction=false))]
fn solve_multistep_json(
    chain: &MarkovChain,
    phi: Vec<Vec<f64>>,
    risk: &RiskMapping,
    lam: f64,
    tol: f64,
    max_iter: usize,
    override_contraction: bool,
) -> PyResult<String> {
    let fm = build_fm(&chain.inner, &phi)?;
    let sol = solve_multistep(
        &fm,
        &chain.inner,
        &risk.inner,
        lam,
        None,
        tol,
        max_iter,
        override_contraction,
    )
    .map_err(err)?;
    Ok(sol.to_json().to_string())
}

/// Runs the RA-TD(lambda) learner along a simulated trajectory; returns
/// `(final_r, mean_abs_td)`.
#[pyfunction]
#[pyo3(signature = (chain, phi, risk, lam, n_samples, steps, seed,
                    a=1.0, b=100.0, p=1.0, box_bound=1e6))]
#[allow(clippy::too_many_arguments)]
fn run_td_learner(
    chain: &MarkovChain,
    phi: Vec<Vec<f64>>,
    risk: &RiskMapping,
    lam: f64,
    n_samples: usize,
    steps: u64,
    seed: u64,
    a: f64,
    b: f64,
    p: f64,
    box_bound: Option<f64>,
) -> PyResult<(Vec<f64>, f64)> {
    let features = matrix_from_rows(&phi)?;
    let schedule = StepsizeSchedule::new(a, b, p).map_err(err)?;
    let mut learner = LearnerState::new(
        features.ncols(),
        lam,
        chain.inner.alpha(),
        schedule,
        box_bound,
        n_samples,
    )
    .map_err(err)?;
    let trace = run_learner(&chain.inner, &features, &risk.inner, &mut learner, steps, seed, None)
        .map_err(err)?;
    Ok((learner.weights().to_vec(), trace.mean_abs_td()))
}

/// Closed-loop optimistic learning on the fleet environment; returns
/// `(final_r, average_profit_per_stage)`.
#[pyfunction]
#[pyo3(signature = (fleet_json, risk, lam, n_samples, steps, seed, a=1.0, b=100.0, p=1.0))]
#[allow(clippy::too_many_arguments)]
fn run_fleet_optimistic(
    fleet_json: &str,
    risk: &RiskMapping,
    lam: f64,
    n_samples: usize,
    steps: u64,
    seed: u64,
    a: f64,
    b: f64,
    p: f64,
) -> PyResult<(Vec<f64>, f64)> {
    let cfg = fleet::FleetConfig::from_json(fleet_json).map_err(err)?;
    let schedule = StepsizeSchedule::new(a, b, p).map_err(err)?;
    let run = fleet::run_optimistic(
        &cfg,
        &risk.inner,
        lam,
        schedule,
        Some(riskd_core::td::DEFAULT_BOX),
        n_samples,
        steps,
        seed,
    )
    .map_err(err)?;
    let avg = if run.profits.is_empty() {
        0.0
    } else {
        run.profits.iter().sum::<f64>() / run.profits.len() as f64
    };
    Ok((run.final_weights, avg))
}

/// Runs a full experiment config (JSON text); writes results.csv and
/// summary.json under `out_dir` and returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, parallel=1, svg=false))]
fn run_experiment_json(config_json: &str, out_dir: &str, parallel: usize, svg: bool) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let summary = run_experiment(&cfg, std::path::Path::new(out_dir), parallel, svg).map_err(err)?;
    Ok(summary.to_string())
}

/// Right-continuous empirical CDF as `(value, fraction)` pairs.
#[pyfunction]
fn empirical_cdf_table(values: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    empirical_cdf(&values).map_err(err)
}

/// First-order dominance comparison of two samples (higher is better);
/// returns `(a_dominates_b, b_dominates_a, violation_ab, violation_ba)`.
#[pyfunction]
fn dominance_from_samples(a: Vec<f64>, b: Vec<f64>) -> PyResult<(bool, bool, f64, f64)> {
    let ca = empirical_cdf(&a).map_err(err)?;
    let cb = empirical_cdf(&b).map_err(err)?;
    let rep = dominance_check(&ca, &cb);
    Ok((
        rep.a_dominates_b,
        rep.b_dominates_a,
        rep.max_violation_a_over_b,
        rep.max_violation_b_over_a,
    ))
}

/// Spot-checks the stepsize conditions of `gamma_t = a/(b+t)^p`; returns the
/// report as JSON.
#[pyfunction]
fn check_schedule_json(a: f64, b: f64, p: f64, horizon: u64) -> PyResult<String> {
    let schedule = StepsizeSchedule::new_unchecked(a, b, p);
    let report = validate_schedule(&schedule, horizon).map_err(err)?;
    let mut v = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    v["passed"] = serde_json::json!(report.passed());
    Ok(v.to_string())
}

/// Deterministic per-replication seed derived from a master seed.
#[pyfunction]
fn derive_replication_seed(master: u64, replication: u64) -> u64 {
    seeding::replication_seed(master, replication)
}

#[pymodule]
fn riskd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<MarkovChain>()?;
    m.add_class::<RiskMapping>()?;
    m.add_function(wrap_pyfunction!(solve_single_step_json, m)?)?;
    m.add_function(wrap_pyfunction!(solve_multistep_json, m)?)?;
    m.add_function(wrap_pyfunction!(run_td_learner, m)?)?;
    m.add_function(wrap_pyfunction!(run_fleet_optimistic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_json, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_cdf_table, m)?)?;
    m.add_function(wrap_pyfunction!(dominance_from_samples, m)?)?;
    m.add_function(wrap_pyfunction!(check_schedule_json, m)?)?;
    m.add_function(wrap_pyfunction!(derive_replication_seed, m)?)?;
    Ok(())
}
