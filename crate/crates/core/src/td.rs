//! Stochastic risk-averse temporal-difference learners: TD(0) and TD(lambda)
//! with plug-in risk estimates, diminishing stepsizes and an optional
//! bounded-set projection.
//!
//! The learner is model-free: it sees feature vectors of visited states,
//! observed costs, and sampled successors, never the transition matrix, the
//! stationary distribution, or the distortion coefficient. All learner
//! arithmetic runs over plain slices with a fixed summation order, so a run
//! is bit-reproducible given (seed, configuration).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::MarkovChain;
use crate::projection::ProjectedSolution;
use crate::risk::RiskMapping;
use crate::seeding::{self, STREAM_ENV, STREAM_RISK};

/// Stepsize schedule `gamma_t = a / (b + t)^p`.
///
/// The validated constructor enforces `a > 0`, `b >= 1`, `p in (1/2, 1]`,
/// which analytically guarantees positivity, decay to zero, a divergent sum,
/// a summable square sum, and vanishing window variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepsizeSchedule {
    pub a: f64,
    pub b: f64,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    1.0
}

impl StepsizeSchedule {
    pub fn new(a: f64, b: f64, p: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Invalid(format!("schedule needs a > 0, got {a}")));
        }
        if !(b >= 1.0 && b.is_finite()) {
            return Err(Error::Invalid(format!("schedule needs b >= 1, got {b}")));
        }
        if !(p > 0.5 && p <= 1.0) {
            return Err(Error::Invalid(format!(
                "schedule needs p in (1/2, 1], got {p}"
            )));
        }
        Ok(StepsizeSchedule { a, b, p })
    }

    /// Unvalidated construction, for diagnosing schedules that violate the
    /// stepsize assumptions (see [`validate_schedule`]).
    pub fn new_unchecked(a: f64, b: f64, p: f64) -> Self {
        StepsizeSchedule { a, b, p }
    }

    /// Default `1 / (1 + t/100)`: the divergent-sum schedule with early-noise
    /// damping used throughout the experiments.
    pub fn default_schedule() -> Self {
        StepsizeSchedule { a: 1.0, b: 100.0, p: 1.0 }
    }

    pub fn value(&self, t: u64) -> f64 {
        let base = self.b + t as f64;
        if self.p == 1.0 {
            self.a / base
        } else {
            self.a / base.powf(self.p)
        }
    }
}

/// Finite-horizon spot check of the four stepsize conditions:
/// (i) positivity and decay, (ii) divergent sum, (iii) summable squares,
/// (iv) vanishing window variation. Sum conditions are judged from the trend
/// of dyadic partial-sum increments; this is a trend check over the horizon,
/// not a proof.
pub fn validate_schedule(schedule: &StepsizeSchedule, horizon: u64) -> Result<ScheduleReport> {
    if horizon < 16 {
        return Err(Error::Invalid("schedule validation needs a horizon of at least 16".into()));
    }
    let h4 = horizon / 4;
    let h2 = horizon / 2;

    let mut positive = true;
    for t in (0..horizon).step_by((horizon / 1000).max(1) as usize) {
        if !(schedule.value(t) > 0.0 && schedule.value(t).is_finite()) {
            positive = false;
            break;
        }
    }
    let decay_ratio = schedule.value(horizon - 1) / schedule.value(h4.max(1));
    let decays = positive && decay_ratio <= 0.9;

    let window_sum = |lo: u64, hi: u64, square: bool| -> f64 {
        let mut s = 0.0;
        for t in lo..hi {
            let g = schedule.value(t);
            s += if square { g * g } else { g };
        }
        s
    };
    let sum_early = window_sum(h4, h2, false);
    let sum_late = window_sum(h2, horizon, false);
    let sum_ratio = sum_late / sum_early;
    let diverging_sum = positive && sum_ratio >= 0.97;

    let sq_early = window_sum(h4, h2, true);
    let sq_late = window_sum(h2, horizon, true);
    let sq_ratio = sq_late / sq_early;
    let square_summable = sq_ratio <= 0.97;

    let variation = |t0: u64| -> f64 {
        let eps = 1.0;
        let mut acc = 0.0;
        let mut var = 0.0;
        let mut t = t0;
        while t < horizon.saturating_mul(4) {
            let g = schedule.value(t);
            if acc + g > eps {
                break;
            }
            acc += g;
            var += (g - schedule.value(t + 1)).abs();
            t += 1;
        }
        var
    };
    let variation_early = variation(h4);
    let variation_late = variation(h2);
    let window_variation = variation_late <= variation_early + 1e-15
        && variation_late <= schedule.value(h2) * (1.0 + 1e-9) + 1e-15;

    Ok(ScheduleReport {
        horizon,
        decays,
        diverging_sum,
        square_summable,
        window_variation,
        decay_ratio,
        sum_ratio,
        sq_ratio,
        variation_early,
        variation_late,
    })
}

/// Outcome of [`validate_schedule`].
#[derive(Debug, Clone, Serialize)]
pub struct ScheduleReport {
    pub horizon: u64,
    /// Condition (i): positive and decaying over the horizon.
    pub decays: bool,
    /// Condition (ii): dyadic increments of the partial sums do not vanish.
    pub diverging_sum: bool,
    /// Condition (iii): dyadic increments of the squared sums shrink.
    pub square_summable: bool,
    /// Condition (iv): window variation shrinks with the window start.
    pub window_variation: bool,
    pub decay_ratio: f64,
    pub sum_ratio: f64,
    pub sq_ratio: f64,
    pub variation_early: f64,
    pub variation_late: f64,
}

impl ScheduleReport {
    pub fn passed(&self) -> bool {
        self.decays && self.diverging_sum && self.square_summable && self.window_variation
    }

    pub fn failed_conditions(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.decays {
            out.push("(i) positivity/decay");
        }
        if !self.diverging_sum {
            out.push("(ii) divergent sum");
        }
        if !self.square_summable {
            out.push("(iii) summable squares");
        }
        if !self.window_variation {
            out.push("(iv) window variation");
        }
        out
    }
}

/// Mutable state of one learner: iterate, eligibility trace, step counter.
#[derive(Debug, Clone)]
pub struct LearnerState {
    r: Vec<f64>,
    z: Vec<f64>,
    t: u64,
    lambda: f64,
    alpha: f64,
    schedule: StepsizeSchedule,
    box_bound: Option<f64>,
    n_risk_samples: usize,
}

/// Effectively inactive default projection box.
pub const DEFAULT_BOX: f64 = 1e6;

impl LearnerState {
    pub fn new(
        n_features: usize,
        lambda: f64,
        alpha: f64,
        schedule: StepsizeSchedule,
        box_bound: Option<f64>,
        n_risk_samples: usize,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Invalid("learner needs at least one feature".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Invalid(format!("lambda must lie in [0,1], got {lambda}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Invalid(format!("alpha must lie in (0,1), got {alpha}")));
        }
        if lambda * alpha >= 1.0 {
            return Err(Error::Invalid("lambda*alpha must be below 1".into()));
        }
        if let Some(b) = box_bound {
            if !b.is_finite() || b <= 0.0 {
                return Err(Error::Invalid(format!("projection box must be positive, got {b}")));
            }
        }
        if n_risk_samples == 0 {
            return Err(Error::Invalid("risk sample size N must be at least 1".into()));
        }
        Ok(LearnerState {
            r: vec![0.0; n_features],
            z: vec![0.0; n_features],
            t: 0,
            lambda,
            alpha,
            schedule,
            box_bound,
            n_risk_samples,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.r
    }

    pub fn trace_vector(&self) -> &[f64] {
        &self.z
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_risk_samples(&self) -> usize {
        self.n_risk_samples
    }

    pub fn gamma(&self) -> f64 {
        self.schedule.value(self.t)
    }

    pub fn set_weights(&mut self, r: &[f64]) {
        self.r.copy_from_slice(r);
    }

    /// One step of the basic method: `r <- Proj_Y(r - gamma_t phi(i) d)`.
    pub fn td0_step(&mut self, phi_i: &[f64], d_tilde: f64) {
        let gamma = self.gamma();
        let step = gamma * d_tilde;
        for k in 0..self.r.len() {
            self.r[k] -= step * phi_i[k];
        }
        self.clamp();
        self.t += 1;
    }

    /// One step of the multistep method:
    /// `z <- lambda alpha z + phi(i)`, then `r <- Proj_Y(r - gamma_t z d)`.
    /// At `lambda = 0` this reproduces [`td0_step`](Self::td0_step) exactly.
    pub fn tdlambda_step(&mut self, phi_i: &[f64], d_tilde: f64) {
        let la = self.lambda * self.alpha;
        for k in 0..self.z.len() {
            self.z[k] = la * self.z[k] + phi_i[k];
        }
        let gamma = self.gamma();
        let step = gamma * d_tilde;
        for k in 0..self.r.len() {
            self.r[k] -= step * self.z[k];
        }
        self.clamp();
        self.t += 1;
    }

    fn clamp(&mut self) {
        if let Some(bound) = self.box_bound {
            for x in &mut self.r {
                *x = x.clamp(-bound, bound);
            }
        }
    }
}

/// Observed risk-averse temporal difference
/// `d = phi(i)^T r - c(i) - alpha * sigma_tilde`.
pub fn observed_td(phi_i: &[f64], r: &[f64], cost: f64, alpha: f64, sigma_tilde: f64) -> f64 {
    dot(phi_i, r) - cost - alpha * sigma_tilde
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

/// One recorded learner step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    /// State index for chain learners; an opaque state hash for environments
    /// with vector states.
    pub state: u64,
    pub td: f64,
    pub gamma: f64,
    /// Squared distance to the oracle solution set, when an oracle was given.
    pub w: Option<f64>,
}

/// Full per-step record of a learning run.
#[derive(Debug, Clone, Default)]
pub struct LearningTrace {
    pub rows: Vec<TraceRow>,
}

impl LearningTrace {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_abs_td(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.td.abs()).sum::<f64>() / self.rows.len() as f64
    }

    /// CSV export with header `t,state,td,gamma,W`; the `W` field is empty
    /// when no oracle was supplied.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "t,state,td,gamma,W")?;
        for row in &self.rows {
            match row.w {
                Some(w) => writeln!(out, "{},{},{},{},{}", row.t, row.state, row.td, row.gamma, w)?,
                None => writeln!(out, "{},{},{},{},", row.t, row.state, row.td, row.gamma)?,
            }
        }
        Ok(())
    }
}

/// Precomputed map `r -> min_{r*: Phi r* = v*} ||r - r*||^2`, the squared
/// distance to the solution set in coefficient space.
#[derive(Debug, Clone)]
pub struct LyapunovOracle {
    g: DMatrix<f64>,
    h: DVector<f64>,
}

impl LyapunovOracle {
    pub fn new(features: &DMatrix<f64>, sol: &ProjectedSolution) -> Self {
        // W(r) = || Phi^+ (Phi r - v*) ||^2; with full column rank Phi^+ Phi = I.
        let svd = features.clone().svd(true, true);
        let sv_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let eps = 1e-12 * sv_max.max(1.0);
        let pinv = svd.pseudo_inverse(eps).expect("pseudo-inverse with computed U, V");
        let g = &pinv * features;
        let h = &pinv * &sol.v_star;
        LyapunovOracle { g, h }
    }

    pub fn value(&self, r: &[f64]) -> f64 {
        let rv = DVector::from_column_slice(r);
        (&self.g * rv - &self.h).norm_squared()
    }
}

/// `min_{r* in Y*} ||r - r*||^2` for the solution set of `sol`.
pub fn lyapunov_w(features: &DMatrix<f64>, r: &[f64], sol: &ProjectedSolution) -> f64 {
    LyapunovOracle::new(features, sol).value(r)
}

/// Runs a learner along a simulated trajectory of the chain.
///
/// Per step: observe the current state, draw `N` fresh successors for the
/// plug-in risk estimate, update the learner, then advance the trajectory by
/// one draw that is independent of the risk sample. Trajectory draws and risk
/// draws come from separate streams of the seed.
pub fn run_learner(
    chain: &MarkovChain,
    features: &DMatrix<f64>,
    mapping: &RiskMapping,
    learner: &mut LearnerState,
    steps: u64,
    seed: u64,
    oracle: Option<&LyapunovOracle>,
) -> Result<LearningTrace> {
    let n = chain.n();
    if features.nrows() != n {
        return Err(Error::Invalid(format!(
            "feature matrix has {} rows for {} states",
            features.nrows(),
            n
        )));
    }
    if features.ncols() != learner.r.len() {
        return Err(Error::Invalid("learner dimension disagrees with features".into()));
    }
    if (learner.alpha - chain.alpha()).abs() > 1e-12 {
        return Err(Error::Invalid(format!(
            "learner discount {} disagrees with chain discount {}",
            learner.alpha,
            chain.alpha()
        )));
    }
    chain.check_ergodic()?;
    mapping.validate()?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..features.ncols()).map(|j| features[(i, j)]).collect())
        .collect();
    let costs: Vec<f64> = chain.costs().iter().cloned().collect();

    let mut rng_env = seeding::stream_rng(seed, STREAM_ENV);
    let mut rng_risk = seeding::stream_rng(seed, STREAM_RISK);
    let mut trace = LearningTrace::default();
    trace.rows.reserve(steps as usize);
    let mut w_values = vec![0.0; learner.n_risk_samples];
    let mut state = 0usize;
    for t in 0..steps {
        let phi_i = &rows[state];
        for slot in 0..learner.n_risk_samples {
            let j = chain.sample_successor(state, &mut rng_risk);
            w_values[slot] = dot(&rows[j], &learner.r);
        }
        let sigma_tilde = mapping.evaluate_on_sample(&w_values);
        let d = observed_td(phi_i, &learner.r, costs[state], learner.alpha, sigma_tilde);
        let gamma = learner.gamma();
        let w = oracle.map(|o| o.value(&learner.r));
        learner.tdlambda_step(phi_i, d);
        trace.rows.push(TraceRow { t, state: state as u64, td: d, gamma, w });
        state = chain.sample_successor(state, &mut rng_env);
    }
    Ok(trace)
}
