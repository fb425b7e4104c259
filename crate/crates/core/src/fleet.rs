//! Desk-scale fleet-repositioning environment: stochastic transport demand,
//! a one-step look-ahead decision solver, state transitions, and the
//! observed temporal differences driving the optimistic learning loop.
//!
//! State `x` is the integer vector of vehicle counts per location; the state
//! itself is the feature vector. A decision sends every vehicle at origin
//! `i` to some destination (possibly `i` itself), either empty or loaded;
//! loaded moves are capped by the observed demand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::RiskMapping;
use crate::seeding::{self, STREAM_ENV, STREAM_RISK};
use crate::td::{LearnerState, LearningTrace, StepsizeSchedule, TraceRow};

/// Per-OD-pair demand distribution, iid across pairs and stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandModel {
    Zero,
    Deterministic { value: u32 },
    /// Poisson conditioned on `{0, ..., cap}`.
    TruncatedPoisson { mean: f64, cap: u32 },
}

impl DemandModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DemandModel::Zero | DemandModel::Deterministic { .. } => Ok(()),
            DemandModel::TruncatedPoisson { mean, cap } => {
                if !(mean >= 0.0 && mean.is_finite()) {
                    return Err(Error::Invalid(format!("demand mean must be >= 0, got {mean}")));
                }
                if cap > 64 {
                    return Err(Error::Invalid(format!(
                        "demand cap {cap} too large for bounded-support enumeration"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Probability mass over the bounded support.
    pub fn pmf(&self) -> Vec<f64> {
        match *self {
            DemandModel::Zero => vec![1.0],
            DemandModel::Deterministic { value } => {
                let mut p = vec![0.0; value as usize + 1];
                p[value as usize] = 1.0;
                p
            }
            DemandModel::TruncatedPoisson { mean, cap } => {
                let mut raw = Vec::with_capacity(cap as usize + 1);
                let mut term = 1.0; // mean^k / k!
                for k in 0..=cap {
                    if k > 0 {
                        term *= mean / k as f64;
                    }
                    raw.push(term);
                }
                let total: f64 = raw.iter().sum();
                raw.iter().map(|x| x / total).collect()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.pmf()
            .iter()
            .enumerate()
            .map(|(k, &p)| k as f64 * p)
            .sum()
    }
}

/// Precomputed inverse-CDF sampler for a demand model. Every draw consumes
/// exactly one uniform regardless of the model, keeping stream alignment
/// identical across configurations.
#[derive(Debug, Clone)]
pub struct DemandSampler {
    cdf: Vec<f64>,
}

impl DemandSampler {
    pub fn new(model: &DemandModel) -> Self {
        let mut acc = 0.0;
        let cdf = model
            .pmf()
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        DemandSampler { cdf }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.random();
        for (k, &c) in self.cdf.iter().enumerate() {
            if u < c {
                return k as u32;
            }
        }
        (self.cdf.len() - 1) as u32
    }
}

/// Environment configuration: locations, fleet, movement costs, demand law,
/// and the discount.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "fleet")]
    pub fleet_size: u32,
    pub c_empty: Vec<Vec<f64>>,
    pub c_loaded: Vec<Vec<f64>>,
    pub demand: DemandModel,
    pub alpha: f64,
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        if m == 0 {
            return Err(Error::Invalid("fleet config needs at least one location".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invalid(format!(
                "discount alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        for (name, mat) in [("c_empty", &self.c_empty), ("c_loaded", &self.c_loaded)] {
            if mat.len() != m || mat.iter().any(|r| r.len() != m) {
                return Err(Error::Invalid(format!("{name} must be {m}x{m}")));
            }
            if mat.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("{name} has a non-finite entry")));
            }
        }
        for i in 0..m {
            if self.c_empty[i][i] != 0.0 {
                return Err(Error::Invalid(format!(
                    "staying must be free: c_empty[{i}][{i}] = {}",
                    self.c_empty[i][i]
                )));
            }
        }
        self.demand.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: FleetConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("fleet config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Deterministic initial state: the fleet spread as evenly as possible,
    /// earlier locations taking the remainder.
    pub fn initial_state(&self) -> FleetState {
        let base = self.fleet_size / self.m as u32;
        let rem = (self.fleet_size % self.m as u32) as usize;
        FleetState {
            x: (0..self.m)
                .map(|i| base + u32::from(i < rem))
                .collect(),
        }
    }
}

/// Vehicle counts per location; total is conserved by every transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FleetState {
    pub x: Vec<u32>,
}

impl FleetState {
    pub fn total(&self) -> u32 {
        self.x.iter().sum()
    }

    pub fn features(&self) -> Vec<f64> {
        self.x.iter().map(|&v| v as f64).collect()
    }

    /// Opaque deterministic id (FNV-1a) for trace records.
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &v in &self.x {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }
}

/// Empty and loaded move counts; `u_loaded[i][j] <= D[i][j]` and every row's
/// total outflow equals the origin's vehicle count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub u_empty: Vec<Vec<u32>>,
    pub u_loaded: Vec<Vec<u32>>,
}

impl Decision {
    fn zeros(m: usize) -> Self {
        Decision { u_empty: vec![vec![0; m]; m], u_loaded: vec![vec![0; m]; m] }
    }
}

/// Draws an M x M demand matrix, pairs in row-major order.
pub fn sample_demand(sampler: &DemandSampler, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    (0..m)
        .map(|_| (0..m).map(|_| sampler.draw(rng)).collect())
        .collect()
}

/// Solves the one-step look-ahead problem
/// `min { c^T u + alpha * pi^T x' }` over feasible decisions, where `x'` is
/// the post-decision state.
///
/// The feasible set couples decisions only through per-origin supply and
/// per-arc demand caps, so the minimum-cost flow decomposes into independent
/// per-origin greedy fills over arcs sorted by effective cost; the fill is
/// exactly optimal and integral. Ties break deterministically: staying at the
/// origin first, then lower destination index, loaded before empty.
///
/// Returns the decision and its objective value.
pub fn solve_lookahead(
    cfg: &FleetConfig,
    x: &FleetState,
    demand: &[Vec<u32>],
    pi: &[f64],
) -> (Decision, f64) {
    let m = cfg.m;
    let mut decision = Decision::zeros(m);
    let mut objective = 0.0;
    // arc key: (cost, stay-first, destination, loaded-before-empty)
    let mut arcs: Vec<(f64, u8, usize, u8)> = Vec::with_capacity(2 * m);
    for i in 0..m {
        let mut remaining = x.x[i];
        if remaining == 0 {
            continue;
        }
        arcs.clear();
        for j in 0..m {
            let stay = u8::from(j != i);
            if demand[i][j] > 0 {
                arcs.push((cfg.c_loaded[i][j] + cfg.alpha * pi[j], stay, j, 0));
            }
            arcs.push((cfg.c_empty[i][j] + cfg.alpha * pi[j], stay, j, 1));
        }
        arcs.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        for &(cost, _, j, kind) in &arcs {
            if remaining == 0 {
                break;
            }
            let take = if kind == 0 {
                remaining.min(demand[i][j])
            } else {
                remaining
            };
            if take == 0 {
                continue;
            }
            if kind == 0 {
                decision.u_loaded[i][j] += take;
            } else {
                decision.u_empty[i][j] += take;
            }
            objective += cost * take as f64;
            remaining -= take;
        }
    }
    (decision, objective)
}

/// Pure movement cost `c^T u` of a decision (loaded entries are net negative
/// profits, so profit per stage is the negated value).
pub fn movement_cost(cfg: &FleetConfig, u: &Decision) -> f64 {
    let mut total = 0.0;
    for i in 0..cfg.m {
        for j in 0..cfg.m {
            total += cfg.c_empty[i][j] * u.u_empty[i][j] as f64
                + cfg.c_loaded[i][j] * u.u_loaded[i][j] as f64;
        }
    }
    total
}

/// Applies a decision: `x'_j = sum_i (u^e_ij + u^l_ij)`.
pub fn transition(x: &FleetState, u: &Decision) -> Result<FleetState> {
    let m = x.x.len();
    if u.u_empty.len() != m || u.u_loaded.len() != m {
        return Err(Error::Invalid("decision size disagrees with state".into()));
    }
    for i in 0..m {
        let outflow: u64 = (0..m)
            .map(|j| u.u_empty[i][j] as u64 + u.u_loaded[i][j] as u64)
            .sum();
        if outflow != x.x[i] as u64 {
            return Err(Error::Invalid(format!(
                "origin {i} dispatches {outflow} vehicles but holds {}",
                x.x[i]
            )));
        }
    }
    let mut next = vec![0u32; m];
    for j in 0..m {
        let mut inflow: u64 = 0;
        for i in 0..m {
            inflow += u.u_empty[i][j] as u64 + u.u_loaded[i][j] as u64;
        }
        next[j] = inflow as u32;
    }
    Ok(FleetState { x: next })
}

/// Observed temporal difference of the transport model:
/// draws `N` iid demand scenarios, solves the look-ahead for each with
/// `pi = r`, applies the plug-in risk measure to the scenario values
/// `c^T u + alpha r^T x'`, and returns `r^T x - alpha * sigma_bar`.
pub fn observed_td_transport(
    cfg: &FleetConfig,
    sampler: &DemandSampler,
    x: &FleetState,
    r: &[f64],
    mapping: &RiskMapping,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Invalid("risk sample size N must be at least 1".into()));
    }
    let mut w = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let demand = sample_demand(sampler, cfg.m, rng);
        let (_, objective) = solve_lookahead(cfg, x, &demand, r);
        w.push(objective);
    }
    let sigma = mapping.evaluate_on_sample(&w);
    let mut rx = 0.0;
    for (k, &xi) in x.x.iter().enumerate() {
        rx += r[k] * xi as f64;
    }
    Ok(rx - cfg.alpha * sigma)
}

/// Result of an optimistic closed-loop run.
#[derive(Debug, Clone)]
pub struct OptimisticRun {
    pub trace: LearningTrace,
    /// Per-stage profit, the negated movement cost of the executed decision.
    pub profits: Vec<f64>,
    pub final_weights: Vec<f64>,
}

/// Closed-loop optimistic learning: the current coefficient vector defines
/// the look-ahead policy while it is being learned.
///
/// Real demand comes from the environment stream of the seed, risk-estimation
/// scenarios from the risk stream, so runs with different risk parameters see
/// the same demand sequence.
#[allow(clippy::too_many_arguments)]
pub fn run_optimistic(
    cfg: &FleetConfig,
    mapping: &RiskMapping,
    lambda: f64,
    schedule: StepsizeSchedule,
    box_bound: Option<f64>,
    n_samples: usize,
    steps: u64,
    seed: u64,
) -> Result<OptimisticRun> {
    cfg.validate()?;
    mapping.validate()?;
    let sampler = DemandSampler::new(&cfg.demand);
    let mut learner =
        LearnerState::new(cfg.m, lambda, cfg.alpha, schedule, box_bound, n_samples)?;
    let mut rng_env = seeding::stream_rng(seed, STREAM_ENV);
    let mut rng_risk = seeding::stream_rng(seed, STREAM_RISK);
    let mut x = cfg.initial_state();
    let fleet_total = x.total();
    let mut trace = LearningTrace::default();
    trace.rows.reserve(steps as usize);
    let mut profits = Vec::with_capacity(steps as usize);
    for t in 0..steps {
        let d_tilde = observed_td_transport(
            cfg,
            &sampler,
            &x,
            learner.weights(),
            mapping,
            n_samples,
            &mut rng_risk,
        )?;
        let demand = sample_demand(&sampler, cfg.m, &mut rng_env);
        let (decision, _) = solve_lookahead(cfg, &x, &demand, learner.weights());
        let profit = -movement_cost(cfg, &decision);
        let gamma = learner.gamma();
        let phi = x.features();
        learner.tdlambda_step(&phi, d_tilde);
        trace.rows.push(TraceRow { t, state: x.id(), td: d_tilde, gamma, w: None });
        profits.push(profit);
        x = transition(&x, &decision)?;
        debug_assert_eq!(x.total(), fleet_total);
    }
    Ok(OptimisticRun {
        trace,
        profits,
        final_weights: learner.weights().to_vec(),
    })
}
