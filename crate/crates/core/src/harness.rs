//! Experiment runner: loads a scenario config, runs oracle solvers and
//! learners over seeded replications (optionally in parallel), and emits
//! `results.csv`, `summary.json`, and optional SVG line charts. Re-running a
//! config with the same master seed reproduces the outputs byte for byte.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fleet::{run_optimistic, FleetConfig};
use crate::markov::MarkovChain;
use crate::projection::{solve_multistep, solve_single_step, FeatureModel, ProjectedSolution};
use crate::risk::RiskMapping;
use crate::seeding::replication_seed;
use crate::td::{
    run_learner, validate_schedule, LearnerState, LearningTrace, LyapunovOracle, StepsizeSchedule,
    DEFAULT_BOX,
};

/// Which environment an experiment runs against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "synthetic-mdp")]
    SyntheticMdp,
    #[serde(rename = "fleet")]
    Fleet,
}

/// Learner section of an experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub lambda: f64,
    /// Discount; optional, defaults to the scenario's discount and must match
    /// it when given.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "StepsizeSchedule::default_schedule")]
    pub schedule: StepsizeSchedule,
    #[serde(rename = "N", default = "default_n_samples")]
    pub n_samples: usize,
    /// Projection box half-width; explicit `null` disables projection.
    #[serde(rename = "box", default = "default_box")]
    pub box_bound: Option<f64>,
    /// `steps` and `seed` may live here instead of at the top level.
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_n_samples() -> usize {
    4
}

fn default_box() -> Option<f64> {
    Some(DEFAULT_BOX)
}

/// Top-level experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub mdp: Option<Value>,
    #[serde(default)]
    pub features: Option<Value>,
    #[serde(default)]
    pub fleet: Option<FleetConfig>,
    pub risk: RiskMapping,
    pub learner: LearnerConfig,
    #[serde(default)]
    pub steps: Option<u64>,
    pub replications: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Compute exact projected-equation solutions and per-step distances to
    /// them (synthetic scenario only).
    #[serde(default = "default_true")]
    pub oracle: bool,
    /// Run solvers even when the contraction conditions fail.
    #[serde(default)]
    pub override_contraction: bool,
    /// Thinning stride for per-step metric rows; default `steps/1000`.
    #[serde(default)]
    pub record_stride: Option<u64>,
    /// Stage at which the early running-average profit is recorded (fleet).
    #[serde(default = "default_early_marker")]
    pub early_marker: u64,
    #[serde(default)]
    pub output: Option<String>,
}

fn default_true() -> bool {
    true
}

fn default_early_marker() -> u64 {
    200
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        match self.scenario {
            Scenario::SyntheticMdp => {
                if self.mdp.is_none() {
                    return Err(Error::Config(
                        "synthetic-mdp scenario requires an \"mdp\" section".into(),
                    ));
                }
            }
            Scenario::Fleet => {
                if self.fleet.is_none() {
                    return Err(Error::Config("fleet scenario requires a \"fleet\" section".into()));
                }
                self.fleet.as_ref().unwrap().validate()?;
            }
        }
        if !(0.0..=1.0).contains(&self.learner.lambda) {
            return Err(Error::Config(format!(
                "learner lambda must lie in [0,1], got {}",
                self.learner.lambda
            )));
        }
        if self.learner.n_samples == 0 {
            return Err(Error::Config("learner N must be at least 1".into()));
        }
        self.resolved_steps()?;
        self.resolved_seed()?;
        Ok(())
    }

    /// Step count, taken from the top level or the learner section.
    pub fn resolved_steps(&self) -> Result<u64> {
        self.steps
            .or(self.learner.steps)
            .ok_or_else(|| Error::Config("config needs \"steps\" (top level or in learner)".into()))
    }

    /// Master seed, taken from the top level or the learner section.
    pub fn resolved_seed(&self) -> Result<u64> {
        self.seed
            .or(self.learner.seed)
            .ok_or_else(|| Error::Config("config needs \"seed\" (top level or in learner)".into()))
    }

    fn stride(&self, steps: u64) -> u64 {
        self.record_stride.unwrap_or((steps / 1000).max(1)).max(1)
    }
}

/// Long-format result rows `(replication, t, metric, value)`, sorted by
/// `(replication, t, metric)`.
#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub replication: usize,
    pub t: u64,
    pub metric: String,
    pub value: f64,
}

impl ResultTable {
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "replication,t,metric,value")?;
        for row in &self.rows {
            writeln!(out, "{},{},{},{}", row.replication, row.t, row.metric, row.value)?;
        }
        Ok(())
    }

    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.replication, a.t, &a.metric).cmp(&(b.replication, b.t, &b.metric))
        });
    }
}

/// Right-continuous empirical distribution table: `(value, fraction <= value)`
/// pairs over the distinct values in ascending order, ending at fraction 1.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Invalid("empirical CDF of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (idx, &v) in sorted.iter().enumerate() {
        let frac = (idx + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

/// First-order stochastic dominance comparison of two CDF tables. For
/// profits, `a` dominates `b` when `F_a <= F_b` pointwise. Advisory: reports
/// the maximal violation in each direction, never a hard pass/fail.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceReport {
    pub a_dominates_b: bool,
    pub b_dominates_a: bool,
    pub max_violation_a_over_b: f64,
    pub max_violation_b_over_a: f64,
}

pub fn dominance_check(a: &[(f64, f64)], b: &[(f64, f64)]) -> DominanceReport {
    let eval = |cdf: &[(f64, f64)], x: f64| -> f64 {
        let mut frac = 0.0;
        for &(v, f) in cdf {
            if v <= x {
                frac = f;
            } else {
                break;
            }
        }
        frac
    };
    let mut grid: Vec<f64> = a.iter().chain(b.iter()).map(|&(v, _)| v).collect();
    grid.sort_by(|x, y| x.total_cmp(y));
    grid.dedup();
    let mut viol_ab = 0.0f64; // F_a above F_b
    let mut viol_ba = 0.0f64;
    for &x in &grid {
        let fa = eval(a, x);
        let fb = eval(b, x);
        viol_ab = viol_ab.max(fa - fb);
        viol_ba = viol_ba.max(fb - fa);
    }
    DominanceReport {
        a_dominates_b: viol_ab <= 1e-12,
        b_dominates_a: viol_ba <= 1e-12,
        max_violation_a_over_b: viol_ab,
        max_violation_b_over_a: viol_ba,
    }
}

struct RepOutcome {
    rows: Vec<(u64, &'static str, f64)>,
    summary: Value,
    chart: Vec<(f64, f64)>,
}

/// Runs an experiment and writes `results.csv` plus `summary.json` (and
/// `results.svg` when `svg` is set) into `out_dir`. Returns the summary.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    parallel: usize,
    svg: bool,
) -> Result<Value> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let summary = match config.scenario {
        Scenario::SyntheticMdp => run_synthetic(config, out_dir, parallel, svg)?,
        Scenario::Fleet => run_fleet(config, out_dir, parallel, svg)?,
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

fn schedule_report_json(schedule: &StepsizeSchedule, steps: u64) -> Result<Value> {
    let report = validate_schedule(schedule, steps.max(1_000))?;
    let mut v = serde_json::to_value(&report)?;
    v["passed"] = json!(report.passed());
    v["failed_conditions"] = json!(report.failed_conditions());
    Ok(v)
}

fn run_replications<F>(count: usize, parallel: usize, run_one: F) -> Result<Vec<RepOutcome>>
where
    F: Fn(usize) -> Result<RepOutcome> + Sync,
{
    let threads = parallel.max(1).min(count.max(1));
    let slots: Vec<Mutex<Option<Result<RepOutcome>>>> =
        (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= count {
                    break;
                }
                let outcome = run_one(k);
                *slots[k].lock().unwrap() = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("replication ran"))
        .collect()
}

fn finish_outputs(
    out_dir: &Path,
    outcomes: &[RepOutcome],
    svg: bool,
    chart_title: &str,
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for (k, outcome) in outcomes.iter().enumerate() {
        for &(t, metric, value) in &outcome.rows {
            table.rows.push(ResultRow { replication: k, t, metric: metric.to_string(), value });
        }
    }
    table.sort();
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    fs::write(out_dir.join("results.csv"), csv)?;
    if svg {
        let series: Vec<&[(f64, f64)]> = outcomes.iter().map(|o| o.chart.as_slice()).collect();
        let body = render_line_svg(chart_title, &series);
        fs::write(out_dir.join("results.svg"), body)?;
    }
    Ok(table)
}

fn run_synthetic(
    config: &ExperimentConfig,
    out_dir: &Path,
    parallel: usize,
    svg: bool,
) -> Result<Value> {
    let mdp_value = config.mdp.as_ref().unwrap();
    let chain = MarkovChain::from_json(&mdp_value.to_string())?;
    let sd = chain.stationary_distribution(1e-12)?;
    let fm = match &config.features {
        Some(v) => FeatureModel::from_json(&v.to_string(), &sd)?,
        None => FeatureModel::new(DMatrix::identity(chain.n(), chain.n()), &sd)?,
    };
    if let Some(a) = config.learner.alpha {
        if (a - chain.alpha()).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "learner alpha {a} disagrees with chain alpha {}",
                chain.alpha()
            )));
        }
    }
    let mapping = config.risk;
    let steps = config.resolved_steps()?;
    let master_seed = config.resolved_seed()?;
    let distortion = mapping.distortion_coefficient(chain.transition_matrix(), chain.alpha())?;
    let schedule_json = schedule_report_json(&config.learner.schedule, steps)?;

    let lambda = config.learner.lambda;
    let (single, multi): (Option<ProjectedSolution>, Option<ProjectedSolution>) = if config.oracle {
        let s = solve_single_step(&fm, &chain, &mapping, 1e-10, 100_000, config.override_contraction)?;
        let m = if lambda > 0.0 {
            Some(solve_multistep(
                &fm,
                &chain,
                &mapping,
                lambda,
                None,
                1e-10,
                2_000_000,
                config.override_contraction,
            )?)
        } else {
            None
        };
        (Some(s), m)
    } else {
        (None, None)
    };
    let target = multi.as_ref().or(single.as_ref());
    let lyapunov = target.map(|sol| LyapunovOracle::new(fm.phi(), sol));

    let stride = config.stride(steps);
    let outcomes = run_replications(config.replications, parallel, |k| {
        let seed = replication_seed(master_seed, k as u64);
        let mut learner = LearnerState::new(
            fm.n_features(),
            lambda,
            chain.alpha(),
            config.learner.schedule,
            config.learner.box_bound,
            config.learner.n_samples,
        )?;
        let trace = run_learner(
            &chain,
            fm.phi(),
            &mapping,
            &mut learner,
            steps,
            seed,
            lyapunov.as_ref(),
        )?;
        let mut rows = Vec::new();
        let mut chart = Vec::new();
        for row in &trace.rows {
            if row.t % stride == 0 || row.t + 1 == steps {
                rows.push((row.t, "td", row.td));
                if let Some(w) = row.w {
                    rows.push((row.t, "W", w));
                    chart.push((row.t as f64, w));
                }
            }
        }
        let r = DVector::from_column_slice(learner.weights());
        let mut rep_summary = json!({
            "replication": k,
            "seed": seed,
            "final_r": learner.weights(),
            "mean_abs_td": trace.mean_abs_td(),
        });
        for (name, sol) in [("single_step", &single), ("multistep", &multi)] {
            if let Some(sol) = sol {
                let err = fm.norm_q(&(fm.phi() * (&r - &sol.r_star)));
                let scale = fm.norm_q(&sol.v_star).max(1e-12);
                rep_summary[format!("rel_q_error_vs_{name}")] = json!(err / scale);
            }
        }
        if let Some(o) = &lyapunov {
            rep_summary["final_W"] = json!(o.value(learner.weights()));
        }
        Ok(RepOutcome { rows, summary: rep_summary, chart })
    })?;

    let table = finish_outputs(out_dir, &outcomes, svg, "distance to oracle solution W(r_t)")?;
    let rel_errors: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| {
            let key = if multi.is_some() { "rel_q_error_vs_multistep" } else { "rel_q_error_vs_single_step" };
            o.summary.get(key).and_then(Value::as_f64)
        })
        .collect();
    Ok(json!({
        "scenario": "synthetic-mdp",
        "seed": master_seed,
        "steps": steps,
        "replications": config.replications,
        "risk": config.risk,
        "lambda": lambda,
        "n_risk_samples": config.learner.n_samples,
        "distortion": {
            "kappa": distortion.kappa,
            "exact": true,
            "condition_td0": distortion.condition_td0,
            "condition_tdlambda": distortion.condition_tdlambda,
        },
        "schedule_report": schedule_json,
        "oracle": {
            "single_step": single.as_ref().map(|s| s.to_json()),
            "multistep": multi.as_ref().map(|s| s.to_json()),
        },
        "replications_detail": outcomes.iter().map(|o| o.summary.clone()).collect::<Vec<_>>(),
        "aggregate": {
            "mean_rel_q_error": mean(&rel_errors),
            "max_rel_q_error": rel_errors.iter().cloned().fold(f64::NAN, f64::max),
            "rows_written": table.rows.len(),
        },
    }))
}

fn run_fleet(config: &ExperimentConfig, out_dir: &Path, parallel: usize, svg: bool) -> Result<Value> {
    let fleet = config.fleet.as_ref().unwrap();
    if let Some(a) = config.learner.alpha {
        if (a - fleet.alpha).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "learner alpha {a} disagrees with fleet alpha {}",
                fleet.alpha
            )));
        }
    }
    let mapping = config.risk;
    let steps = config.resolved_steps()?;
    let master_seed = config.resolved_seed()?;
    let bound = mapping.distortion_upper_bound();
    let schedule_json = schedule_report_json(&config.learner.schedule, steps)?;
    let stride = config.stride(steps);
    let marker = config.early_marker.min(steps);

    let outcomes = run_replications(config.replications, parallel, |k| {
        let seed = replication_seed(master_seed, k as u64);
        let run = run_optimistic(
            fleet,
            &mapping,
            config.learner.lambda,
            config.learner.schedule,
            config.learner.box_bound,
            config.learner.n_samples,
            steps,
            seed,
        )?;
        let mut rows = Vec::new();
        let mut chart = Vec::new();
        let mut acc = 0.0;
        let mut early_avg = f64::NAN;
        for (idx, &p) in run.profits.iter().enumerate() {
            acc += p;
            let t = idx as u64;
            let avg = acc / (t + 1) as f64;
            if t + 1 == marker {
                early_avg = avg;
            }
            if t % stride == 0 || t + 1 == steps {
                rows.push((t, "profit", p));
                rows.push((t, "profit_avg", avg));
                rows.push((t, "td", run.trace.rows[idx].td));
                chart.push((t as f64, avg));
            }
        }
        let total_avg = if run.profits.is_empty() { 0.0 } else { acc / run.profits.len() as f64 };
        Ok(RepOutcome {
            rows,
            summary: json!({
                "replication": k,
                "seed": seed,
                "avg_profit": total_avg,
                "early_avg_profit": early_avg,
                "final_r": run.final_weights,
            }),
            chart,
        })
    })?;

    let table = finish_outputs(out_dir, &outcomes, svg, "running average profit")?;
    let avg: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.summary.get("avg_profit").and_then(Value::as_f64))
        .collect();
    let early: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.summary.get("early_avg_profit").and_then(Value::as_f64))
        .collect();
    Ok(json!({
        "scenario": "fleet",
        "seed": master_seed,
        "steps": steps,
        "replications": config.replications,
        "risk": config.risk,
        "lambda": config.learner.lambda,
        "n_risk_samples": config.learner.n_samples,
        "early_marker": marker,
        "distortion": {
            "kappa": bound,
            "exact": false,
            "condition_td0": fleet.alpha * (1.0 + bound).sqrt() < 1.0,
            "condition_tdlambda": fleet.alpha * (1.0 + bound) < 1.0,
        },
        "schedule_report": schedule_json,
        "oracle": Value::Null,
        "replications_detail": outcomes.iter().map(|o| o.summary.clone()).collect::<Vec<_>>(),
        "early_avg_profits": early,
        "aggregate": {
            "mean_avg_profit": mean(&avg),
            "mean_early_avg_profit": mean(&early),
            "rows_written": table.rows.len(),
        },
    }))
}

fn mean(xs: &[f64]) -> Value {
    if xs.is_empty() {
        Value::Null
    } else {
        json!(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Minimal multi-series SVG line chart with fixed-precision coordinates.
fn render_line_svg(title: &str, series: &[&[(f64, f64)]]) -> String {
    let (w, h, pad) = (800.0, 400.0, 40.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.iter().cloned()).collect();
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-family=\"monospace\" font-size=\"13\">{title}</text>\n"
    ));
    if !points.is_empty() {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        for (idx, s) in series.iter().enumerate() {
            if s.is_empty() {
                continue;
            }
            let hue = (idx * 47) % 360;
            let pts: Vec<String> =
                s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"hsl({hue},60%,40%)\" stroke-width=\"1\" \
                 points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        out.push_str(&format!(
            "<text x=\"{pad}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\">{y0:.4} .. {y1:.4}</text>\n",
            h - 10.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Writes a learning trace as CSV to a file (header `t,state,td,gamma,W`).
pub fn write_trace_csv(trace: &LearningTrace, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}
