//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test -p riskd-core --test acceptance -- --nocapture`).
//!
//! Criteria use frozen instances and seeded generators throughout; expected
//! values come from independent oracles (closed forms, exhaustive
//! enumeration, exact linear solves), never from the code paths under test.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use riskd_core::fleet::{sample_demand, solve_lookahead, DemandModel, DemandSampler, FleetConfig, FleetState};
use riskd_core::harness::{dominance_check, empirical_cdf, run_experiment, ExperimentConfig};
use riskd_core::markov::{q_norm, MarkovChain};
use riskd_core::projection::{
    solve_multistep, solve_single_step, u_operator, ubar_with, FeatureModel,
};
use riskd_core::risk::RiskMapping;
use riskd_core::seeding::{replication_seed, stream_rng, STREAM_ENV, STREAM_RISK};
use riskd_core::td::{run_learner, LearnerState, StepsizeSchedule, DEFAULT_BOX};

const MASTER_SEED: u64 = 20260810;

fn conclude(id: &str, pass: bool, detail: &str) {
    println!("criterion {id}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn random_probability(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.02).collect();
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x /= total;
    }
    let s: f64 = p.iter().sum();
    let last = p.len() - 1;
    p[last] += 1.0 - s;
    p
}

/// Strictly positive rows, hence ergodic.
fn random_chain_rows(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + floor).collect();
            let total: f64 = row.iter().sum();
            for x in &mut row {
                *x /= total;
            }
            let s: f64 = row.iter().sum();
            let last = row.len() - 1;
            row[last] += 1.0 - s;
            row
        })
        .collect()
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

fn three_mappings(rng: &mut ChaCha8Rng) -> [RiskMapping; 3] {
    [
        RiskMapping::Expectation,
        RiskMapping::mean_semideviation(rng.random::<f64>()).unwrap(),
        RiskMapping::cvar(rng.random::<f64>() * 0.99 + 0.01).unwrap(),
    ]
}

// ---------------------------------------------------------------------------
// The frozen 5-state / 2-feature instance shared by the stochastic criteria.
// The cost vector equals (I - alpha P) Phi rho, so the risk-neutral value
// function is exactly representable and every risk-neutral projected equation
// is solved by rho — the property the lambda-discrimination criterion's
// control run relies on.
// ---------------------------------------------------------------------------

const INSTANCE_ALPHA: f64 = 0.9;
const INSTANCE_BETA: f64 = 0.05;

fn instance_p() -> Vec<Vec<f64>> {
    vec![
        vec![
            0.05210318538148077,
            0.05773931561035819,
            0.16552496842502934,
            0.28440853548432476,
            0.44022399509880694,
        ],
        vec![
            0.12177904023718167,
            0.16560242443775977,
            0.2318063244445657,
            0.255889070295355,
            0.22492314058513777,
        ],
        vec![
            0.2624233869871487,
            0.17130067240414726,
            0.20850821703618583,
            0.19154888948885,
            0.1662188340836683,
        ],
        vec![
            0.12060967244770864,
            0.16850017760449687,
            0.29369237063128717,
            0.2335946346922723,
            0.18360314462423513,
        ],
        vec![
            0.32936788840937675,
            0.20754269208500567,
            0.05445441117270286,
            0.23464872693179792,
            0.17398628140111666,
        ],
    ]
}

fn instance_phi() -> DMatrix<f64> {
    let second = [
        -0.8950997185243663,
        0.024755206265667518,
        1.207404666720986,
        -0.8394076866362603,
        -0.2834894264264918,
    ];
    DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { second[i] })
}

fn instance_rho() -> DVector<f64> {
    DVector::from_vec(vec![0.9210766196736819, 0.5037061278161474])
}

struct Instance {
    chain: MarkovChain,
    phi: DMatrix<f64>,
    fm: FeatureModel,
    mapping: RiskMapping,
    rho: DVector<f64>,
}

fn frozen_instance() -> Instance {
    let p = instance_p();
    let phi = instance_phi();
    let rho = instance_rho();
    let pm = DMatrix::from_fn(5, 5, |i, j| p[i][j]);
    let c = (DMatrix::identity(5, 5) - INSTANCE_ALPHA * &pm) * (&phi * &rho);
    let chain = MarkovChain::new(p, c.as_slice().to_vec(), INSTANCE_ALPHA).unwrap();
    let sd = chain.stationary_distribution(1e-12).unwrap();
    let fm = FeatureModel::new(phi.clone(), &sd).unwrap();
    assert!(fm.rank_full());
    Instance {
        chain,
        phi,
        fm,
        mapping: RiskMapping::mean_semideviation(INSTANCE_BETA).unwrap(),
        rho,
    }
}

fn rel_q_error(inst: &Instance, r: &[f64], target: &DVector<f64>) -> f64 {
    let rv = DVector::from_column_slice(r);
    let err = inst.fm.norm_q(&(&inst.phi * (&rv - target)));
    let scale = inst.fm.norm_q(&(&inst.phi * target)).max(1e-12);
    err / scale
}

// ---------------------------------------------------------------------------

#[test]
fn c01_coherence_axioms() {
    let start = Instant::now();
    let mut rng = stream_rng(MASTER_SEED, 10);
    let cases = 10_000;
    let tol = 1e-9;
    let mut failures = 0usize;
    for _ in 0..cases {
        let n = 2 + (rng.random::<u64>() % 7) as usize; // n <= 8
        let p = random_probability(&mut rng, n);
        let v = random_values(&mut rng, n, 4.0);
        let w = random_values(&mut rng, n, 4.0);
        let theta: f64 = rng.random();
        let shift: f64 = rng.random::<f64>() * 6.0 - 3.0;
        for m in three_mappings(&mut rng) {
            let sv = m.evaluate(&p, &v).unwrap();
            let sw = m.evaluate(&p, &w).unwrap();
            let mix: Vec<f64> =
                v.iter().zip(&w).map(|(&a, &b)| theta * a + (1.0 - theta) * b).collect();
            if m.evaluate(&p, &mix).unwrap() > theta * sv + (1.0 - theta) * sw + tol {
                failures += 1;
            }
            let hi: Vec<f64> = w.iter().zip(&v).map(|(&a, &b)| a + b.abs()).collect();
            if m.evaluate(&p, &hi).unwrap() < sw - tol {
                failures += 1;
            }
            let shifted: Vec<f64> = v.iter().map(|&a| a + shift).collect();
            if (m.evaluate(&p, &shifted).unwrap() - (sv + shift)).abs() > tol {
                failures += 1;
            }
            let scale = theta * 2.0;
            let scaled: Vec<f64> = v.iter().map(|&a| scale * a).collect();
            if (m.evaluate(&p, &scaled).unwrap() - scale * sv).abs() > tol {
                failures += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    conclude(
        "01 [coherence-axioms]",
        failures == 0 && secs < 10.0,
        &format!("{cases} cases x 3 mappings x 4 axioms, {failures} failures, {secs:.2}s"),
    );
}

#[test]
fn c02_dual_representation() {
    let start = Instant::now();
    let mut rng = stream_rng(MASTER_SEED, 11);
    let mut worst = 0.0f64;
    let per_mapping = 1_000;
    for mapping_idx in 0..3 {
        for _ in 0..per_mapping {
            let n = 2 + (rng.random::<u64>() % 5) as usize; // n <= 6
            let p = random_probability(&mut rng, n);
            let m = match mapping_idx {
                0 => RiskMapping::Expectation,
                1 => RiskMapping::mean_semideviation(rng.random::<f64>()).unwrap(),
                _ => RiskMapping::cvar(rng.random::<f64>() * 0.99 + 0.01).unwrap(),
            };
            let env = m.envelope_vertices(&p).unwrap();
            let v = random_values(&mut rng, n, 5.0);
            let direct = m.evaluate(&p, &v).unwrap();
            worst = worst.max((env.max_inner(&v) - direct).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    conclude(
        "02 [dual-representation]",
        worst <= 1e-10 && secs < 10.0,
        &format!("3 x {per_mapping} cases, max |max-inner - closed-form| = {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn c03_lipschitz_inequalities() {
    let mut rng = stream_rng(MASTER_SEED, 12);
    let chains = 20;
    let pairs = 10_000;
    let slack = 1e-9;
    let mut violations = 0usize;
    let mut tightest = f64::INFINITY;
    for chain_idx in 0..chains {
        let n = 2 + (rng.random::<u64>() % 5) as usize; // n <= 6
        let rows = random_chain_rows(&mut rng, n, 0.05);
        let chain = MarkovChain::new(rows, vec![0.0; n], 0.9).unwrap();
        let q = chain.stationary_distribution(1e-12).unwrap().q;
        let mapping = match chain_idx % 3 {
            0 => RiskMapping::mean_semideviation(rng.random::<f64>()).unwrap(),
            1 => RiskMapping::cvar(rng.random::<f64>() * 0.9 + 0.1).unwrap(),
            _ => RiskMapping::mean_semideviation(1.0).unwrap(),
        };
        let kappa = mapping
            .distortion_coefficient(chain.transition_matrix(), chain.alpha())
            .unwrap()
            .kappa;
        let lip = (1.0 + kappa).sqrt();
        for _ in 0..pairs {
            let w = DVector::from_vec(random_values(&mut rng, n, 4.0));
            let v = DVector::from_vec(random_values(&mut rng, n, 4.0));
            let sw = mapping.apply_operator(chain.transition_matrix(), &w).unwrap();
            let sv = mapping.apply_operator(chain.transition_matrix(), &v).unwrap();
            let dn = q_norm(&q, &(&w - &v));
            let lhs1 = q_norm(&q, &(&sw - &sv));
            if lhs1 > lip * dn + slack {
                violations += 1;
            }
            let lhs2 = q_norm(&q, &(&sw - &sv - chain.transition_matrix() * (&w - &v)));
            if lhs2 > kappa * dn + slack {
                violations += 1;
            }
            if dn > 1e-9 {
                tightest = tightest.min(kappa * dn + slack - lhs2);
            }
        }
    }
    conclude(
        "03 [lipschitz-inequalities]",
        violations == 0,
        &format!("{chains} chains x {pairs} pairs, {violations} violations (min slack margin {tightest:.2e})"),
    );
}

#[test]
fn c04_oracle_fixed_points() {
    let start = Instant::now();
    let mut rng = stream_rng(MASTER_SEED, 13);
    let mut max_neutral_gap = 0.0f64;
    let mut max_u_norm = 0.0f64;
    for case in 0..20 {
        let n = 2 + (rng.random::<u64>() % 5) as usize;
        let rows = random_chain_rows(&mut rng, n, 0.2);
        let c = random_values(&mut rng, n, 2.0);
        let chain = MarkovChain::new(rows, c, 0.9).unwrap();
        let sd = chain.stationary_distribution(1e-12).unwrap();

        // Expectation with identity features against the exact linear solve.
        let fm_id = FeatureModel::new(DMatrix::identity(n, n), &sd).unwrap();
        let sol = solve_single_step(&fm_id, &chain, &RiskMapping::Expectation, 1e-10, 200_000, false)
            .unwrap();
        let neutral = chain.neutral_policy_value().unwrap();
        max_neutral_gap = max_neutral_gap.max((sol.v_star - neutral).amax());

        // Risk-averse solve on random full-rank features: U(r*) ~ 0. The
        // parameters keep the distortion small enough for the contraction
        // condition on every chain: msd gives kappa <= beta; CVaR's worst
        // vertex ratio is (1-kappa_lvl)(1-p)/(kappa_lvl p), ~0.035 at the
        // 0.028 atom floor of these chains.
        let mapping = if case % 2 == 0 {
            RiskMapping::mean_semideviation(0.1).unwrap()
        } else {
            RiskMapping::cvar(0.999).unwrap()
        };
        let phi = loop {
            let cand = DMatrix::from_fn(n, 2.min(n), |_, j| {
                if j == 0 {
                    1.0
                } else {
                    rng.random::<f64>() * 4.0 - 2.0
                }
            });
            let fm = FeatureModel::new(cand.clone(), &sd).unwrap();
            if fm.rank_full() {
                break cand;
            }
        };
        let fm = FeatureModel::new(phi, &sd).unwrap();
        let sol = solve_single_step(&fm, &chain, &mapping, 1e-10, 200_000, false).unwrap();
        let u = u_operator(&fm, &chain, &mapping, &sol.r_star).unwrap();
        max_u_norm = max_u_norm.max(u.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    conclude(
        "04 [oracle-fixed-points]",
        max_neutral_gap <= 1e-8 && max_u_norm <= 1e-8 && secs < 30.0,
        &format!(
            "20 chains: max |v* - (I-aP)^-1 c| = {max_neutral_gap:.2e}, max ||U(r*)|| = {max_u_norm:.2e}, {secs:.2}s"
        ),
    );
}

#[test]
fn c05_deterministic_convergence() {
    let inst = frozen_instance();
    let lambda = 0.9;
    let tol = 1e-8;
    let single = solve_single_step(&inst.fm, &inst.chain, &inst.mapping, 1e-11, 200_000, false).unwrap();
    let multi =
        solve_multistep(&inst.fm, &inst.chain, &inst.mapping, lambda, None, 1e-11, 2_000_000, false)
            .unwrap();
    let pbar = inst.chain.multistep_matrix(lambda).unwrap();

    // Stable stepsize for the U-iteration from sampled Lipschitz ratios.
    let mut rng = stream_rng(MASTER_SEED, 14);
    let mut c_u = 0.0f64;
    for _ in 0..50 {
        let a = DVector::from_vec(random_values(&mut rng, 2, 2.0));
        let b = DVector::from_vec(random_values(&mut rng, 2, 2.0));
        let d = inst.fm.norm_q(&(&inst.phi * (&a - &b)));
        if d < 1e-12 {
            continue;
        }
        let ua = u_operator(&inst.fm, &inst.chain, &inst.mapping, &a).unwrap();
        let ub = u_operator(&inst.fm, &inst.chain, &inst.mapping, &b).unwrap();
        c_u = c_u.max((ua - ub).norm_squared() / (d * d));
    }
    let kappa = inst
        .mapping
        .distortion_coefficient(inst.chain.transition_matrix(), INSTANCE_ALPHA)
        .unwrap()
        .kappa;
    let gamma_u = (1.0 - INSTANCE_ALPHA * (1.0 + kappa).sqrt()) / c_u;
    let gamma_ubar = multi.gamma_bar.unwrap();

    let mut all_ok = true;
    let mut detail = String::new();
    for start_idx in 0..5 {
        let start = DVector::from_vec(random_values(&mut rng, 2, 3.0));
        for (name, target, gamma) in [
            ("U", &single.r_star, gamma_u),
            ("Ubar", &multi.r_star, gamma_ubar),
        ] {
            let mut r = start.clone();
            let mut prev = inst.fm.norm_q(&(&inst.phi * (&r - target)));
            let mut monotone = true;
            let mut final_err = prev;
            for _ in 0..3_000_000 {
                let u = if name == "U" {
                    u_operator(&inst.fm, &inst.chain, &inst.mapping, &r).unwrap()
                } else {
                    ubar_with(&inst.fm, &inst.chain, &inst.mapping, &pbar, &r).unwrap()
                };
                r -= gamma * u;
                let cur = inst.fm.norm_q(&(&inst.phi * (&r - target)));
                if cur > prev + 1e-12 {
                    monotone = false;
                }
                prev = cur;
                final_err = cur;
                if cur <= tol * 0.1 {
                    break;
                }
            }
            if !(monotone && final_err <= tol) {
                all_ok = false;
                detail.push_str(&format!(
                    "[start {start_idx} {name}: monotone={monotone} err={final_err:.2e}] "
                ));
            }
        }
    }
    conclude(
        "05 [deterministic-convergence]",
        all_ok,
        &format!(
            "5 starts x (U, Ubar), monotone q-norm descent to <= {tol:.0e}{}",
            if detail.is_empty() { String::new() } else { format!("; failures: {detail}") }
        ),
    );
}

#[test]
fn c06_stochastic_td0_convergence() {
    let start = Instant::now();
    let inst = frozen_instance();
    let oracle =
        solve_single_step(&inst.fm, &inst.chain, &inst.mapping, 1e-11, 200_000, false).unwrap();
    // gamma_t = 1 / (1 + t/100) = 100 / (100 + t)
    let schedule = StepsizeSchedule::new(100.0, 100.0, 1.0).unwrap();
    let steps = 1_000_000;
    let reps = 10;
    let tol = 0.05;
    let mut within = 0;
    let mut errs = Vec::new();
    for k in 0..reps {
        let seed = replication_seed(MASTER_SEED, k);
        let mut learner =
            LearnerState::new(2, 0.0, INSTANCE_ALPHA, schedule, Some(DEFAULT_BOX), 4).unwrap();
        run_learner(&inst.chain, &inst.phi, &inst.mapping, &mut learner, steps, seed, None).unwrap();
        let err = rel_q_error(&inst, learner.weights(), &oracle.r_star);
        errs.push(format!("{err:.4}"));
        if err <= tol {
            within += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    conclude(
        "06 [stochastic-td0]",
        within >= 9 && secs < 300.0,
        &format!("{within}/{reps} replications within {tol} rel q-error (errs: {errs:?}), {secs:.1}s"),
    );
}

#[test]
fn c07_tdlambda_target_discrimination() {
    let inst = frozen_instance();
    let lambda = 0.9;
    let tol = 0.05;
    let single =
        solve_single_step(&inst.fm, &inst.chain, &inst.mapping, 1e-11, 200_000, false).unwrap();
    let multi =
        solve_multistep(&inst.fm, &inst.chain, &inst.mapping, lambda, None, 1e-11, 2_000_000, false)
            .unwrap();
    let gap = {
        let d = inst.fm.norm_q(&(&inst.phi * (&single.r_star - &multi.r_star)));
        d / inst.fm.norm_q(&multi.v_star).max(1e-12)
    };

    let schedule = StepsizeSchedule::new(100.0, 100.0, 1.0).unwrap();
    let steps = 2_000_000;
    let reps = 5;
    let mut near_multi = 0;
    let mut discriminated = 0;
    let mut errs = Vec::new();
    for k in 0..reps {
        let seed = replication_seed(MASTER_SEED ^ 0x7d, k);
        let mut learner =
            LearnerState::new(2, lambda, INSTANCE_ALPHA, schedule, Some(DEFAULT_BOX), 4).unwrap();
        run_learner(&inst.chain, &inst.phi, &inst.mapping, &mut learner, steps, seed, None).unwrap();
        let err_multi = rel_q_error(&inst, learner.weights(), &multi.r_star);
        let err_single = rel_q_error(&inst, learner.weights(), &single.r_star);
        errs.push(format!("(multi {err_multi:.4}, single {err_single:.4})"));
        if err_multi <= tol {
            near_multi += 1;
        }
        if err_multi <= tol && err_single > 3.0 * tol {
            discriminated += 1;
        }
    }
    // The discrimination clause applies only when the oracle targets separate
    // by more than ten tolerances; with beta inside the contraction regime
    // the two solutions are intrinsically close, and the clause is guarded.
    let clause_applies = gap > 10.0 * tol;
    let discrimination_ok = !clause_applies || discriminated >= 4;

    // Risk-neutral control: with the representable cost vector every
    // risk-neutral projected equation has the common solution rho.
    let neutral_single =
        solve_single_step(&inst.fm, &inst.chain, &RiskMapping::Expectation, 1e-11, 200_000, false)
            .unwrap();
    let neutral_multi = solve_multistep(
        &inst.fm,
        &inst.chain,
        &RiskMapping::Expectation,
        lambda,
        None,
        1e-11,
        2_000_000,
        false,
    )
    .unwrap();
    let common_gap = (&neutral_single.r_star - &neutral_multi.r_star).amax();
    let rho_gap = (&neutral_single.r_star - &inst.rho).amax();
    let mut neutral_near = 0;
    for k in 0..reps {
        let seed = replication_seed(MASTER_SEED ^ 0xc0, k);
        let mut learner =
            LearnerState::new(2, lambda, INSTANCE_ALPHA, schedule, Some(DEFAULT_BOX), 4).unwrap();
        run_learner(
            &inst.chain,
            &inst.phi,
            &RiskMapping::Expectation,
            &mut learner,
            1_000_000,
            seed,
            None,
        )
        .unwrap();
        if rel_q_error(&inst, learner.weights(), &inst.rho) <= tol {
            neutral_near += 1;
        }
    }
    conclude(
        "07 [tdlambda-discrimination]",
        near_multi >= 4 && discrimination_ok && common_gap <= 1e-8 && rho_gap <= 1e-8 && neutral_near >= 4,
        &format!(
            "oracle gap {gap:.2e} (discrimination clause {}), {near_multi}/{reps} runs within {tol} of the multistep target {errs:?}; \
             risk-neutral solutions common within {common_gap:.1e} and {neutral_near}/{reps} control runs converge to it",
            if clause_applies { "applies" } else { "not applicable" }
        ),
    );
}

#[test]
fn c08_classical_reduction_bitwise() {
    let chain = MarkovChain::new(
        vec![
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.6, 0.3],
            vec![0.3, 0.3, 0.4],
        ],
        vec![1.0, -2.0, 0.5],
        0.9,
    )
    .unwrap();
    let features = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, 1.3, 1.0, -0.8]);
    let schedule = StepsizeSchedule::new(100.0, 100.0, 1.0).unwrap();
    let alpha = 0.9;
    let steps = 5_000u64;
    let seed = MASTER_SEED ^ 0x8;

    let mut all_identical = true;
    for lambda in [0.0, 0.5, 0.9] {
        let mut learner =
            LearnerState::new(2, lambda, alpha, schedule, Some(DEFAULT_BOX), 1).unwrap();
        let trace = run_learner(
            &chain,
            &features,
            &RiskMapping::Expectation,
            &mut learner,
            steps,
            seed,
            None,
        )
        .unwrap();

        // Reference classical TD(lambda): straight-line implementation with
        // its own sampling and arithmetic, sharing only the seed protocol.
        let mut rng_env = stream_rng(seed, STREAM_ENV);
        let mut rng_risk = stream_rng(seed, STREAM_RISK);
        let draw = |i: usize, rng: &mut ChaCha8Rng| -> usize {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = i;
            for j in 0..3 {
                let p = chain.transition_matrix()[(i, j)];
                if p > 0.0 {
                    acc += p;
                    last = j;
                    if u < acc {
                        return j;
                    }
                }
            }
            last
        };
        let mut r = [0.0f64; 2];
        let mut z = [0.0f64; 2];
        let mut state = 0usize;
        let mut identical = true;
        for t in 0..steps {
            let j = draw(state, &mut rng_risk);
            let mut sigma = 0.0;
            for k in 0..2 {
                sigma += features[(j, k)] * r[k];
            }
            sigma /= 1.0; // N = 1 sample mean
            let mut fv = 0.0;
            for k in 0..2 {
                fv += features[(state, k)] * r[k];
            }
            let d = fv - chain.costs()[state] - alpha * sigma;
            let gamma = 100.0 / (100.0 + t as f64);
            for k in 0..2 {
                z[k] = lambda * alpha * z[k] + features[(state, k)];
            }
            let step = gamma * d;
            for k in 0..2 {
                r[k] -= step * z[k];
                r[k] = r[k].clamp(-DEFAULT_BOX, DEFAULT_BOX);
            }
            let row = &trace.rows[t as usize];
            if row.td.to_bits() != d.to_bits() || row.gamma.to_bits() != gamma.to_bits() {
                identical = false;
                break;
            }
            state = draw(state, &mut rng_env);
        }
        let weights_match = learner
            .weights()
            .iter()
            .zip(&r)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !(identical && weights_match) {
            all_identical = false;
            println!("  lambda {lambda}: trace match {identical}, weights match {weights_match}");
        }
    }
    conclude(
        "08 [classical-reduction]",
        all_identical,
        "RA-TD(lambda) with expectation risk and N=1 is bit-identical to the reference classical loop for lambda in {0, 0.5, 0.9}",
    );
}

#[test]
fn c09_estimator_unbiasedness() {
    let mut rng = stream_rng(MASTER_SEED, 15);
    let p = random_probability(&mut rng, 5);
    let v = random_values(&mut rng, 5, 3.0);
    let draws = 100_000;
    let mut all_ok = true;
    let mut detail = String::new();
    for beta in [0.5, 1.0] {
        for n_samples in [2usize, 4] {
            let mapping = RiskMapping::mean_semideviation(beta).unwrap();
            let target = mapping.exact_sample_mapping(&p, &v, n_samples).unwrap();
            let mut mean = 0.0;
            let mut m2 = 0.0;
            let mut w = vec![0.0; n_samples];
            for k in 0..draws {
                for slot in w.iter_mut() {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut jv = v[p.len() - 1];
                    for (j, &pj) in p.iter().enumerate() {
                        acc += pj;
                        if u < acc {
                            jv = v[j];
                            break;
                        }
                    }
                    *slot = jv;
                }
                let xi = mapping.evaluate_on_sample(&w) - target;
                let delta = xi - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (xi - mean);
            }
            let se = (m2 / (draws as f64 - 1.0) / draws as f64).sqrt();
            let ok = mean.abs() <= 4.0 * se;
            all_ok &= ok;
            detail.push_str(&format!("(beta={beta}, N={n_samples}: |mean|={:.2e}, 4se={:.2e}) ", mean.abs(), 4.0 * se));
        }
    }
    conclude("09 [estimator-unbiasedness]", all_ok, &detail);
}

#[test]
fn c10_flow_solver_exactness() {
    let mut rng = stream_rng(MASTER_SEED, 16);
    let instances = 1_000;
    let mut mismatches = 0usize;
    let mut worst = 0.0f64;
    for case in 0..instances {
        let m = 2 + (case % 2); // M in {2, 3}
        let c_empty: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { 0.0 } else { rng.random::<f64>() * 3.0 })
                    .collect()
            })
            .collect();
        let c_loaded: Vec<Vec<f64>> =
            (0..m).map(|_| (0..m).map(|_| rng.random::<f64>() * 6.0 - 4.0).collect()).collect();
        let cfg = FleetConfig {
            m,
            fleet_size: 0,
            c_empty,
            c_loaded,
            demand: DemandModel::TruncatedPoisson { mean: 1.0, cap: 2 },
            alpha: 0.95,
        };
        // Up to 4 vehicles spread at random.
        let total = 1 + (rng.random::<u64>() % 4) as u32;
        let mut x = vec![0u32; m];
        for _ in 0..total {
            let k = (rng.random::<u64>() % m as u64) as usize;
            x[k] += 1;
        }
        let x = FleetState { x };
        let sampler = DemandSampler::new(&cfg.demand);
        let demand = sample_demand(&sampler, m, &mut rng);
        let pi = random_values(&mut rng, m, 2.0);
        let (_, got) = solve_lookahead(&cfg, &x, &demand, &pi);
        let want = enumerate_optimum(&cfg, &x, &demand, &pi);
        let diff = (got - want).abs();
        worst = worst.max(diff);
        if diff > 1e-9 {
            mismatches += 1;
        }
    }
    conclude(
        "10 [flow-solver-exactness]",
        mismatches == 0,
        &format!("{instances} random (x, D, pi) instances at M <= 3, <= 4 vehicles; {mismatches} objective mismatches (max diff {worst:.1e})"),
    );
}

/// Exhaustive oracle: all feasible allocations per origin via recursion; the
/// objective separates across origins because constraints couple only the
/// per-origin supply and per-arc caps.
fn enumerate_optimum(cfg: &FleetConfig, x: &FleetState, demand: &[Vec<u32>], pi: &[f64]) -> f64 {
    fn walk(arcs: &[(f64, u32)], idx: usize, left: u32, acc: f64, best: &mut f64) {
        if idx == arcs.len() {
            if left == 0 && acc < *best {
                *best = acc;
            }
            return;
        }
        let take_max = left.min(arcs[idx].1);
        for take in 0..=take_max {
            walk(arcs, idx + 1, left - take, acc + arcs[idx].0 * take as f64, best);
        }
    }
    let m = cfg.m;
    let mut total = 0.0;
    for i in 0..m {
        if x.x[i] == 0 {
            continue;
        }
        let mut arcs: Vec<(f64, u32)> = Vec::new();
        for j in 0..m {
            arcs.push((cfg.c_empty[i][j] + cfg.alpha * pi[j], u32::MAX));
            arcs.push((cfg.c_loaded[i][j] + cfg.alpha * pi[j], demand[i][j]));
        }
        let mut best = f64::INFINITY;
        walk(&arcs, 0, x.x[i], 0.0, &mut best);
        total += best;
    }
    total
}

fn fleet_desk_config(beta: f64, lambda: f64, steps: u64, replications: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "scenario": "fleet",
            "fleet": {{
                "M": 4,
                "fleet": 8,
                "c_empty": [[0.0,1.0,2.0,1.5],[1.0,0.0,1.0,2.0],[2.0,1.0,0.0,1.0],[1.5,2.0,1.0,0.0]],
                "c_loaded": [[-1.0,-3.0,-2.0,-1.5],[-2.5,-1.0,-2.0,-3.5],[-1.5,-2.0,-1.0,-2.5],[-3.0,-1.5,-2.5,-1.0]],
                "demand": {{"kind":"truncated_poisson","mean":1.0,"cap":3}},
                "alpha": 0.95
            }},
            "risk": {{"kind":"mean_semideviation","beta":{beta}}},
            "learner": {{"lambda":{lambda},"schedule":{{"a":1,"b":100}},"N":4}},
            "steps": {steps},
            "replications": {replications},
            "seed": {MASTER_SEED},
            "early_marker": 200
        }}"#
    ))
    .unwrap()
}

#[test]
fn c11_fleet_directional_study() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let averse = fleet_desk_config(1.0, 0.0, 20_000, 20);
    let neutral = fleet_desk_config(0.0, 0.0, 20_000, 20);
    let sum_averse = run_experiment(&averse, &dir.path().join("beta1"), 4, false).unwrap();
    let sum_neutral = run_experiment(&neutral, &dir.path().join("beta0"), 4, false).unwrap();

    let early = |s: &serde_json::Value| -> Vec<f64> {
        s["early_avg_profits"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
    };
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ea = early(&sum_averse);
    let en = early(&sum_neutral);
    let avg_a = sum_averse["aggregate"]["mean_avg_profit"].as_f64().unwrap();
    let avg_n = sum_neutral["aggregate"]["mean_avg_profit"].as_f64().unwrap();
    let cdf_a = empirical_cdf(&ea).unwrap();
    let cdf_n = empirical_cdf(&en).unwrap();
    let dom = dominance_check(&cdf_a, &cdf_n);

    // Reproducibility of the pipeline: rerun one arm byte-for-byte.
    let rerun = run_experiment(&averse, &dir.path().join("beta1_again"), 2, false).unwrap();
    let bytes_a = std::fs::read(dir.path().join("beta1/results.csv")).unwrap();
    let bytes_b = std::fs::read(dir.path().join("beta1_again/results.csv")).unwrap();
    let reproducible = bytes_a == bytes_b && rerun == sum_averse;

    // The lambda grid from the published comparison completes end to end.
    let mut grid_files = 0;
    for (gi, (beta, lambda)) in [(0.0, 0.0), (0.0, 0.5), (0.0, 0.9), (1.0, 0.0), (1.0, 0.5), (1.0, 0.9)]
        .iter()
        .enumerate()
    {
        let cfg = fleet_desk_config(*beta, *lambda, 300, 2);
        let sub = dir.path().join(format!("grid{gi}"));
        run_experiment(&cfg, &sub, 2, false).unwrap();
        if sub.join("results.csv").exists() && sub.join("summary.json").exists() {
            grid_files += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let complete = ea.len() == 20 && en.len() == 20 && reproducible && grid_files == 6;
    conclude(
        "11 [fleet-directional-study]",
        complete,
        &format!(
            "20k stages x 20 reps: mean avg profit beta=1: {avg_a:.4} vs beta=0: {avg_n:.4} (diff {:+.4}); \
             t=200 early means {:.4} vs {:.4}; CDF dominance: averse-over-neutral={} (viol {:.3}), \
             neutral-over-averse={} (viol {:.3}) [direction recorded, not asserted]; \
             rerun byte-identical={reproducible}; grid files {grid_files}/6; {secs:.1}s",
            avg_a - avg_n,
            mean(&ea),
            mean(&en),
            dom.a_dominates_b,
            dom.max_violation_a_over_b,
            dom.b_dominates_a,
            dom.max_violation_b_over_a,
        ),
    );
}

#[test]
fn c12_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let p = instance_p();
    let phi = instance_phi();
    let rho = instance_rho();
    let pm = DMatrix::from_fn(5, 5, |i, j| p[i][j]);
    let c = (DMatrix::identity(5, 5) - INSTANCE_ALPHA * &pm) * (&phi * &rho);
    let phi_rows: Vec<Vec<f64>> = (0..5).map(|i| vec![phi[(i, 0)], phi[(i, 1)]]).collect();
    let synthetic = ExperimentConfig::from_json(
        &serde_json::json!({
            "scenario": "synthetic-mdp",
            "mdp": {"n": 5, "alpha": INSTANCE_ALPHA, "P": p, "c": c.as_slice()},
            "features": {"Phi": phi_rows},
            "risk": {"kind": "mean_semideviation", "beta": INSTANCE_BETA},
            "learner": {"lambda": 0.5, "schedule": {"a": 100, "b": 100}, "N": 4},
            "steps": 2_000,
            "replications": 3,
            "seed": MASTER_SEED,
        })
        .to_string(),
    )
    .unwrap();
    let fleet = fleet_desk_config(1.0, 0.5, 1_000, 3);
    let mut all_equal = true;
    for (name, cfg) in [("synthetic", &synthetic), ("fleet", &fleet)] {
        let a = dir.path().join(format!("{name}_a"));
        let b = dir.path().join(format!("{name}_b"));
        run_experiment(cfg, &a, 1, true).unwrap();
        run_experiment(cfg, &b, 3, true).unwrap();
        for file in ["results.csv", "summary.json", "results.svg"] {
            let ba = std::fs::read(a.join(file)).unwrap();
            let bb = std::fs::read(b.join(file)).unwrap();
            if ba != bb {
                all_equal = false;
                println!("  {name}/{file} differs between reruns");
            }
        }
    }
    conclude(
        "12 [reproducibility]",
        all_equal,
        "synthetic and fleet runs repeated with the same master seed produce byte-identical CSV/JSON/SVG outputs",
    );
}
