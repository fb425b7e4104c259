//! Finite Markov chains under a fixed policy: validation, ergodicity
//! diagnostics, stationary analysis, multistep matrices and seeded simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::seeding;

/// Row-stochasticity tolerance enforced on construction.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Above this size the stationary distribution switches to power iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

/// A finite Markov chain with per-state costs and a discount factor.
///
/// This is the policy-evaluation object: the transition matrix and cost
/// vector are those induced by a fixed policy.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    n: usize,
    p: DMatrix<f64>,
    c: DVector<f64>,
    alpha: f64,
}

#[derive(Deserialize)]
struct ChainJson {
    n: usize,
    alpha: f64,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    c: Vec<f64>,
}

impl MarkovChain {
    /// Validates and builds a chain. `p` is row-major.
    pub fn new(p: Vec<Vec<f64>>, c: Vec<f64>, alpha: f64) -> Result<Self> {
        let n = p.len();
        if n == 0 {
            return Err(Error::Invalid("transition matrix is empty".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Invalid(format!(
                "discount alpha must lie strictly inside (0,1), got {alpha}"
            )));
        }
        if c.len() != n {
            return Err(Error::Invalid(format!(
                "cost vector has length {} but the chain has {} states",
                c.len(),
                n
            )));
        }
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Invalid(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::Invalid(format!(
                        "P[{i}][{j}] = {x} is not a probability"
                    )));
                }
                sum += x;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Invalid(format!(
                    "row {i} of P sums to {sum}, deviation exceeds {ROW_SUM_TOL}"
                )));
            }
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("cost vector has a non-finite entry".into()));
        }
        let p = DMatrix::from_fn(n, n, |i, j| p[i][j]);
        Ok(MarkovChain { n, p, c: DVector::from_vec(c), alpha })
    }

    /// Loads the `{"n":…,"alpha":…,"P":[[…]],"c":[…]}` document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ChainJson =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("mdp file: {e}")))?;
        if doc.p.len() != doc.n {
            return Err(Error::Config(format!(
                "mdp file declares n={} but P has {} rows",
                doc.n,
                doc.p.len()
            )));
        }
        Self::new(doc.p, doc.c, doc.alpha)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn costs(&self) -> &DVector<f64> {
        &self.c
    }

    /// Row `i` of the transition matrix as a contiguous vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.p[(i, j)]).collect()
    }

    /// Checks strong connectivity and aperiodicity of the positive-probability
    /// graph, naming the violating structure on failure.
    pub fn check_ergodic(&self) -> Result<()> {
        let n = self.n;
        let reached = |transpose: bool| -> Vec<bool> {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let x = if transpose { self.p[(j, i)] } else { self.p[(i, j)] };
                    if x > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen
        };
        let fwd = reached(false);
        if let Some(i) = fwd.iter().position(|&s| !s) {
            return Err(Error::NonErgodic(format!(
                "state {i} is not reachable from state 0 (reducible chain)"
            )));
        }
        let bwd = reached(true);
        if let Some(i) = bwd.iter().position(|&s| !s) {
            return Err(Error::NonErgodic(format!(
                "state 0 is not reachable from state {i} (reducible chain)"
            )));
        }
        // Period = gcd of (depth(u) + 1 - depth(v)) over all edges, with depths
        // from a BFS rooted at state 0; valid because the graph is strongly
        // connected.
        let mut depth = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        depth[0] = 0;
        queue.push_back(0usize);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if self.p[(i, j)] > 0.0 && depth[j] == usize::MAX {
                    depth[j] = depth[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        let mut g: u64 = 0;
        for i in 0..n {
            for j in 0..n {
                if self.p[(i, j)] > 0.0 {
                    let diff = (depth[i] as i64 + 1 - depth[j] as i64).unsigned_abs();
                    g = gcd(g, diff);
                }
            }
        }
        if g != 1 {
            return Err(Error::NonErgodic(format!("chain is periodic with period {g}")));
        }
        Ok(())
    }

    /// Stationary distribution of an ergodic chain.
    ///
    /// Solved exactly as the linear system `(P^T - I; 1^T) q = (0; 1)` for
    /// `n <= 2000`; power iteration above. Exactness matters because `q`
    /// defines the projection norm used everywhere downstream.
    pub fn stationary_distribution(&self, tol: f64) -> Result<StationaryDistribution> {
        if tol <= 0.0 {
            return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
        }
        self.check_ergodic()?;
        let q = if self.n <= DIRECT_SOLVE_LIMIT {
            self.stationary_direct()?
        } else {
            self.stationary_power(tol)?
        };
        let residual = self.stationary_residual(&q);
        if residual > tol {
            return Err(Error::Numerical(format!(
                "stationary solve residual {residual} exceeds tolerance {tol}"
            )));
        }
        if q.iter().any(|&x| x <= 0.0) {
            return Err(Error::Numerical(
                "stationary distribution has a nonpositive entry on an ergodic chain".into(),
            ));
        }
        Ok(StationaryDistribution { q, residual })
    }

    fn stationary_direct(&self) -> Result<DVector<f64>> {
        let n = self.n;
        // Overdetermined (n+1) x n system solved via normal equations of the
        // stacked matrix is avoided; instead replace one balance equation by
        // the normalization row, which is exact for ergodic chains.
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = self.p[(j, i)] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        let lu = a.lu();
        let mut q = lu
            .solve(&b)
            .ok_or_else(|| Error::Numerical("singular stationary system".into()))?;
        let total: f64 = q.iter().sum();
        q /= total;
        Ok(q)
    }

    fn stationary_power(&self, tol: f64) -> Result<DVector<f64>> {
        let n = self.n;
        let mut q = DVector::from_element(n, 1.0 / n as f64);
        for _ in 0..1_000_000 {
            let next = (q.transpose() * &self.p).transpose();
            let diff = (&next - &q).amax();
            q = next;
            if diff <= tol * 0.1 {
                let total: f64 = q.iter().sum();
                return Ok(q / total);
            }
        }
        Err(Error::Numerical("power iteration did not converge".into()))
    }

    fn stationary_residual(&self, q: &DVector<f64>) -> f64 {
        ((q.transpose() * &self.p).transpose() - q).amax()
    }

    /// Row-wise solution of the Poisson equation
    /// `nu(i) = e_i - q + sum_j P_ij nu(j)`.
    ///
    /// Returned as the deviation matrix `Z - 1 q^T` with
    /// `Z = (I - P + 1 q^T)^{-1}`, whose `i`th row equals
    /// `sum_t (row i of P^t - q^T)`. Diagnostic use only.
    pub fn poisson_solution(&self, q: &StationaryDistribution) -> Result<DMatrix<f64>> {
        let n = self.n;
        if q.q.len() != n {
            return Err(Error::Invalid("stationary vector has wrong length".into()));
        }
        let ones = DVector::from_element(n, 1.0);
        let m = DMatrix::identity(n, n) - &self.p + &ones * q.q.transpose();
        let lu = m.lu();
        let z = lu
            .solve(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("singular Poisson system".into()))?;
        Ok(z - &ones * q.q.transpose())
    }

    /// Maximum row residual of the Poisson equation for a candidate solution.
    pub fn poisson_residual(&self, q: &StationaryDistribution, nu: &DMatrix<f64>) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for k in 0..n {
                let e_ik = if i == k { 1.0 } else { 0.0 };
                let mut rhs = e_ik - q.q[k];
                for j in 0..n {
                    rhs += self.p[(i, j)] * nu[(j, k)];
                }
                worst = worst.max((nu[(i, k)] - rhs).abs());
            }
        }
        worst
    }

    /// Geometrically averaged multistep transition matrix
    /// `(1 - lambda*alpha) * sum_l (lambda*alpha)^l P^l`,
    /// computed as the exact solution of `(I - lambda*alpha*P) X = (1-lambda*alpha) I`.
    pub fn multistep_matrix(&self, lambda: f64) -> Result<MultistepMatrix> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Invalid(format!("lambda must lie in [0,1], got {lambda}")));
        }
        let la = lambda * self.alpha;
        if la >= 1.0 {
            return Err(Error::Invalid(format!(
                "lambda*alpha = {la} must be strictly below 1"
            )));
        }
        let n = self.n;
        let m = DMatrix::identity(n, n) - la * &self.p;
        let lu = m.lu();
        let x = lu
            .solve(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("singular multistep system".into()))?;
        let pbar = (1.0 - la) * x;
        for i in 0..n {
            let s: f64 = (0..n).map(|j| pbar[(i, j)]).sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Numerical(format!(
                    "multistep matrix row {i} sums to {s}"
                )));
            }
        }
        Ok(MultistepMatrix { pbar, lambda, alpha: self.alpha })
    }

    /// Risk-neutral policy value `v = (I - alpha P)^{-1} c`.
    pub fn neutral_policy_value(&self) -> Result<DVector<f64>> {
        let n = self.n;
        let m = DMatrix::identity(n, n) - self.alpha * &self.p;
        m.lu()
            .solve(&self.c)
            .ok_or_else(|| Error::Numerical("singular policy-evaluation system".into()))
    }

    /// Draws one successor of state `i` by inverse-CDF sampling.
    pub fn sample_successor(&self, i: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = i;
        for j in 0..self.n {
            let p = self.p[(i, j)];
            if p > 0.0 {
                acc += p;
                last_positive = j;
                if u < acc {
                    return j;
                }
            }
        }
        last_positive
    }

    /// Simulates `steps` transitions from `start` with an explicit generator.
    pub fn simulate_with(
        &self,
        start: usize,
        steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        if start >= self.n {
            return Err(Error::Invalid(format!(
                "start state {start} out of range for {} states",
                self.n
            )));
        }
        let mut states = Vec::with_capacity(steps + 1);
        states.push(start);
        let mut i = start;
        for _ in 0..steps {
            i = self.sample_successor(i, rng);
            states.push(i);
        }
        Ok(states)
    }

    /// Seeded simulation; trajectories with equal seeds are identical.
    pub fn simulate(&self, start: usize, steps: usize, seed: u64) -> Result<Trajectory> {
        let mut rng = seeding::stream_rng(seed, seeding::STREAM_ENV);
        let states = self.simulate_with(start, steps, &mut rng)?;
        Ok(Trajectory { states, seed })
    }
}

/// Stationary probabilities together with the achieved balance residual.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    pub q: DVector<f64>,
    pub residual: f64,
}

/// The matrix `(1-lambda*alpha) sum_l (lambda*alpha)^l P^l`.
#[derive(Debug, Clone)]
pub struct MultistepMatrix {
    pub pbar: DMatrix<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

/// A simulated state sequence; `states[0]` is the start state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of transitions taken.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `sqrt(sum_i q_i w_i^2)`, the norm induced by the stationary weights.
pub fn q_norm(q: &DVector<f64>, w: &DVector<f64>) -> f64 {
    q.iter().zip(w.iter()).map(|(&qi, &wi)| qi * wi * wi).sum::<f64>().sqrt()
}

/// `sum_i q_i v_i w_i`.
pub fn q_dot(q: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    q.iter()
        .zip(v.iter())
        .zip(w.iter())
        .map(|((&qi, &vi), &wi)| qi * vi * wi)
        .sum()
}
