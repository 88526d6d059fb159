//! Muscle redundancy resolution by static optimization.
//!
//! Per frame, solve
//!
//! ```text
//!   minimize   ||a||^2 + w_r ||r||^2
//!   subject to R diag(f_max) a + r = tau,   0 <= a <= 1
//! ```
//!
//! with a primal active-set method. The penalized residual actuators `r`
//! guarantee feasibility when muscles saturate or coordinates are
//! unactuated. For each working set the equality-constrained subproblem is
//! solved in the dual: `(B_F B_F^T + I/w_r) lambda = 2 tau_free`, then
//! `a_F = B_F^T lambda / 2`, `r = lambda / (2 w_r)`, which stays well
//! conditioned for large penalties.
//!
//! The surrounding machinery implements the deterministic fan-out/fan-in:
//! messages are assigned to workers by index modulo N, each worker warm
//! starts from its own previous solution, and a sequencer restores global
//! time order under a delivery deadline.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::telemetry::EventLog;

pub const DEFAULT_RESIDUAL_WEIGHT: f64 = 1e3;
pub const DEFAULT_DEADLINE_S: f64 = 0.5;
pub const DEFAULT_WORKERS: usize = 12;
pub const MAX_QP_ITERATIONS: usize = 500;
const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum SoError {
    ShapeMismatch(String),
    BadWeight(f64),
}

impl fmt::Display for SoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SoError::ShapeMismatch(m) => write!(f, "static optimization shape mismatch: {m}"),
            SoError::BadWeight(w) => write!(f, "residual weight {w} must be > 0"),
        }
    }
}

impl std::error::Error for SoError {}

/// One static-optimization problem instance.
#[derive(Debug, Clone)]
pub struct SoProblem {
    /// Moment arms, coordinates x muscles, m.
    pub moment_arms: DMatrix<f64>,
    /// Max isometric force per muscle, N.
    pub f_max: DVector<f64>,
    /// Target generalized torques, N m.
    pub tau_target: DVector<f64>,
    /// Penalty on the residual actuators.
    pub residual_weight: f64,
}

impl SoProblem {
    pub fn new(
        moment_arms: DMatrix<f64>,
        f_max: DVector<f64>,
        tau_target: DVector<f64>,
        residual_weight: f64,
    ) -> Result<Self, SoError> {
        if moment_arms.ncols() != f_max.len() {
            return Err(SoError::ShapeMismatch(format!(
                "{} moment-arm columns vs {} muscles",
                moment_arms.ncols(),
                f_max.len()
            )));
        }
        if moment_arms.nrows() != tau_target.len() {
            return Err(SoError::ShapeMismatch(format!(
                "{} moment-arm rows vs {} torques",
                moment_arms.nrows(),
                tau_target.len()
            )));
        }
        if !(residual_weight > 0.0) {
            return Err(SoError::BadWeight(residual_weight));
        }
        Ok(SoProblem { moment_arms, f_max, tau_target, residual_weight })
    }

    /// Torque-per-activation matrix `B = R diag(f_max)`.
    fn b_matrix(&self) -> DMatrix<f64> {
        let mut b = self.moment_arms.clone();
        for (j, mut col) in b.column_iter_mut().enumerate() {
            col *= self.f_max[j];
        }
        b
    }
}

/// Raw solver output (no pipeline metadata).
#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Muscle activations in `[0, 1]`.
    pub activations: DVector<f64>,
    /// Residual actuator torques `tau - B a`, N m.
    pub residuals: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max KKT violation at the returned point.
    pub kkt_residual: f64,
}

/// Activation vector plus pipeline bookkeeping.
#[derive(Debug, Clone)]
pub struct ActivationResult {
    pub t: f64,
    pub activations: DVector<f64>,
    pub residuals: DVector<f64>,
    pub converged: bool,
    pub kkt_residual: f64,
    pub worker: usize,
    pub events: EventLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// KKT residual of `a` given the equality multiplier `lambda`: stationarity
/// for interior variables, multiplier sign conditions at the bounds, bound
/// violations. The equality constraint holds by construction
/// (`r := tau - B a`). Using the solved dual multiplier avoids the
/// cancellation blow-up of recomputing it as `2 w (tau - B a)` for large
/// penalties.
fn kkt_residual_of(b: &DMatrix<f64>, a: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let grad = a * 2.0 - b.transpose() * lambda;
    let mut worst: f64 = 0.0;
    for i in 0..a.len() {
        let g = grad[i];
        if a[i] <= 1e-12 {
            worst = worst.max(-g); // need g >= 0 at the lower bound
        } else if a[i] >= 1.0 - 1e-12 {
            worst = worst.max(g); // need g <= 0 at the upper bound
        } else {
            worst = worst.max(g.abs());
        }
        worst = worst.max(-a[i]).max(a[i] - 1.0);
    }
    worst
}

/// Solve one activation problem from a warm start (clamped into bounds).
pub fn solve_activation(p: &SoProblem, warm: &DVector<f64>) -> Result<SolveResult, SoError> {
    let m = p.f_max.len();
    let nc = p.tau_target.len();
    if warm.len() != m {
        return Err(SoError::ShapeMismatch(format!("warm start length {} vs {m}", warm.len())));
    }
    let b = p.b_matrix();
    let w = p.residual_weight;

    if m == 0 {
        return Ok(SolveResult {
            activations: DVector::zeros(0),
            residuals: p.tau_target.clone(),
            converged: true,
            iterations: 0,
            kkt_residual: 0.0,
        });
    }

    let mut a = warm.map(|v| v.clamp(0.0, 1.0));
    let mut bound: Vec<Bound> = a
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                Bound::Lower
            } else if v >= 1.0 {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();

    let mut iterations = 0;
    let mut converged = false;
    let mut lambda_solved = DVector::zeros(nc);
    while iterations < MAX_QP_ITERATIONS {
        iterations += 1;
        let free: Vec<usize> = (0..m).filter(|&i| bound[i] == Bound::Free).collect();

        // Torque left for the free muscles after the bound contributions.
        let mut tau_free = p.tau_target.clone();
        for i in 0..m {
            if bound[i] == Bound::Upper {
                tau_free -= b.column(i);
            }
        }

        // Dual solve for the current working set.
        let bf = b.select_columns(free.iter());
        let mut mmat = &bf * bf.transpose();
        for d in 0..nc {
            mmat[(d, d)] += 1.0 / w;
        }
        let chol = mmat.clone().cholesky().expect("B_F B_F^T + I/w is positive definite");
        let rhs = &tau_free * 2.0;
        let mut lambda = chol.solve(&rhs);
        // One refinement pass; the ridge I/w makes the system arbitrarily
        // ill-conditioned for large penalties with few free muscles.
        let defect = &rhs - &mmat * &lambda;
        lambda += chol.solve(&defect);
        let a_cand = bf.transpose() * &lambda / 2.0;
        lambda_solved = lambda;

        // Feasible candidate: accept, then test optimality of the bounds.
        let violation =
            a_cand.iter().map(|&v| (-v).max(v - 1.0)).fold(f64::NEG_INFINITY, f64::max);
        if free.is_empty() || violation <= 1e-12 {
            for (k, &i) in free.iter().enumerate() {
                a[i] = a_cand[k].clamp(0.0, 1.0);
            }
            // Bound multipliers from the solved dual: release the worst
            // violator.
            let grad = &a * 2.0 - b.transpose() * &lambda_solved;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..m {
                let viol = match bound[i] {
                    Bound::Lower => -grad[i],
                    Bound::Upper => grad[i],
                    Bound::Free => continue,
                };
                if viol > KKT_TOL && worst.map_or(true, |(_, v)| viol > v) {
                    worst = Some((i, viol));
                }
            }
            match worst {
                Some((i, _)) => bound[i] = Bound::Free,
                None => {
                    converged = true;
                    break;
                }
            }
        } else {
            // Step toward the candidate until the first bound is hit.
            let mut alpha = 1.0f64;
            let mut hit: Option<(usize, Bound)> = None;
            for (k, &i) in free.iter().enumerate() {
                let d = a_cand[k] - a[i];
                if d < -1e-15 {
                    let step = -a[i] / d;
                    if step < alpha {
                        alpha = step;
                        hit = Some((i, Bound::Lower));
                    }
                } else if d > 1e-15 {
                    let step = (1.0 - a[i]) / d;
                    if step < alpha {
                        alpha = step;
                        hit = Some((i, Bound::Upper));
                    }
                }
            }
            for (k, &i) in free.iter().enumerate() {
                a[i] = (a[i] + alpha * (a_cand[k] - a[i])).clamp(0.0, 1.0);
            }
            if let Some((i, side)) = hit {
                a[i] = if side == Bound::Lower { 0.0 } else { 1.0 };
                bound[i] = side;
            }
        }
    }

    // On convergence the residual actuators come from the dual multiplier
    // (r-stationarity: 2 w r = lambda, exact by construction); the refined
    // solve keeps the equality defect near machine precision. On an
    // iteration-cap exit fall back to the exactly-feasible remainder.
    let kkt = kkt_residual_of(&b, &a, &lambda_solved);
    let converged = converged && kkt < KKT_TOL;
    let residuals =
        if converged { &lambda_solved / (2.0 * w) } else { &p.tau_target - &b * &a };
    Ok(SolveResult { activations: a, residuals, converged, iterations, kkt_residual: kkt })
}

/// Deterministic scheduler assignment: message `i` goes to worker
/// `i mod n_workers`.
pub fn dispatch(msg_index: usize, n_workers: usize) -> usize {
    assert!(n_workers >= 1, "need at least one worker");
    msg_index % n_workers
}

/// Warm-start state of one worker: its previous solution, or 0.1 uniformly
/// before the first solve.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub warm: DVector<f64>,
}

impl WorkerState {
    pub fn new(n_muscles: usize) -> Self {
        WorkerState { warm: DVector::from_element(n_muscles, 0.1) }
    }

    pub fn solve(&mut self, p: &SoProblem) -> Result<SolveResult, SoError> {
        let result = solve_activation(p, &self.warm)?;
        self.warm = result.activations.clone();
        Ok(result)
    }
}

/// Outcome of offering one result to the sequencer.
#[derive(Debug, Clone)]
pub enum SeqOutcome {
    Emit(ActivationResult),
    /// End-to-end age exceeded the deadline.
    DiscardLate(ActivationResult),
    /// A later timestamp was already emitted.
    DiscardOrder(ActivationResult),
}

/// Fan-in sequencer: emits results strictly ordered by `t`, discarding
/// messages that blew the deadline or arrived after a later timestamp was
/// already emitted. Discards are counted, never raised.
#[derive(Debug, Clone)]
pub struct Sequencer {
    deadline: f64,
    last_emitted_t: Option<f64>,
    pub emitted: u64,
    pub discarded_late: u64,
    pub discarded_order: u64,
}

impl Sequencer {
    pub fn new(deadline: f64) -> Self {
        assert!(deadline > 0.0, "deadline must be > 0");
        Sequencer {
            deadline,
            last_emitted_t: None,
            emitted: 0,
            discarded_late: 0,
            discarded_order: 0,
        }
    }

    pub fn deadline(&self) -> f64 {
        self.deadline
    }

    pub fn received(&self) -> u64 {
        self.emitted + self.discarded_late + self.discarded_order
    }

    pub fn offer(&mut self, result: ActivationResult) -> SeqOutcome {
        let age = result.events.total().unwrap_or(f64::INFINITY);
        if age > self.deadline {
            self.discarded_late += 1;
            return SeqOutcome::DiscardLate(result);
        }
        if let Some(last) = self.last_emitted_t {
            if result.t <= last {
                self.discarded_order += 1;
                return SeqOutcome::DiscardOrder(result);
            }
        }
        self.last_emitted_t = Some(result.t);
        self.emitted += 1;
        SeqOutcome::Emit(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn problem(
        arms: &[&[f64]],
        f_max: &[f64],
        tau: &[f64],
        w: f64,
    ) -> SoProblem {
        let nr = arms.len();
        let nc = arms[0].len();
        let r = DMatrix::from_fn(nr, nc, |i, j| arms[i][j]);
        SoProblem::new(
            r,
            DVector::from_column_slice(f_max),
            DVector::from_column_slice(tau),
            w,
        )
        .unwrap()
    }

    #[test]
    fn zero_torque_gives_zero_activation() {
        let p = problem(&[&[0.05, 0.04]], &[1000.0, 1000.0], &[0.0], 1e3);
        let out = solve_activation(&p, &DVector::from_element(2, 0.1)).unwrap();
        assert!(out.converged);
        assert!(out.activations.amax() < 1e-12);
        assert!(out.residuals.amax() < 1e-12);
    }

    #[test]
    fn two_muscle_closed_form() {
        // min ||a||^2 s.t. 50 a1 + 40 a2 = 30  =>  a = 30 (50, 40) / 4100.
        let p = problem(&[&[0.05, 0.04]], &[1000.0, 1000.0], &[30.0], 1e8);
        let out = solve_activation(&p, &DVector::from_element(2, 0.1)).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.activations[0], 30.0 * 50.0 / 4100.0, epsilon = 1e-6);
        assert_relative_eq!(out.activations[1], 30.0 * 40.0 / 4100.0, epsilon = 1e-6);
        assert_relative_eq!(out.activations[0], 0.36585, epsilon = 1e-5);
        assert_relative_eq!(out.activations[1], 0.29268, epsilon = 1e-5);
    }

    #[test]
    fn saturation_fills_residual() {
        // Capacity 90 N m at a = 1, target 100: saturate and push 10 N m
        // into the residual.
        let p = problem(&[&[0.05, 0.04]], &[1000.0, 1000.0], &[100.0], 1e3);
        let out = solve_activation(&p, &DVector::from_element(2, 0.1)).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.activations[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.activations[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.residuals[0], 10.0, epsilon = 1e-6);
    }

    #[test]
    fn equality_feasibility_by_construction() {
        let p = problem(
            &[&[0.05, -0.03, 0.01], &[0.0, 0.04, -0.02]],
            &[900.0, 1200.0, 700.0],
            &[12.0, -4.0],
            1e3,
        );
        let out = solve_activation(&p, &DVector::from_element(3, 0.1)).unwrap();
        let b = p.b_matrix();
        let eq = &b * &out.activations + &out.residuals - &p.tau_target;
        assert!(eq.amax() < 1e-8);
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn kkt_conditions_hold_on_random_problems() {
        let mut s = 2024u64;
        for trial in 0..60 {
            let nc = 2 + (trial % 3);
            let m = 3 + (trial % 5);
            let r = DMatrix::from_fn(nc, m, |_, _| 0.06 * lcg(&mut s));
            let f_max = DVector::from_fn(m, |_, _| 800.0 + 400.0 * lcg(&mut s).abs());
            let tau = DVector::from_fn(nc, |_, _| 25.0 * lcg(&mut s));
            let p = SoProblem::new(r, f_max, tau, 1e3).unwrap();
            let warm = DVector::from_fn(m, |_, _| 0.5 + 0.5 * lcg(&mut s));
            let out = solve_activation(&p, &warm).unwrap();
            assert!(out.converged, "trial {trial} did not converge");
            assert!(out.kkt_residual < 1e-6, "trial {trial}: kkt {}", out.kkt_residual);
            // Bounds.
            for &a in out.activations.iter() {
                assert!((-1e-9..=1.0 + 1e-9).contains(&a));
            }
            // Interior gradient / bound sign conditions, recomputed here.
            let b = p.b_matrix();
            let lambda = &out.residuals * (2.0 * p.residual_weight);
            let grad = &out.activations * 2.0 - b.transpose() * lambda;
            for i in 0..m {
                let a = out.activations[i];
                if a > 1e-9 && a < 1.0 - 1e-9 {
                    assert!(grad[i].abs() < 1e-6, "interior gradient {}", grad[i]);
                } else if a <= 1e-9 {
                    assert!(grad[i] > -1e-6, "lower-bound sign {}", grad[i]);
                } else {
                    assert!(grad[i] < 1e-6, "upper-bound sign {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn unactuated_coordinates_fall_to_residuals() {
        // Second coordinate has no muscle at all.
        let p = problem(&[&[0.05], &[0.0]], &[1000.0], &[10.0, 7.5], 1e3);
        let out = solve_activation(&p, &DVector::from_element(1, 0.1)).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.residuals[1], 7.5, epsilon = 1e-9);
    }

    #[test]
    fn dispatch_is_index_mod_workers() {
        assert_eq!(dispatch(0, 4), 0);
        assert_eq!(dispatch(5, 4), 1);
        assert_eq!(dispatch(7, 12), 7);
        for i in 0..100 {
            for n in [1, 4, 6, 12] {
                assert_eq!(dispatch(i, n), i % n);
            }
        }
    }

    fn result_at(t: f64, produced: f64, done: f64) -> ActivationResult {
        let events = EventLog::new()
            .record(0, produced)
            .unwrap()
            .record(9, done)
            .unwrap();
        ActivationResult {
            t,
            activations: DVector::zeros(1),
            residuals: DVector::zeros(1),
            converged: true,
            kkt_residual: 0.0,
            worker: 0,
            events,
        }
    }

    #[test]
    fn sequencer_emits_fresh_in_order_results() {
        let mut seq = Sequencer::new(0.5);
        for k in 0..10 {
            let t = k as f64 * 0.01;
            match seq.offer(result_at(t, t, t + 0.3)) {
                SeqOutcome::Emit(r) => assert_eq!(r.t, t),
                other => panic!("expected emit, got {other:?}"),
            }
        }
        assert_eq!(seq.emitted, 10);
        assert_eq!(seq.received(), 10);
    }

    #[test]
    fn sequencer_discards_out_of_order() {
        let mut seq = Sequencer::new(0.5);
        assert!(matches!(seq.offer(result_at(0.02, 0.02, 0.1)), SeqOutcome::Emit(_)));
        // t1 < t2 arrives after t2 was emitted.
        assert!(matches!(seq.offer(result_at(0.01, 0.01, 0.1)), SeqOutcome::DiscardOrder(_)));
        assert_eq!(seq.emitted, 1);
        assert_eq!(seq.discarded_order, 1);
    }

    #[test]
    fn sequencer_deadline_accounting_matches_count_oracle() {
        // 1% of results exceed 0.5 s end-to-end age.
        let mut seq = Sequencer::new(0.5);
        let n = 1000;
        let mut late_oracle = 0;
        for k in 0..n {
            let t = k as f64 * 0.01;
            let age = if k % 100 == 37 { 0.65 } else { 0.31 };
            if age > 0.5 {
                late_oracle += 1;
            }
            seq.offer(result_at(t, t, t + age));
        }
        assert_eq!(seq.received(), n as u64);
        assert_eq!(seq.discarded_late, late_oracle as u64);
        assert_eq!(seq.emitted, (n - late_oracle) as u64);
        let on_time = seq.emitted as f64 / n as f64;
        assert_relative_eq!(on_time, 0.99, epsilon = 1e-12);
    }

    #[test]
    fn worker_warm_start_uses_previous_solution() {
        let p = problem(&[&[0.05, 0.04]], &[1000.0, 1000.0], &[30.0], 1e3);
        let mut w = WorkerState::new(2);
        assert_relative_eq!(w.warm[0], 0.1);
        let first = w.solve(&p).unwrap();
        assert_relative_eq!(w.warm[0], first.activations[0]);
        // Re-solving the same problem from its own solution converges
        // immediately and identically.
        let second = w.solve(&p).unwrap();
        assert_relative_eq!(first.activations[0], second.activations[0], epsilon = 1e-12);
        assert!(second.iterations <= first.iterations);
    }

    #[test]
    fn shape_errors_are_reported() {
        let r = DMatrix::zeros(2, 3);
        assert!(SoProblem::new(r.clone(), DVector::zeros(2), DVector::zeros(2), 1e3).is_err());
        assert!(SoProblem::new(r.clone(), DVector::zeros(3), DVector::zeros(3), 1e3).is_err());
        assert!(SoProblem::new(r, DVector::zeros(3), DVector::zeros(2), -1.0).is_err());
    }
}
