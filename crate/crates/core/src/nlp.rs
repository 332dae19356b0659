//! Inequality-constrained nonlinear programming.
//!
//! An augmented Lagrangian outer loop drives multipliers and the penalty;
//! each subproblem is minimized by damped BFGS with a backtracking line
//! search. Problems are dense and small (a few hundred variables).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `min f(x)` subject to `c(x) <= 0`.
pub trait NlpProblem {
    fn dim(&self) -> usize;

    fn num_constraints(&self) -> usize;

    /// Objective value and constraint values.
    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// `grad f(x) + sum_k w_k grad c_k(x)`.
    fn weighted_gradient(&mut self, x: &DVector<f64>, weights: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Problem assembled from closures; handy for small problems and tests.
pub struct FnProblem<E, G> {
    pub dim: usize,
    pub num_constraints: usize,
    pub eval: E,
    pub gradient: G,
}

impl<E, G> NlpProblem for FnProblem<E, G>
where
    E: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    G: FnMut(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.eval)(x))
    }

    fn weighted_gradient(&mut self, x: &DVector<f64>, weights: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.gradient)(x, weights))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlpOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol_optimality: f64,
    pub tol_feasibility: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub multiplier_cap: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            max_outer: 30,
            max_inner: 300,
            tol_optimality: 1e-6,
            tol_feasibility: 1e-8,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            multiplier_cap: 1e8,
        }
    }
}

impl NlpOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_outer >= 1
            && self.max_inner >= 1
            && self.tol_optimality > 0.0
            && self.tol_feasibility > 0.0
            && self.penalty_initial > 0.0
            && self.penalty_growth > 1.0
            && self.penalty_max >= self.penalty_initial
            && self.multiplier_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid solver options {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIter,
    InfeasibleStationary,
}

#[derive(Clone, Debug)]
pub struct NlpResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub kkt_residual: f64,
    pub multipliers: DVector<f64>,
    pub status: NlpStatus,
    /// Outer iterations.
    pub iterations: usize,
    pub inner_iterations: usize,
    /// Merit value after every accepted inner step, per outer iteration.
    pub merit_trace: Vec<Vec<f64>>,
}

struct Merit<'a, P: NlpProblem + ?Sized> {
    problem: &'a mut P,
    lambda: DVector<f64>,
    mu: f64,
}

impl<P: NlpProblem + ?Sized> Merit<'_, P> {
    fn value(&mut self, f: f64, c: &DVector<f64>) -> f64 {
        let mut pen = 0.0;
        for (l, ck) in self.lambda.iter().zip(c.iter()) {
            let s = (l + self.mu * ck).max(0.0);
            pen += s * s - l * l;
        }
        f + pen / (2.0 * self.mu)
    }

    fn weights(&self, c: &DVector<f64>) -> DVector<f64> {
        self.lambda.zip_map(c, |l, ck| (l + self.mu * ck).max(0.0))
    }

    /// Merit value, or `None` when the evaluator fails or is non-finite.
    fn try_value(&mut self, x: &DVector<f64>) -> Option<(f64, f64, DVector<f64>)> {
        let (f, c) = self.problem.eval(x).ok()?;
        let m = self.value(f, &c);
        (m.is_finite() && c.iter().all(|v| v.is_finite())).then_some((m, f, c))
    }

    fn gradient(&mut self, x: &DVector<f64>, c: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.weights(c);
        let g = self.problem.weighted_gradient(x, &w)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluatorFailure {
                point: x.iter().copied().collect(),
            });
        }
        Ok(g)
    }
}

fn violation(c: &DVector<f64>) -> f64 {
    c.iter().fold(0.0, |a, &v| a.max(v))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

/// Solves the problem from `x0`, optionally warm-starting the multipliers.
pub fn solve_nlp<P: NlpProblem + ?Sized>(
    problem: &mut P,
    x0: &DVector<f64>,
    multipliers: Option<&DVector<f64>>,
    opts: &NlpOptions,
) -> Result<NlpResult> {
    opts.validate()?;
    let n = problem.dim();
    let nc = problem.num_constraints();
    if x0.len() != n {
        return Err(Error::InvalidInput(format!("initial point has {} entries, expected {n}", x0.len())));
    }
    let lambda = match multipliers {
        Some(l) if l.len() == nc => l.map(|v| v.clamp(0.0, opts.multiplier_cap)),
        Some(_) => return Err(Error::InvalidInput("multiplier warm start has the wrong length".into())),
        None => DVector::zeros(nc),
    };
    let failure = |x: &DVector<f64>| Error::EvaluatorFailure {
        point: x.iter().copied().collect(),
    };
    let mut merit = Merit {
        problem,
        lambda,
        mu: opts.penalty_initial,
    };
    let mut x = x0.clone();
    let (mut f, mut c) = merit.problem.eval(&x).map_err(|_| failure(&x))?;
    if !f.is_finite() || c.iter().any(|v| !v.is_finite()) || c.len() != nc {
        return Err(failure(&x));
    }
    let mut prev_violation = f64::INFINITY;
    let mut inner_total = 0;
    let mut trace = Vec::new();
    let mut status = NlpStatus::MaxIter;
    let mut kkt = f64::INFINITY;
    let mut outer = 0;
    while outer < opts.max_outer {
        outer += 1;
        let mut m = merit.value(f, &c);
        let mut g = merit.gradient(&x, &c)?;
        let mut h = DMatrix::identity(n, n) * (1.0 / inf_norm(&g).max(1.0));
        let mut merits = Vec::new();
        for _ in 0..opts.max_inner {
            if inf_norm(&g) <= opts.tol_optimality {
                break;
            }
            let mut p = -(&h * &g);
            let mut slope = g.dot(&p);
            if !(slope < 0.0) {
                h = DMatrix::identity(n, n) * (1.0 / inf_norm(&g).max(1.0));
                p = -(&h * &g);
                slope = g.dot(&p);
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..50 {
                let trial = &x + &p * alpha;
                if let Some((mt, ft, ct)) = merit.try_value(&trial) {
                    if mt <= m + 1e-4 * alpha * slope {
                        accepted = Some((trial, mt, ft, ct));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((xn, mn, fn_, cn)) = accepted else {
                break;
            };
            inner_total += 1;
            let gn = merit.gradient(&xn, &cn)?;
            let s = &xn - &x;
            let mut y = &gn - &g;
            // Powell damping with B s = -alpha g.
            let bs = &g * (-alpha);
            let sbs = s.dot(&bs);
            let sy = s.dot(&y);
            if sbs > 0.0 && sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                y = &y * theta + &bs * (1.0 - theta);
            }
            let sy = s.dot(&y);
            if sy > 1e-16 * s.norm() * y.norm() && sy > 0.0 {
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                // H+ = H - rho (s hy^T + hy s^T) + (rho^2 yHy + rho) s s^T
                h.ger(-rho, &s, &hy, 1.0);
                h.ger(-rho, &hy, &s, 1.0);
                h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            }
            let stalled = (m - mn).abs() <= 1e-15 * m.abs().max(1.0) && inf_norm(&s) <= 1e-15;
            x = xn;
            f = fn_;
            c = cn;
            g = gn;
            m = mn;
            merits.push(m);
            if stalled {
                break;
            }
        }
        trace.push(merits);
        let inner_stationary = inf_norm(&g) <= opts.tol_optimality.max(1e-6);
        // First-order multiplier update.
        let new_lambda = merit.weights(&c);
        kkt = inf_norm(&g);
        let viol = violation(&c);
        let compl = c
            .iter()
            .zip(new_lambda.iter())
            .fold(0.0f64, |a, (ck, l)| a.max((-ck).min(*l).abs()));
        merit.lambda = new_lambda.map(|v| v.min(opts.multiplier_cap));
        if kkt <= opts.tol_optimality && viol <= opts.tol_feasibility && compl <= opts.tol_optimality {
            status = NlpStatus::Converged;
            break;
        }
        if viol > opts.tol_feasibility && viol > 0.25 * prev_violation {
            if merit.mu >= opts.penalty_max {
                if inner_stationary || outer >= 2 {
                    status = NlpStatus::InfeasibleStationary;
                    break;
                }
            } else {
                merit.mu = (merit.mu * opts.penalty_growth).min(opts.penalty_max);
            }
        }
        prev_violation = viol;
    }
    if status == NlpStatus::MaxIter && violation(&c) > opts.tol_feasibility && merit.mu >= opts.penalty_max {
        status = NlpStatus::InfeasibleStationary;
    }
    Ok(NlpResult {
        max_violation: violation(&c),
        objective: f,
        x,
        kkt_residual: kkt,
        multipliers: merit.lambda,
        status,
        iterations: outer,
        inner_iterations: inner_total,
        merit_trace: trace,
    })
}
