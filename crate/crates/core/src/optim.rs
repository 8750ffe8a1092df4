//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! Both model layers express fitting as minimisation of a negated
//! log-likelihood; objectives signal failure regions (e.g. a non-positive
//! definite kernel matrix) by returning `f64::INFINITY`, which the line
//! search treats as an overshoot and backs away from.

use nalgebra::DVector;
use std::collections::VecDeque;

use crate::error::{Result, RqkError};

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const VALUE_STAGNATION: f64 = 1e-10;

/// A smooth objective: `eval` returns the value and gradient at a point.
pub struct Objective<F>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    pub eval: F,
    pub dim: usize,
    /// Optional diagonal curvature estimate; when present it replaces the
    /// scalar initial inverse-Hessian scaling in the two-loop recursion.
    pub precondition: Option<DVector<f64>>,
}

impl<F> Objective<F>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    pub fn new(dim: usize, eval: F) -> Self {
        Objective {
            eval,
            dim,
            precondition: None,
        }
    }

    pub fn with_precondition(mut self, diag: DVector<f64>) -> Self {
        self.precondition = Some(diag);
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x_opt: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per accepted iterate: (value, gradient inf-norm).
    pub trace: Vec<(f64, f64)>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

fn two_loop(
    grad: &DVector<f64>,
    history: &VecDeque<Pair>,
    precondition: Option<&DVector<f64>>,
) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * pair.s.dot(&q);
        q.axpy(-alpha, &pair.y, 1.0);
        alphas.push(alpha);
    }
    let mut r = match precondition {
        Some(d) => {
            // H0 = γ_D D⁻¹ with γ_D = s'y / (y'D⁻¹y); reduces to the plain
            // scalar scaling when D is a multiple of the identity
            let gamma = history
                .back()
                .map(|p| p.s.dot(&p.y) / p.y.component_div(d).dot(&p.y))
                .unwrap_or(1.0);
            q.component_div(d) * gamma
        }
        None => {
            let gamma = history
                .back()
                .map(|p| p.s.dot(&p.y) / p.y.dot(&p.y))
                .unwrap_or(1.0);
            q * gamma
        }
    };
    for (pair, alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * pair.y.dot(&r);
        r.axpy(alpha - beta, &pair.s, 1.0);
    }
    r
}

struct LineSearchOutcome {
    x: DVector<f64>,
    value: f64,
    grad: DVector<f64>,
}

/// Strong Wolfe line search (bracketing + zoom with quadratic interpolation).
fn strong_wolfe<F>(
    eval: &F,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    direction: &DVector<f64>,
) -> Result<LineSearchOutcome>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let dphi0 = g0.dot(direction);
    debug_assert!(dphi0 < 0.0, "line search needs a descent direction");
    let phi = |alpha: f64| {
        let xt = x + direction * alpha;
        let (f, g) = eval(&xt);
        let d = g.dot(direction);
        (xt, f, g, d)
    };

    let mut evals = 0usize;
    let max_evals = 60usize;
    let mut alpha_prev = 0.0;
    let mut phi_prev = f0;
    let mut dphi_prev = dphi0;
    let mut alpha = 1.0;
    let mut bracket: Option<(f64, f64, f64, f64, f64, f64)> = None; // lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi

    for i in 0..20 {
        let (xt, f, g, d) = phi(alpha);
        evals += 1;
        if !f.is_finite() || f > f0 + WOLFE_C1 * alpha * dphi0 || (i > 0 && f >= phi_prev) {
            bracket = Some((alpha_prev, phi_prev, dphi_prev, alpha, f, d));
            break;
        }
        if d.abs() <= -WOLFE_C2 * dphi0 {
            // Wolfe holds; if the slope is still substantial, one secant step
            // toward the line minimum (exact for quadratic φ) tightens it
            if d.abs() > 0.25 * dphi0.abs() && (dphi0 - d).abs() > 0.0 {
                let alpha_star = alpha * dphi0 / (dphi0 - d);
                if alpha_star.is_finite() && alpha_star > 0.0 {
                    let (xs, fs, gs, ds) = phi(alpha_star);
                    if fs.is_finite()
                        && fs <= f
                        && fs <= f0 + WOLFE_C1 * alpha_star * dphi0
                        && ds.abs() <= -WOLFE_C2 * dphi0
                    {
                        return Ok(LineSearchOutcome {
                            x: xs,
                            value: fs,
                            grad: gs,
                        });
                    }
                }
            }
            return Ok(LineSearchOutcome {
                x: xt,
                value: f,
                grad: g,
            });
        }
        if d >= 0.0 {
            bracket = Some((alpha, f, d, alpha_prev, phi_prev, dphi_prev));
            break;
        }
        alpha_prev = alpha;
        phi_prev = f;
        dphi_prev = d;
        alpha = (alpha * 2.0).min(1e6);
    }

    let (mut lo, mut phi_lo, mut dphi_lo, mut hi, mut phi_hi, _dphi_hi) =
        bracket.ok_or(RqkError::LineSearchFailed(max_evals))?;

    while evals < max_evals {
        // quadratic interpolation from (lo, phi_lo, dphi_lo) and (hi, phi_hi),
        // safeguarded into the middle of the interval
        let mut trial = if phi_hi.is_finite() {
            let denom = 2.0 * (phi_hi - phi_lo - dphi_lo * (hi - lo));
            if denom.abs() > 1e-300 {
                lo - dphi_lo * (hi - lo) * (hi - lo) / denom
            } else {
                (lo + hi) / 2.0
            }
        } else {
            lo + 0.25 * (hi - lo)
        };
        let lo_hi_min = lo.min(hi);
        let lo_hi_max = lo.max(hi);
        let width = lo_hi_max - lo_hi_min;
        if !trial.is_finite() || trial <= lo_hi_min + 0.1 * width || trial >= lo_hi_max - 0.1 * width
        {
            trial = (lo + hi) / 2.0;
        }
        let (xt, f, g, d) = phi(trial);
        evals += 1;
        if !f.is_finite() || f > f0 + WOLFE_C1 * trial * dphi0 || f >= phi_lo {
            hi = trial;
            phi_hi = f;
        } else {
            if d.abs() <= -WOLFE_C2 * dphi0 {
                return Ok(LineSearchOutcome {
                    x: xt,
                    value: f,
                    grad: g,
                });
            }
            if d * (hi - lo) >= 0.0 {
                hi = lo;
                phi_hi = phi_lo;
            }
            lo = trial;
            phi_lo = f;
            dphi_lo = d;
        }
        if (hi - lo).abs() < 1e-16 * lo.abs().max(1.0) {
            // interval collapsed; accept lo if it at least makes progress
            if phi_lo < f0 {
                let (xt, f, g, _) = phi(lo);
                return Ok(LineSearchOutcome {
                    x: xt,
                    value: f,
                    grad: g,
                });
            }
            return Err(RqkError::LineSearchFailed(evals));
        }
    }
    Err(RqkError::LineSearchFailed(evals))
}

/// Minimises the objective; deterministic for identical inputs.
pub fn lbfgs<F>(obj: &Objective<F>, x0: &DVector<f64>, opts: &LbfgsOptions) -> Result<OptimResult>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    if x0.len() != obj.dim {
        return Err(RqkError::DimensionMismatch(format!(
            "objective has dim {}, start has {}",
            obj.dim,
            x0.len()
        )));
    }
    if let Some(d) = &obj.precondition {
        if d.len() != obj.dim || d.iter().any(|&v| !(v > 0.0)) {
            return Err(RqkError::InvalidArgument(
                "preconditioner must be a positive diagonal of objective dimension".into(),
            ));
        }
    }

    let mut x = x0.clone();
    let (mut f, mut g) = (obj.eval)(&x);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(RqkError::NonFiniteObjective);
    }

    let mut trace = Vec::new();
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut converged = inf_norm(&g) < opts.tol;
    let mut iterations = 0usize;

    while !converged && iterations < opts.max_iter {
        let mut direction = -two_loop(&g, &history, obj.precondition.as_ref());
        if direction.dot(&g) >= 0.0 {
            // stale curvature; restart from (preconditioned) steepest descent
            history.clear();
            direction = match &obj.precondition {
                Some(d) => -g.component_div(d),
                None => -g.clone(),
            };
        }

        let outcome = match strong_wolfe(&obj.eval, &x, f, &g, &direction) {
            Ok(o) => o,
            Err(e) => {
                history.clear();
                let direction = match &obj.precondition {
                    Some(d) => -g.component_div(d),
                    None => -g.clone(),
                };
                match strong_wolfe(&obj.eval, &x, f, &g, &direction) {
                    Ok(o) => o,
                    // a stall before any progress is an error; afterwards the
                    // best iterate is returned with converged = false
                    Err(_) if iterations > 0 => break,
                    Err(_) => return Err(e),
                }
            }
        };

        let s = &outcome.x - &x;
        let y = &outcome.grad - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                rho: 1.0 / sy,
                s,
                y,
            });
        }

        let f_prev = f;
        x = outcome.x;
        f = outcome.value;
        g = outcome.grad;
        iterations += 1;
        let gnorm = inf_norm(&g);
        trace.push((f, gnorm));

        if gnorm < opts.tol {
            converged = true;
            break;
        }
        if (f_prev - f).abs() <= VALUE_STAGNATION * f_prev.abs().max(f.abs()) {
            break;
        }
    }

    Ok(OptimResult {
        grad_norm: inf_norm(&g),
        x_opt: x,
        value: f,
        iterations,
        converged,
        trace,
    })
}

/// Max relative error between the analytic gradient and central finite
/// differences, with denominator `max(1, |analytic|)` per coordinate.
pub fn fd_grad_check<F>(obj: &Objective<F>, x: &DVector<f64>, h: f64) -> f64
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (_, g) = (obj.eval)(x);
    let mut worst = 0.0f64;
    for j in 0..obj.dim {
        let mut up = x.clone();
        up[j] += h;
        let mut dn = x.clone();
        dn[j] -= h;
        let (fu, _) = (obj.eval)(&up);
        let (fd, _) = (obj.eval)(&dn);
        let fd_j = (fu - fd) / (2.0 * h);
        let err = (fd_j - g[j]).abs() / g[j].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_quadratic_converges_quickly() {
        let dim = 8;
        let d: Vec<f64> = (0..dim).map(|i| 0.5 + 0.4 * i as f64).collect();
        let dvec = DVector::from_vec(d);
        let obj = Objective::new(dim, |x: &DVector<f64>| {
            let g = x.component_mul(&dvec);
            (0.5 * x.dot(&g), g)
        });
        let x0 = DVector::from_element(dim, 1.0);
        let res = lbfgs(
            &obj,
            &x0,
            &LbfgsOptions {
                tol: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.converged);
        assert!(res.grad_norm < 1e-8);
        assert!(res.iterations <= dim + 5, "took {} iterations", res.iterations);
        assert!(res.x_opt.amax() < 1e-7);
    }

    #[test]
    fn rosenbrock_reaches_the_minimum() {
        let obj = Objective::new(2, |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            (f, g)
        });
        let res = lbfgs(
            &obj,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &LbfgsOptions {
                tol: 1e-8,
                max_iter: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.iterations < 200);
        assert!((res.x_opt[0] - 1.0).abs() < 1e-5);
        assert!((res.x_opt[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn already_optimal_start_returns_immediately() {
        let obj = Objective::new(3, |x: &DVector<f64>| (0.5 * x.dot(x), x.clone()));
        let res = lbfgs(&obj, &DVector::zeros(3), &LbfgsOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
    }

    #[test]
    fn linear_objective_gradient_check() {
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let cc = c.clone();
        let obj = Objective::new(3, move |x: &DVector<f64>| (cc.dot(x), cc.clone()));
        let err = fd_grad_check(&obj, &DVector::from_vec(vec![0.3, 0.1, -0.7]), 1e-5);
        assert!(err < 1e-10, "err = {err}");
        drop(c);
    }

    #[test]
    fn identical_inputs_give_identical_traces() {
        let obj = Objective::new(2, |x: &DVector<f64>| {
            let f = (x[0] - 2.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2) + (x[0] * x[1]).powi(2);
            let g = DVector::from_vec(vec![
                2.0 * (x[0] - 2.0) + 2.0 * x[0] * x[1] * x[1],
                8.0 * (x[1] + 1.0) + 2.0 * x[1] * x[0] * x[0],
            ]);
            (f, g)
        });
        let x0 = DVector::from_vec(vec![5.0, 5.0]);
        let r1 = lbfgs(&obj, &x0, &LbfgsOptions::default()).unwrap();
        let r2 = lbfgs(&obj, &x0, &LbfgsOptions::default()).unwrap();
        assert_eq!(r1.trace, r2.trace);
        assert_eq!(r1.x_opt, r2.x_opt);
    }

    #[test]
    fn accepted_values_decrease_monotonically() {
        let obj = Objective::new(2, |x: &DVector<f64>| {
            let f = x[0].powi(4) + x[1].powi(2) + x[0] * x[1];
            let g = DVector::from_vec(vec![4.0 * x[0].powi(3) + x[1], 2.0 * x[1] + x[0]]);
            (f, g)
        });
        let res = lbfgs(&obj, &DVector::from_vec(vec![3.0, -2.0]), &LbfgsOptions::default())
            .unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1].0 <= w[0].0 + 1e-12);
        }
    }

    #[test]
    fn preconditioned_quadratic_converges() {
        let dim = 6;
        let d: Vec<f64> = (0..dim).map(|i| 10f64.powi(i as i32 % 4)).collect();
        let dvec = DVector::from_vec(d);
        let dd = dvec.clone();
        let obj = Objective::new(dim, move |x: &DVector<f64>| {
            let g = x.component_mul(&dd);
            (0.5 * x.dot(&g), g)
        })
        .with_precondition(dvec);
        let res = lbfgs(
            &obj,
            &DVector::from_element(dim, 1.0),
            &LbfgsOptions {
                tol: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.converged);
        // the preconditioner matches the Hessian exactly, so one step suffices
        assert!(res.iterations <= 2);
    }

    #[test]
    fn infinity_regions_are_avoided() {
        // objective is +inf for x > 1; minimum at x = 0.9 approached from the left
        let obj = Objective::new(1, |x: &DVector<f64>| {
            if x[0] > 1.0 {
                (f64::INFINITY, DVector::from_vec(vec![f64::NAN]))
            } else {
                ((x[0] - 0.9).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 0.9)]))
            }
        });
        let res = lbfgs(&obj, &DVector::from_vec(vec![-3.0]), &LbfgsOptions::default()).unwrap();
        assert_relative_eq!(res.x_opt[0], 0.9, epsilon = 1e-5);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let obj = Objective::new(1, |_: &DVector<f64>| (f64::NAN, DVector::zeros(1)));
        assert!(matches!(
            lbfgs(&obj, &DVector::zeros(1), &LbfgsOptions::default()),
            Err(RqkError::NonFiniteObjective)
        ));
    }
}
