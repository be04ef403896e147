//! Limited-memory quasi-Newton ascent with a backtracking (Armijo) line search.
//!
//! Evaluation failures (non-finite values, singular Gram matrices) inside the
//! line search are treated as an infeasible step and shrink the step length.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Stop when an accepted step improves the objective by less than
    /// `rel_tol · max(|f|, 1)`.
    pub rel_tol: f64,
    pub history: usize,
    pub max_backtracks: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 2000,
            rel_tol: 1e-7,
            history: 10,
            max_backtracks: 40,
        }
    }
}

impl OptimOptions {
    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

type Eval = (f64, DVector<f64>);

fn try_eval<F>(f: &mut F, x: &DVector<f64>) -> Option<Eval>
where
    F: FnMut(&DVector<f64>) -> Result<Eval>,
{
    match f(x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => Some((v, g)),
        _ => None,
    }
}

/// Maximizes `f`, which returns the objective and its gradient.
pub fn maximize<F>(mut f: F, x0: DVector<f64>, opts: &OptimOptions) -> Result<OptimOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<Eval>,
{
    let (mut fx, mut gx) = f(&x0)?;
    if !fx.is_finite() || gx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut x = x0;
    let mut trace = alloc::vec![fx];
    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let gnorm = gx.norm();
        if gnorm == 0.0 {
            converged = true;
            break;
        }
        // Work on the minimization problem −f, gradient −g.
        let mut dir = two_loop(&pairs, &(-&gx));
        let mut slope = -gx.dot(&dir);
        if !(slope < 0.0) || pairs.is_empty() {
            // steepest ascent, first step scaled to unit length
            dir = &gx / gnorm.max(1.0);
            slope = -gx.dot(&dir);
            if pairs.is_empty() && !(slope < 0.0) {
                converged = true;
                break;
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn = &x + &dir * step;
            if let Some((fn_, gn)) = try_eval(&mut f, &xn) {
                // Armijo on −f: −fn ≤ −f + c·step·slope
                if -fn_ <= -fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fn_, gn)) = accepted else {
            if pairs.is_empty() {
                converged = true;
                break;
            }
            pairs.clear();
            continue;
        };
        let s = &xn - &x;
        let y = -(&gn - &gx);
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if pairs.len() == opts.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let improvement = fn_ - fx;
        x = xn;
        fx = fn_;
        gx = gn;
        trace.push(fx);
        if improvement <= opts.rel_tol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(OptimOutcome {
        x,
        value: fx,
        iterations,
        converged,
        trace,
    })
}

/// Two-loop recursion returning `−H·grad` for the minimization problem.
fn two_loop(pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>, grad: &DVector<f64>) -> DVector<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = s.dot(y) / y.dot(y);
        q *= gamma;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        let target = DVector::from_vec(alloc::vec![1.0, -2.0, 0.5]);
        let out = maximize(
            |x| {
                let d = x - &target;
                Ok((-d.norm_squared(), -2.0 * d))
            },
            DVector::zeros(3),
            &OptimOptions::default(),
        )
        .unwrap();
        assert!((out.x - target).norm() < 1e-4);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rosenbrock_reaches_optimum() {
        let out = maximize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = DVector::from_vec(alloc::vec![
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a)
                ]);
                Ok((-f, -g))
            },
            DVector::from_vec(alloc::vec![-1.2, 1.0]),
            &OptimOptions { rel_tol: 1e-14, ..Default::default() },
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-3 && (out.x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn infeasible_region_shrinks_step() {
        // log barrier at x > 0, optimum at x = 1
        let out = maximize(
            |x| {
                if x[0] <= 0.0 {
                    return Ok((f64::NAN, x.clone()));
                }
                Ok((x[0].ln() - x[0], DVector::from_element(1, 1.0 / x[0] - 1.0)))
            },
            DVector::from_element(1, 0.01),
            &OptimOptions { rel_tol: 1e-12, ..Default::default() },
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let r = maximize(|x| Ok((f64::INFINITY, x.clone())), DVector::zeros(1), &OptimOptions::default());
        assert!(matches!(r, Err(Error::Divergence { iteration: 0 })));
    }
}
