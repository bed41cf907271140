//! Levenberg-Marquardt minimization of `0.5 * ||r(x)||^2`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub gradient_tol: f64,
    pub step_tol: f64,
    /// Relative forward-difference step, scaled by `max(1, |x_i|)`.
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            fd_step: 1e-6,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_damping,
            self.damping_up,
            self.damping_down,
            self.gradient_tol,
            self.step_tol,
            self.fd_step,
        ];
        if self.max_iterations == 0 || positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("LM options must be positive and finite".into()));
        }
        if !(self.damping_up > 1.0 && self.damping_down < 1.0) {
            return Err(Error::Config("LM damping factors need up > 1 > down > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ZeroResidual,
    Gradient,
    Step,
    MaxIterations,
    /// Residuals went non-finite and damping could not recover.
    NonFinite,
    /// No decreasing step found before the damping ceiling.
    DampingExhausted,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Self::ZeroResidual | Self::Gradient | Self::Step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cost: f64,
    pub damping: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub solution: DVector<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Jacobian evaluations performed.
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRow>,
}

impl LmResult {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }
}

/// Residual function with an optional hand-written Jacobian.
pub trait LeastSquaresProblem {
    /// `None` signals a failed evaluation (blow-up, non-finite values).
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>>;

    /// Jacobian at `x`, where `r = residuals(x)`. Defaults to forward
    /// differences.
    fn jacobian(&self, x: &DVector<f64>, r: &DVector<f64>, fd_step: f64) -> Option<DMatrix<f64>> {
        forward_difference_jacobian(|v| self.residuals(v), x, r, fd_step)
    }
}

pub fn forward_difference_jacobian<F>(
    mut f: F,
    x: &DVector<f64>,
    r: &DVector<f64>,
    fd_step: f64,
) -> Option<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(r.len(), x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = fd_step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        // the actual representable step
        let h = xp[i] - x[i];
        let rp = f(&xp)?;
        if rp.len() != r.len() {
            return None;
        }
        for (j, (a, b)) in rp.iter().zip(r.iter()).enumerate() {
            jac[(j, i)] = (a - b) / h;
        }
        xp[i] = x[i];
    }
    jac.iter().all(|v| v.is_finite()).then_some(jac)
}

struct FnProblem<F>(F);

impl<F> LeastSquaresProblem for FnProblem<F>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        (self.0)(x)
    }
}

/// `minimize` over a plain residual closure.
pub fn minimize_fn<F>(f: F, x0: &DVector<f64>, opts: &LmOptions) -> Result<LmResult>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    minimize(&FnProblem(f), x0, opts)
}

fn finite(r: Option<DVector<f64>>) -> Option<DVector<f64>> {
    r.filter(|v| v.iter().all(|x| x.is_finite()))
}

const MAX_DAMPING: f64 = 1e16;
const MAX_SINGULAR_RETRIES: usize = 20;

pub fn minimize<P>(problem: &P, x0: &DVector<f64>, opts: &LmOptions) -> Result<LmResult>
where
    P: LeastSquaresProblem + ?Sized,
{
    opts.validate()?;
    let mut r = finite(problem.residuals(x0))
        .ok_or_else(|| Error::Numerical("residuals are not finite at the starting point".into()))?;
    let mut x = x0.clone();
    let mut cost = 0.5 * r.norm_squared();
    let initial_cost = cost;
    let mut mu = opts.initial_damping;
    let mut trace = vec![TraceRow {
        iter: 0,
        cost,
        damping: mu,
        step_norm: 0.0,
    }];
    let mut iterations = 0;
    let mut accepted = 0;

    let termination = 'outer: loop {
        if cost == 0.0 {
            break Termination::ZeroResidual;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let Some(jac) = problem.jacobian(&x, &r, opts.fd_step) else {
            break Termination::NonFinite;
        };
        let jac_t = jac.transpose();
        let grad = &jac_t * &r;
        if grad.amax() <= opts.gradient_tol {
            break Termination::Gradient;
        }
        let jtj = &jac_t * &jac;
        let max_diag = jtj.diagonal().amax();
        let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
        let diag = jtj.diagonal().map(|d| d.max(floor));

        let mut singular = 0;
        loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu * diag[i];
            }
            let Some(chol) = a.cholesky() else {
                singular += 1;
                if singular > MAX_SINGULAR_RETRIES {
                    return Err(Error::Numerical(format!(
                        "normal equations stayed singular up to damping {mu:.3e}"
                    )));
                }
                mu *= opts.damping_up;
                continue;
            };
            let step = -chol.solve(&grad);
            let step_norm = step.norm();
            let x_new = &x + &step;
            let candidate = finite(problem.residuals(&x_new));
            let new_cost = candidate.as_ref().map(|v| 0.5 * v.norm_squared());
            match (candidate, new_cost) {
                (Some(r_new), Some(c)) if c < cost => {
                    let small = step_norm <= opts.step_tol * (x.norm() + opts.step_tol);
                    x = x_new;
                    r = r_new;
                    cost = c;
                    mu = (mu * opts.damping_down).max(f64::MIN_POSITIVE);
                    accepted += 1;
                    trace.push(TraceRow {
                        iter: iterations,
                        cost,
                        damping: mu,
                        step_norm,
                    });
                    if small {
                        break 'outer Termination::Step;
                    }
                    break;
                }
                (candidate, _) => {
                    if step_norm <= opts.step_tol * (x.norm() + opts.step_tol) {
                        break 'outer Termination::Step;
                    }
                    mu *= opts.damping_up;
                    if mu > MAX_DAMPING {
                        break 'outer if candidate.is_none() {
                            Termination::NonFinite
                        } else {
                            Termination::DampingExhausted
                        };
                    }
                }
            }
        }
    };

    Ok(LmResult {
        solution: x,
        initial_cost,
        final_cost: cost,
        iterations,
        accepted_steps: accepted,
        termination,
        trace,
    })
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
