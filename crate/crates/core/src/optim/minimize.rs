use super::params::ParamVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("objective is non-finite at the initial parameters")]
    NonFiniteObjective,
    #[error("gradient probe is non-finite at parameter {param_index}")]
    NonFiniteGradient { param_index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    FiniteDiff,
    Supplied,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub tol_param: f64,
    pub tol_obj: f64,
    pub fd_step: f64,
    pub seed: u64,
    pub grad_mode: GradMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            step_size: 1e-2,
            max_iters: 500,
            tol_param: 1e-8,
            tol_obj: 1e-10,
            fd_step: 1e-5,
            seed: 0,
            grad_mode: GradMode::FiniteDiff,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergedBy {
    ParamTol,
    ObjTol,
    MaxIters,
}

/// Minimization summary. `trace` holds the incumbent (best-so-far) objective
/// after each iteration, so it is non-increasing by construction and
/// `final_obj <= initial_obj` always holds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimReport {
    pub initial_obj: f64,
    pub final_obj: f64,
    pub iterations: usize,
    pub converged_by: ConvergedBy,
    pub trace: Vec<f64>,
}

/// A step may raise the objective by at most this much before it is rejected.
const ACCEPT_SLACK: f64 = 1e-12;
const MAX_BACKTRACKS: usize = 40;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Central-difference gradient. Rotation-block coordinates are local
/// exp-map increments, so perturbing them walks the manifold directly.
pub fn finite_diff_gradient<F>(
    objective: &F,
    params: &ParamVector,
    fd_step: f64,
) -> Result<Vec<f64>, OptimError>
where
    F: Fn(&ParamVector) -> f64 + Sync,
{
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = params.clone();
            let x = probe.values()[i];
            probe.set_value(i, x + fd_step);
            let fp = objective(&probe);
            probe.set_value(i, x - fd_step);
            let fm = objective(&probe);
            let g = (fp - fm) / (2.0 * fd_step);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(OptimError::NonFiniteGradient { param_index: i })
            }
        })
        .collect()
}

/// Minimizes with finite-difference gradients. Deterministic: the same
/// objective, initial parameters and config always produce the same result.
pub fn minimize<F>(
    objective: F,
    params0: ParamVector,
    config: &OptimConfig,
) -> Result<(ParamVector, OptimReport), OptimError>
where
    F: Fn(&ParamVector) -> f64 + Sync,
{
    let grad = |p: &ParamVector| finite_diff_gradient(&objective, p, config.fd_step);
    minimize_impl(&objective, grad, params0, config)
}

/// Runs `minimize` in `phases` passes with a geometrically decaying step
/// size (factor 10 per phase), each pass restarting from the previous
/// best. Sign-normalized steps resolve poorly near cone-shaped minima
/// (sums of unsquared norms); annealing the trust step lets the tail
/// converge without per-problem tuning. `config.max_iters` is the
/// per-phase budget. The merged report keeps the concatenated trace, so
/// monotonicity of the incumbent objective is preserved across phases.
pub(crate) fn minimize_annealed<F>(
    objective: F,
    params0: ParamVector,
    config: &OptimConfig,
    phases: usize,
) -> Result<(ParamVector, OptimReport), OptimError>
where
    F: Fn(&ParamVector) -> f64 + Sync,
{
    assert!(phases >= 1);
    let mut params = params0;
    let mut merged: Option<OptimReport> = None;
    for phase in 0..phases {
        let cfg = OptimConfig {
            step_size: config.step_size * 0.1f64.powi(phase as i32),
            ..*config
        };
        let (best, report) = minimize(&objective, params, &cfg)?;
        params = best;
        merged = Some(match merged {
            None => report,
            Some(mut m) => {
                m.iterations += report.iterations;
                m.final_obj = report.final_obj;
                m.converged_by = report.converged_by;
                m.trace.extend(report.trace);
                m
            }
        });
    }
    Ok((params, merged.expect("at least one phase")))
}

/// Minimizes with a caller-supplied analytic gradient.
pub fn minimize_with_gradient<F, G>(
    objective: F,
    gradient: G,
    params0: ParamVector,
    config: &OptimConfig,
) -> Result<(ParamVector, OptimReport), OptimError>
where
    F: Fn(&ParamVector) -> f64 + Sync,
    G: Fn(&ParamVector) -> Vec<f64>,
{
    let grad = |p: &ParamVector| {
        let g = gradient(p);
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient { param_index: i });
        }
        Ok(g)
    };
    minimize_impl(&objective, grad, params0, config)
}

fn minimize_impl<F, G>(
    objective: &F,
    gradient: G,
    params0: ParamVector,
    config: &OptimConfig,
) -> Result<(ParamVector, OptimReport), OptimError>
where
    F: Fn(&ParamVector) -> f64 + Sync,
    G: Fn(&ParamVector) -> Result<Vec<f64>, OptimError>,
{
    let n = params0.len();
    let f0 = objective(&params0);
    if !f0.is_finite() {
        return Err(OptimError::NonFiniteObjective);
    }

    let mut x = params0;
    let mut f_cur = f0;
    let mut x_best = x.clone();
    let mut f_best = f0;
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut adam_iter = 0i32;
    let mut trace = vec![f0];
    let mut converged_by = ConvergedBy::MaxIters;
    let mut iterations = 0;
    // A single near-zero improvement can come from one stale descent
    // direction; convergence is only declared after several in a row.
    const STALL_PATIENCE: usize = 3;
    let mut obj_stalls = 0;
    let mut param_stalls = 0;

    for iter in 1..=config.max_iters {
        iterations = iter;
        let g = gradient(&x)?;

        adam_iter += 1;
        let bias1 = 1.0 - BETA1.powi(adam_iter);
        let bias2 = 1.0 - BETA2.powi(adam_iter);
        let mut direction = vec![0.0f64; n];
        let mut direction_zero = true;
        for i in 0..n {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            direction[i] = (m[i] / bias1) / ((v[i] / bias2).sqrt() + ADAM_EPS);
            direction_zero &= direction[i] == 0.0;
        }

        if direction_zero {
            // Flat point: no coordinate can move at any step length.
            converged_by = ConvergedBy::ObjTol;
            trace.push(f_best);
            break;
        }

        // Monotone acceptance: backtrack until the step no longer increases
        // the objective (beyond fp slack). The first acceptable step can sit
        // almost exactly on the current level set (common near the apex of a
        // norm-sum cone), so keep halving while the objective still improves
        // and take the best rung.
        let mut alpha = config.step_size;
        let mut accepted: Option<(ParamVector, f64)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut x_new = x.clone();
            for i in 0..n {
                x_new.set_value(i, x.values()[i] - alpha * direction[i]);
            }
            let f_new = objective(&x_new);
            if f_new.is_finite() && f_new <= f_cur + ACCEPT_SLACK {
                match &accepted {
                    Some((_, f_acc)) if f_new >= *f_acc => break,
                    _ => accepted = Some((x_new, f_new)),
                }
            } else if accepted.is_some() {
                break;
            }
            alpha *= 0.5;
        }

        let Some((x_new, f_new)) = accepted else {
            // The momentum direction is not a descent direction here; drop
            // the moments and retry from the raw gradient before giving up.
            obj_stalls += 1;
            if obj_stalls >= STALL_PATIENCE {
                converged_by = ConvergedBy::ObjTol;
                break;
            }
            m.iter_mut().for_each(|mi| *mi = 0.0);
            v.iter_mut().for_each(|vi| *vi = 0.0);
            adam_iter = 0;
            trace.push(f_best);
            continue;
        };

        let mut max_delta = 0.0f64;
        for i in 0..n {
            max_delta = max_delta.max((x_new.values()[i] - x.values()[i]).abs());
        }
        let obj_delta = (f_cur - f_new).abs();

        x = x_new;
        x.rebase_rotations();
        f_cur = f_new;
        if f_new < f_best {
            f_best = f_new;
            x_best = x.clone();
        }
        trace.push(f_best);

        if obj_delta < config.tol_obj {
            obj_stalls += 1;
        } else {
            obj_stalls = 0;
        }
        if max_delta < config.tol_param {
            param_stalls += 1;
        } else {
            param_stalls = 0;
        }
        if obj_stalls >= STALL_PATIENCE || (obj_delta == 0.0 && max_delta == 0.0) {
            converged_by = ConvergedBy::ObjTol;
            break;
        }
        if param_stalls >= STALL_PATIENCE {
            converged_by = ConvergedBy::ParamTol;
            break;
        }
    }

    let report = OptimReport {
        initial_obj: f0,
        final_obj: f_best,
        iterations,
        converged_by,
        trace,
    };
    Ok((x_best, report))
}
