//! Small dense nonlinear least-squares solver: Levenberg-style damped
//! normal-equation steps inside a trust-region acceptance loop, with simple
//! box bounds handled by projection.
//!
//! Problems here are tiny (<= 4 parameters, a few hundred residuals), so
//! everything is dense nalgebra and one Cholesky per damping trial.

use crate::error::{Result, ThzError};
use nalgebra::{DMatrix, DVector};

/// A residual/Jacobian pair with optional box bounds.
pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, x: &[f64], out: &mut [f64]);
    /// Row-major Jacobian d r_i / d x_j. The default falls back to central
    /// finite differences.
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        numerical_jacobian(self, x, out);
    }
    /// Per-parameter (lower, upper) bounds; infinite where unbounded.
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY); self.n_params()]
    }
}

/// Central finite-difference Jacobian, usable as fallback or test oracle.
pub fn numerical_jacobian<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    out: &mut DMatrix<f64>,
) {
    let n = problem.n_params();
    let m = problem.n_residuals();
    let mut rp = vec![0.0; m];
    let mut rm = vec![0.0; m];
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        problem.residuals(&xp, &mut rp);
        xp[j] = x[j] - h;
        problem.residuals(&xp, &mut rm);
        xp[j] = x[j];
        for i in 0..m {
            out[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    GradientTol,
    StepTol,
    CostTol,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub x: Vec<f64>,
    /// Final cost 0.5 * ||r||^2.
    pub cost: f64,
    pub iterations: usize,
    pub reason: ConvergenceReason,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub gtol: f64,
    pub xtol: f64,
    pub ftol: f64,
    /// Initial trust radius = radius_factor * ||D x0|| (or radius_factor
    /// alone when x0 is at the origin), as in classic implementations.
    pub radius_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-10,
            xtol: 1e-10,
            ftol: 1e-10,
            radius_factor: 100.0,
        }
    }
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Solve a damped normal-equation step (J^T J + lambda D^2) p = -g.
fn damped_step(
    jtj: &DMatrix<f64>,
    g: &DVector<f64>,
    scale: &DVector<f64>,
    lambda: f64,
) -> Option<DVector<f64>> {
    let n = g.len();
    let mut a = jtj.clone();
    for i in 0..n {
        a[(i, i)] += lambda * scale[i] * scale[i];
        // keep the system positive definite even for rank-deficient J
        a[(i, i)] += 1e-14 * (1.0 + jtj[(i, i)].abs());
    }
    a.cholesky().map(|ch| ch.solve(&(-g)))
}

pub fn solve<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolverReport> {
    let n = problem.n_params();
    let m = problem.n_residuals();
    if m < n {
        return Err(ThzError::InvalidArgument(
            "need at least as many residuals as parameters".into(),
        ));
    }
    let bounds = problem.bounds();
    let mut x = x0.to_vec();
    project(&mut x, &bounds);

    let mut r = vec![0.0; m];
    problem.residuals(&x, &mut r);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(ThzError::Numerical("residual not finite at x0".into()));
    }
    let mut cost = 0.5 * r.iter().map(|v| v * v).sum::<f64>();

    let mut jac = DMatrix::<f64>::zeros(m, n);
    problem.jacobian(&x, &mut jac);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(ThzError::Numerical("jacobian not finite at x0".into()));
    }

    // Column-norm scaling conditions parameters of very different magnitude
    // (e.g. amplitude vs. inverse lobe width in the sinc fit).
    let scale = DVector::from_iterator(
        n,
        (0..n).map(|j| {
            let nrm = jac.column(j).norm();
            if nrm > 0.0 {
                nrm
            } else {
                1.0
            }
        }),
    );

    let dx0 = x
        .iter()
        .zip(scale.iter())
        .map(|(xi, di)| (xi * di) * (xi * di))
        .sum::<f64>()
        .sqrt();
    let mut radius = if dx0 > 0.0 {
        opts.radius_factor * dx0
    } else {
        opts.radius_factor
    };
    let mut reason = ConvergenceReason::MaxIter;
    let mut iterations = 0;

    'outer: for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let rv = DVector::from_column_slice(&r);
        let g = jac.transpose() * &rv;
        if g.amax() < opts.gtol {
            reason = ConvergenceReason::GradientTol;
            break;
        }
        let jtj = jac.transpose() * &jac;

        // Find a damping lambda whose scaled step fits in the trust radius.
        let mut lambda = 0.0;
        let mut step;
        loop {
            match damped_step(&jtj, &g, &scale, lambda) {
                Some(p) => {
                    let scaled_norm = p
                        .iter()
                        .zip(scale.iter())
                        .map(|(pi, di)| (pi * di) * (pi * di))
                        .sum::<f64>()
                        .sqrt();
                    if scaled_norm <= radius * 1.1 || lambda > 1e12 {
                        step = p;
                        break;
                    }
                }
                None => {}
            }
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            if lambda > 1e15 {
                reason = ConvergenceReason::StepTol;
                break 'outer;
            }
        }

        let mut x_new: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        project(&mut x_new, &bounds);
        // effective step after projection
        for j in 0..n {
            step[j] = x_new[j] - x[j];
        }

        let mut r_new = vec![0.0; m];
        problem.residuals(&x_new, &mut r_new);
        if r_new.iter().any(|v| !v.is_finite()) {
            return Err(ThzError::Numerical(
                "residual became non-finite during iteration".into(),
            ));
        }
        let cost_new = 0.5 * r_new.iter().map(|v| v * v).sum::<f64>();

        // predicted reduction of the quadratic model along the taken step
        let jp = &jac * &step;
        let predicted = -(g.dot(&step)) - 0.5 * jp.norm_squared();
        let rho = if predicted > 0.0 {
            (cost - cost_new) / predicted
        } else if cost_new < cost {
            1.0
        } else {
            -1.0
        };

        let scaled_step_norm = step
            .iter()
            .zip(scale.iter())
            .map(|(pi, di)| (pi * di) * (pi * di))
            .sum::<f64>()
            .sqrt();

        if rho < 0.25 {
            radius = 0.25 * scaled_step_norm.max(radius * 0.25);
        } else if rho > 0.75 && scaled_step_norm >= 0.9 * radius {
            radius *= 2.0;
        }
        radius = radius.clamp(1e-14, 1e14);

        if rho > 1e-4 && cost_new <= cost {
            let cost_drop = cost - cost_new;
            let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = x_new;
            r = r_new;
            cost = cost_new;
            problem.jacobian(&x, &mut jac);
            if jac.iter().any(|v| !v.is_finite()) {
                return Err(ThzError::Numerical(
                    "jacobian became non-finite during iteration".into(),
                ));
            }
            if cost_drop <= opts.ftol * cost.max(1e-300) {
                reason = ConvergenceReason::CostTol;
                break;
            }
            if step_norm <= opts.xtol * (x_norm + opts.xtol) {
                reason = ConvergenceReason::StepTol;
                break;
            }
        } else if radius <= 1e-13 {
            reason = ConvergenceReason::StepTol;
            break;
        }
    }

    debug_assert!(x
        .iter()
        .zip(&bounds)
        .all(|(xi, &(lo, hi))| *xi >= lo && *xi <= hi));
    let success = !matches!(reason, ConvergenceReason::MaxIter);
    Ok(SolverReport {
        x,
        cost,
        iterations,
        reason,
        success,
    })
}
