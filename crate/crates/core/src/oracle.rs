//! Full-sample GMM by damped Gauss–Newton, the comparator for the
//! stochastic estimates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlimError};
use crate::linalg::{pinv_sym, solve_spd, symmetrize};
use crate::model::{sample_moments, Dataset, LinearIvModel, MomentModel};
use crate::scalar::Scalar;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Step halvings tried before the line search gives up.
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSolveReport<T: Scalar> {
    pub theta_hat: DVector<T>,
    /// `ḡ'Wḡ` at `theta_hat`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Ḡ'Wḡ‖` at `theta_hat`.
    pub gradient_norm: f64,
}

fn objective_and_gradient<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    w: &DMatrix<T>,
    theta: &DVector<T>,
) -> Result<(T, DVector<T>, DMatrix<T>)> {
    let s = sample_moments(model, data, theta, None)?;
    let wg = w * &s.g_bar;
    let obj = s.g_bar.dot(&wg);
    let grad = s.jac_bar.tr_mul(&wg);
    let hess = symmetrize(&(s.jac_bar.transpose() * w * &s.jac_bar));
    Ok((obj, grad, hess))
}

/// Minimises `ḡ_n(θ)'Wḡ_n(θ)` by Gauss–Newton with step halving.
///
/// Stops when `‖Ḡ'Wḡ‖ ≤ tol`. Running out of iterations or halvings is not an
/// error; the report then has `converged = false`.
pub fn solve_full_gmm<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    w: &DMatrix<T>,
    theta0: &DVector<T>,
    max_iter: usize,
    tol: f64,
) -> Result<GmmSolveReport<T>> {
    model.check_dataset(data)?;
    let d_g = model.dim_moments();
    if w.nrows() != d_g || w.ncols() != d_g {
        return Err(SlimError::dimension("weight matrix", d_g, w.nrows()));
    }
    if theta0.iter().any(|v| !v.is_finite()) {
        return Err(SlimError::config("starting value must be finite"));
    }
    let w = symmetrize(w);
    let mut theta = theta0.clone();
    let (mut obj, mut grad, mut hess) = objective_and_gradient(model, data, &w, &theta)?;
    let mut iterations = 0;
    let report = |theta: DVector<T>, obj: T, grad: &DVector<T>, iterations, converged| GmmSolveReport {
        theta_hat: theta,
        objective: obj.as_f64(),
        iterations,
        converged,
        gradient_norm: grad.norm().as_f64(),
    };
    while grad.norm().as_f64() > tol {
        if iterations == max_iter {
            return Ok(report(theta, obj, &grad, iterations, false));
        }
        iterations += 1;
        let step = match solve_spd(&hess, &grad) {
            Ok((s, _)) => s,
            Err(_) => pinv_sym(&hess).matrix * &grad,
        };
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &theta - &step * scale;
            // Moment evaluation can fail away from the data's support
            // (e.g. a singular EASI denominator); treat that as no decrease.
            if let Ok(next) = objective_and_gradient(model, data, &w, &trial) {
                if next.0 <= obj && next.0.is_finite() {
                    accepted = Some((trial, next));
                    break;
                }
            }
            scale *= T::lit(0.5);
        }
        match accepted {
            Some((t, (o, g, h))) => {
                let stalled = o == obj && t == theta;
                theta = t;
                obj = o;
                grad = g;
                hess = h;
                if stalled {
                    let converged = grad.norm().as_f64() <= tol;
                    return Ok(report(theta, obj, &grad, iterations, converged));
                }
            }
            None => return Ok(report(theta, obj, &grad, iterations, false)),
        }
    }
    Ok(report(theta, obj, &grad, iterations, true))
}

/// Two-step efficient GMM.
#[derive(Debug, Clone)]
pub struct TwoStepReport<T: Scalar> {
    pub first: GmmSolveReport<T>,
    pub second: GmmSolveReport<T>,
    /// `W_n(θ̂₁) = (n⁻¹ Σ g g')†`.
    pub weight: DMatrix<T>,
    /// Second-step objective evaluated under the second-step weight at `θ̂₁`.
    pub first_objective_second_weight: f64,
}

/// First step with `first_weight` (identity when `None`), then re-weight with
/// `W_n(θ̂₁)` and solve again from `θ̂₁`.
pub fn two_step_efficient_gmm<T: Scalar, M: MomentModel<T> + ?Sized>(
    model: &M,
    data: &Dataset<T>,
    theta0: &DVector<T>,
    first_weight: Option<&DMatrix<T>>,
) -> Result<TwoStepReport<T>> {
    let d_g = model.dim_moments();
    let w1 = first_weight
        .cloned()
        .unwrap_or_else(|| DMatrix::identity(d_g, d_g));
    let first = solve_full_gmm(model, data, &w1, theta0, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let s = sample_moments(model, data, &first.theta_hat, None)?;
    let w2 = pinv_sym(&symmetrize(&s.second_moment)).matrix;
    let first_objective_second_weight = s.g_bar.dot(&(&w2 * &s.g_bar)).as_f64();
    let second = solve_full_gmm(model, data, &w2, &first.theta_hat, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    Ok(TwoStepReport {
        first,
        second,
        weight: w2,
        first_objective_second_weight,
    })
}

/// Closed-form linear GMM `(S'WS)⁻¹ S'W s` with `s = n⁻¹Σ q y`, `S = n⁻¹Σ q x'`.
pub fn linear_iv_gmm<T: Scalar>(
    model: &LinearIvModel,
    data: &Dataset<T>,
    w: &DMatrix<T>,
) -> Result<DVector<T>> {
    let (s_qy, s_qx) = model.cross_moments(data);
    let lhs = symmetrize(&(s_qx.transpose() * w * &s_qx));
    let rhs = s_qx.transpose() * w * s_qy;
    Ok(solve_spd(&lhs, &rhs)?.0)
}

/// 2SLS, i.e. linear GMM with `W = (n⁻¹Σ q q')⁻¹`.
pub fn linear_iv_2sls<T: Scalar>(model: &LinearIvModel, data: &Dataset<T>) -> Result<DVector<T>> {
    let q = model.instrument_second_moment(data);
    let w = crate::linalg::inverse_spd(&q)?;
    linear_iv_gmm(model, data, &w)
}
