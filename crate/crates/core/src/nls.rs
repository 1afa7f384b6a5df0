//! Levenberg-Marquardt for stacked residual systems with analytic Jacobians.
//!
//! Each iteration solves the Marquardt-scaled damped normal equations
//! `(JᵀJ + λ·diag(JᵀJ))·δ = −Jᵀr`. An accepted step (strict decrease of the
//! sum of squares) divides the damping, a rejected one multiplies it.
//! Per-residual weights are handled by [`apply_weights`], which scales
//! residuals and Jacobian rows by `√w` so that the plain solver minimizes
//! `Σ w_k r_k²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residuals `r(θ) ∈ ℝᴺ` and their Jacobian `∂r/∂θ ∈ ℝ^{N×P}`.
///
/// Implementations must be deterministic and safe to evaluate repeatedly.
pub trait ResidualSystem {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    /// Both at once; override when they share work.
    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (self.residuals(theta), self.jacobian(theta))
    }
}

impl<S: ResidualSystem + ?Sized> ResidualSystem for &S {
    fn num_params(&self) -> usize {
        (**self).num_params()
    }
    fn num_residuals(&self) -> usize {
        (**self).num_residuals()
    }
    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        (**self).residuals(theta)
    }
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        (**self).jacobian(theta)
    }
    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (**self).residuals_and_jacobian(theta)
    }
}

/// A system whose residuals and Jacobian rows are scaled by `√w_k`.
#[derive(Debug, Clone)]
pub struct Weighted<S> {
    inner: S,
    sqrt_weights: DVector<f64>,
}

impl<S> Weighted<S> {
    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn sqrt_weights(&self) -> &DVector<f64> {
        &self.sqrt_weights
    }
}

/// Wraps `system` so that an unweighted solve minimizes `Σ w_k r_k²`.
pub fn apply_weights<S: ResidualSystem>(system: S, weights: &[f64]) -> Result<Weighted<S>> {
    if weights.len() != system.num_residuals() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} residuals",
            weights.len(),
            system.num_residuals()
        )));
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Error::NegativeWeight { index, value });
    }
    let sqrt_weights = DVector::from_iterator(weights.len(), weights.iter().map(|w| w.sqrt()));
    Ok(Weighted { inner: system, sqrt_weights })
}

impl<S: ResidualSystem> ResidualSystem for Weighted<S> {
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
    fn num_residuals(&self) -> usize {
        self.inner.num_residuals()
    }
    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.inner.residuals(theta).component_mul(&self.sqrt_weights)
    }
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.inner.jacobian(theta);
        scale_rows(&mut j, &self.sqrt_weights);
        j
    }
    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (r, mut j) = self.inner.residuals_and_jacobian(theta);
        scale_rows(&mut j, &self.sqrt_weights);
        (r.component_mul(&self.sqrt_weights), j)
    }
}

fn scale_rows(j: &mut DMatrix<f64>, s: &DVector<f64>) {
    for (k, &w) in s.iter().enumerate() {
        let mut row = j.row_mut(k);
        row *= w;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub sse_rel_tol: f64,
    pub grad_inf_tol: f64,
    pub initial_damping_scale: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            sse_rel_tol: 1e-10,
            grad_inf_tol: 1e-8,
            initial_damping_scale: 1e-3,
            damping_increase: 2.0,
            damping_decrease: 1.0 / 3.0,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sse_rel_tol", self.sse_rel_tol),
            ("grad_inf_tol", self.grad_inf_tol),
            ("initial_damping_scale", self.initial_damping_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidOptions(format!("{name} must be > 0")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidOptions("max_iterations must be >= 1".into()));
        }
        if !(self.damping_increase > 1.0) {
            return Err(Error::InvalidOptions("damping_increase must be > 1".into()));
        }
        if !(self.damping_decrease > 0.0 && self.damping_decrease < 1.0) {
            return Err(Error::InvalidOptions("damping_decrease must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SseTol,
    GradTol,
    MaxIter,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LmStep {
    /// Sum of squares at the current iterate after this iteration.
    pub sse: f64,
    /// Damping used to compute the trial step.
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LmResult {
    pub theta: Vec<f64>,
    pub initial_sse: f64,
    pub final_sse: f64,
    pub iterations: usize,
    pub converged_by: Termination,
    pub trace: Vec<LmStep>,
}

/// Above this damping a failed solve is reported as singular, and a run of
/// rejected steps is treated as stagnation at a minimum.
const MAX_DAMPING: f64 = 1e12;

pub fn levenberg_marquardt<S: ResidualSystem + ?Sized>(
    system: &S,
    theta0: &[f64],
    opts: &LmOptions,
) -> Result<LmResult> {
    opts.validate()?;
    let p = system.num_params();
    if theta0.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "theta0 has {} entries, system has {p} parameters",
            theta0.len()
        )));
    }
    if system.num_residuals() < p {
        return Err(Error::DimensionMismatch(format!(
            "{} residuals for {p} parameters",
            system.num_residuals()
        )));
    }

    let mut theta = DVector::from_column_slice(theta0);
    let (mut r, mut j) = system.residuals_and_jacobian(&theta);
    if !all_finite(r.iter()) || !all_finite(j.iter()) {
        return Err(Error::NonFiniteResidual { theta: theta0.to_vec() });
    }
    let mut sse = r.norm_squared();
    let initial_sse = sse;
    let mut jtj = j.tr_mul(&j);
    let mut grad = j.tr_mul(&r);

    let max_diag = (0..p).map(|i| jtj[(i, i)]).fold(0.0, f64::max);
    let mut lambda = opts.initial_damping_scale * max_diag;
    if !(lambda > 0.0) {
        lambda = opts.initial_damping_scale;
    }

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged_by = Termination::MaxIter;

    while iterations < opts.max_iterations {
        if grad.amax() <= opts.grad_inf_tol {
            converged_by = Termination::GradTol;
            break;
        }
        iterations += 1;

        let Some(delta) = solve_damped(&jtj, &grad, lambda) else {
            if lambda >= MAX_DAMPING {
                return Err(Error::SingularNormalEquations { damping: lambda });
            }
            trace.push(LmStep { sse, damping: lambda, accepted: false });
            lambda *= opts.damping_increase;
            continue;
        };

        let trial = &theta + &delta;
        let r_trial = system.residuals(&trial);
        let sse_trial = r_trial.norm_squared();
        let used = lambda;

        if sse_trial.is_finite() && sse_trial < sse {
            let decrease = (sse - sse_trial) / sse;
            theta = trial;
            let (r_new, j_new) = system.residuals_and_jacobian(&theta);
            if !all_finite(r_new.iter()) || !all_finite(j_new.iter()) {
                return Err(Error::NonFiniteResidual { theta: theta.iter().copied().collect() });
            }
            r = r_new;
            j = j_new;
            sse = r.norm_squared();
            jtj = j.tr_mul(&j);
            grad = j.tr_mul(&r);
            lambda *= opts.damping_decrease;
            trace.push(LmStep { sse, damping: used, accepted: true });
            if decrease <= opts.sse_rel_tol || sse == 0.0 {
                converged_by = if grad.amax() <= opts.grad_inf_tol {
                    Termination::GradTol
                } else {
                    Termination::SseTol
                };
                break;
            }
        } else {
            lambda *= opts.damping_increase;
            trace.push(LmStep { sse, damping: used, accepted: false });
            if lambda >= MAX_DAMPING {
                // Steps are now negligibly small; nothing decreases the objective.
                converged_by = Termination::SseTol;
                break;
            }
        }
    }

    Ok(LmResult {
        theta: theta.iter().copied().collect(),
        initial_sse,
        final_sse: sse,
        iterations,
        converged_by,
        trace,
    })
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|v| v.is_finite())
}

/// Solves `(A + λ·diag(A))·δ = −g`, falling back to an SVD pseudo-inverse
/// when the Cholesky factorization fails.
fn solve_damped(jtj: &DMatrix<f64>, grad: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let p = jtj.nrows();
    let max_diag = (0..p).map(|i| jtj[(i, i)]).fold(0.0, f64::max);
    let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
    let mut m = jtj.clone();
    for i in 0..p {
        m[(i, i)] += lambda * jtj[(i, i)].max(floor);
    }
    let rhs = -grad;
    if let Some(chol) = m.clone().cholesky() {
        let delta = chol.solve(&rhs);
        if all_finite(delta.iter()) {
            return Some(delta);
        }
    }
    let svd = m.svd(true, true);
    let eps = svd.singular_values.max() * 1e-14;
    let delta = svd.solve(&rhs, eps).ok()?;
    all_finite(delta.iter()).then_some(delta)
}

/// Central finite-difference Jacobian; used to check analytic Jacobians.
pub fn numerical_jacobian<S: ResidualSystem + ?Sized>(
    system: &S,
    theta: &[f64],
    step: f64,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(system.num_residuals(), theta.len());
    let mut t = DVector::from_column_slice(theta);
    for c in 0..theta.len() {
        let h = step * theta[c].abs().max(1.0);
        t[c] = theta[c] + h;
        let up = system.residuals(&t);
        t[c] = theta[c] - h;
        let down = system.residuals(&t);
        t[c] = theta[c];
        out.set_column(c, &((up - down) / (2.0 * h)));
    }
    out
}
