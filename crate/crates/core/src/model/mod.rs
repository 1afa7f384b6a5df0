//! The α-regression.
//!
//! The conditional mean is multinomial-logit with component 1 as reference:
//! `μ_1 = 1/(1 + Σ_j e^{xᵀβ_j})`, `μ_{j+1} = e^{xᵀβ_j}/(1 + Σ_k e^{xᵀβ_k})`.
//! Coefficients minimize the sum of squared differences between the
//! α-transformed observations and α-transformed means. The power step of the
//! transform collapses onto the logit, `u_j ∝ e^{α·xᵀβ_j}`, so the
//! transformed mean is computed directly from `α·η` without forming `μ`.

mod derivatives;

pub use derivatives::{gradient, hessian_exact, hessian_gauss_newton, mean_jacobian};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::inference::CovarianceEstimate;
use crate::nls::{apply_weights, levenberg_marquardt, LmOptions, LmResult, ResidualSystem};
use crate::selection::kld;
use crate::simplex::{
    alpha_row, helmert_submatrix, Alpha, CompositionMatrix, EuclideanScores, HelmertSubmatrix,
};

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 700.0;

/// `n × (p+1)` covariates with a leading column of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix(DMatrix<f64>);

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidDimension("design matrix has no columns".into()));
        }
        if values.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidParameters(
                "first design column must be the intercept (all ones)".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("design matrix has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    /// Prepends the intercept column to an `n × p` covariate matrix.
    pub fn with_intercept(covariates: &DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        let mut values = DMatrix::from_element(n, covariates.ncols() + 1, 1.0);
        values.columns_mut(1, covariates.ncols()).copy_from(covariates);
        Self::new(values)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Number of columns, `p + 1`.
    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    /// Number of covariates `p`, excluding the intercept.
    pub fn covariates(&self) -> usize {
        self.0.ncols() - 1
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select_rows(rows))
    }

    /// Appends extra (non-intercept) columns, e.g. spatial lags.
    pub fn augment(&self, extra: &DMatrix<f64>) -> Result<Self> {
        if extra.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "augmenting {} rows with {} rows",
                self.n(),
                extra.nrows()
            )));
        }
        let mut values = DMatrix::zeros(self.n(), self.ncols() + extra.ncols());
        values.columns_mut(0, self.ncols()).copy_from(&self.0);
        values.columns_mut(self.ncols(), extra.ncols()).copy_from(extra);
        Self::new(values)
    }
}

/// `(p+1) × d` coefficients; column `j` belongs to component `j + 2`
/// (component 1 is the reference with implicit zero coefficients).
///
/// The parameter vector is `vec(B)`, stacked column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix(DMatrix<f64>);

impl CoefficientMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("non-finite coefficient".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn from_theta(theta: &[f64], rows: usize, cols: usize) -> Self {
        Self(DMatrix::from_column_slice(rows, cols, theta))
    }

    pub fn theta(&self) -> Vec<f64> {
        self.0.as_slice().to_vec()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    /// Rows `start..start+len` as a new matrix.
    pub fn rows(&self, start: usize, len: usize) -> Self {
        Self(self.0.rows(start, len).into_owned())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (&self.0 - &other.0).amax()
    }
}

/// Model fit at a fixed α.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: CoefficientMatrix,
    pub fitted: CompositionMatrix,
    pub sse: f64,
    pub kld: f64,
    pub alpha: Alpha,
    pub lm: LmResult,
    pub covariance: Option<CovarianceEstimate>,
}

fn check_conformable(x: &DesignMatrix, b: &CoefficientMatrix) -> Result<()> {
    if x.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, coefficients have {} rows",
            x.ncols(),
            b.nrows()
        )));
    }
    Ok(())
}

/// Linear predictors `η_j = xᵀβ_j`, clamped.
pub(crate) fn linear_predictors(x: &[f64], b: &DMatrix<f64>, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let eta: f64 = x.iter().enumerate().map(|(c, &xc)| xc * b[(c, j)]).sum();
        *o = eta.clamp(-ETA_CLAMP, ETA_CLAMP);
    }
}

/// Softmax over `(0, s_1, …, s_d)`; `out` has length `d + 1`.
pub(crate) fn softmax_with_reference(s: &[f64], out: &mut [f64]) {
    let max = s.iter().copied().fold(0.0, f64::max);
    out[0] = (-max).exp();
    let mut total = out[0];
    for (o, &v) in out[1..].iter_mut().zip(s) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn mean_row(x: &[f64], b: &DMatrix<f64>, out: &mut [f64]) {
    let mut eta = vec![0.0; b.ncols()];
    linear_predictors(x, b, &mut eta);
    softmax_with_reference(&eta, out);
}

/// Multinomial-logit fitted compositions.
pub fn fitted_mean(x: &DesignMatrix, b: &CoefficientMatrix) -> Result<CompositionMatrix> {
    check_conformable(x, b)?;
    let parts = b.ncols() + 1;
    let mut out = DMatrix::zeros(x.n(), parts);
    let mut row = vec![0.0; parts];
    for i in 0..x.n() {
        mean_row(&x.row(i), &b.0, &mut row);
        for (j, &v) in row.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(CompositionMatrix::from_closed(out))
}

/// Transformed mean of one row: `(D/α)·H·u` with `u = softmax(α·(0, η))`,
/// or `H·(0, η)` at `α = 0`.
pub(crate) fn transformed_mean_row(
    x: &[f64],
    b: &DMatrix<f64>,
    alpha: f64,
    h: &HelmertSubmatrix,
    u: &mut [f64],
    out: &mut [f64],
) {
    let d = b.ncols();
    let mut eta = vec![0.0; d];
    linear_predictors(x, b, &mut eta);
    if alpha == 0.0 {
        u[0] = 0.0;
        u[1..].copy_from_slice(&eta);
        h.apply(u, out);
        return;
    }
    for e in eta.iter_mut() {
        *e *= alpha;
    }
    softmax_with_reference(&eta, u);
    h.apply(u, out);
    let scale = (d + 1) as f64 / alpha;
    for o in out.iter_mut() {
        *o *= scale;
    }
}

/// α-transformed fitted means, computed from `α·η` directly.
pub fn transformed_mean(
    x: &DesignMatrix,
    b: &CoefficientMatrix,
    alpha: Alpha,
) -> Result<EuclideanScores> {
    check_conformable(x, b)?;
    let d = b.ncols();
    let h = helmert_submatrix(d + 1)?;
    let mut out = DMatrix::zeros(x.n(), d);
    let mut u = vec![0.0; d + 1];
    let mut row = vec![0.0; d];
    for i in 0..x.n() {
        transformed_mean_row(&x.row(i), &b.0, alpha.value(), &h, &mut u, &mut row);
        for (m, &v) in row.iter().enumerate() {
            out[(i, m)] = v;
        }
    }
    Ok(EuclideanScores::new(out))
}

/// The least-squares objective in α-transformed space.
pub fn sse(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<f64> {
    let problem = AlphaProblem::new(y, x, alpha)?;
    problem.check_coefficients(b)?;
    Ok(problem.residuals(&DVector::from_column_slice(b.0.as_slice())).norm_squared())
}

/// The residual system minimized by the fit: `r_{i,m} = y_{α,im} − m_{α,im}`,
/// stacked observation-major (`i·d + m`).
#[derive(Debug, Clone)]
pub struct AlphaProblem {
    y_alpha: DMatrix<f64>,
    x: DMatrix<f64>,
    alpha: f64,
    helmert: HelmertSubmatrix,
}

impl AlphaProblem {
    pub fn new(y: &CompositionMatrix, x: &DesignMatrix, alpha: Alpha) -> Result<Self> {
        if y.n() != x.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} compositions but {} design rows",
                y.n(),
                x.n()
            )));
        }
        alpha.check_for(y)?;
        let helmert = helmert_submatrix(y.parts())?;
        let d = y.parts() - 1;
        let mut y_alpha = DMatrix::zeros(y.n(), d);
        let mut buf = vec![0.0; d];
        for i in 0..y.n() {
            alpha_row(&y.row(i), alpha.value(), &helmert, &mut buf);
            for (m, &v) in buf.iter().enumerate() {
                y_alpha[(i, m)] = v;
            }
        }
        Ok(Self { y_alpha, x: x.0.clone(), alpha: alpha.value(), helmert })
    }

    /// Restricts to a subset of observations.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y_alpha: self.y_alpha.select_rows(rows),
            x: self.x.select_rows(rows),
            alpha: self.alpha,
            helmert: self.helmert.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// `d = D − 1`.
    pub fn d(&self) -> usize {
        self.y_alpha.ncols()
    }

    /// `p + 1`.
    pub fn design_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_alpha(&self) -> &DMatrix<f64> {
        &self.y_alpha
    }

    pub fn helmert(&self) -> &HelmertSubmatrix {
        &self.helmert
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn check_coefficients(&self, b: &CoefficientMatrix) -> Result<()> {
        if b.nrows() != self.design_cols() || b.ncols() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "coefficients are {}x{}, expected {}x{}",
                b.nrows(),
                b.ncols(),
                self.design_cols(),
                self.d()
            )));
        }
        Ok(())
    }

    fn coefficients(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.design_cols(), self.d(), theta.as_slice())
    }

    fn evaluate(&self, theta: &DVector<f64>, with_jacobian: bool) -> (DVector<f64>, DMatrix<f64>) {
        let b = self.coefficients(theta);
        let (d, cols) = (self.d(), self.design_cols());
        let parts = d + 1;
        let mut r = DVector::zeros(self.n() * d);
        let mut jac = if with_jacobian {
            DMatrix::zeros(self.n() * d, cols * d)
        } else {
            DMatrix::zeros(0, 0)
        };
        let mut u = vec![0.0; parts];
        let mut m = vec![0.0; d];
        let mut hu = vec![0.0; d];
        let mut x = vec![0.0; cols];
        let h = self.helmert.as_matrix();
        for i in 0..self.n() {
            for (c, xc) in x.iter_mut().enumerate() {
                *xc = self.x[(i, c)];
            }
            transformed_mean_row(&x, &b, self.alpha, &self.helmert, &mut u, &mut m);
            for k in 0..d {
                r[i * d + k] = self.y_alpha[(i, k)] - m[k];
            }
            if !with_jacobian {
                continue;
            }
            // ∂m_m/∂η_k = D·u_{k+1}·(H_{m,k+1} − (H·u)_m), or H_{m,k+1} at α = 0.
            if self.alpha != 0.0 {
                self.helmert.apply(&u, &mut hu);
            }
            for mm in 0..d {
                for k in 0..d {
                    let dm = if self.alpha == 0.0 {
                        h[(mm, k + 1)]
                    } else {
                        parts as f64 * u[k + 1] * (h[(mm, k + 1)] - hu[mm])
                    };
                    for (c, &xc) in x.iter().enumerate() {
                        jac[(i * d + mm, k * cols + c)] = -dm * xc;
                    }
                }
            }
        }
        (r, jac)
    }
}

impl ResidualSystem for AlphaProblem {
    fn num_params(&self) -> usize {
        self.design_cols() * self.d()
    }
    fn num_residuals(&self) -> usize {
        self.n() * self.d()
    }
    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.evaluate(theta, false).0
    }
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.evaluate(theta, true).1
    }
    fn residuals_and_jacobian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        self.evaluate(theta, true)
    }
}

fn check_sample_size(x: &DesignMatrix) -> Result<()> {
    if x.n() <= x.ncols() {
        return Err(Error::InvalidDimension(format!(
            "{} observations for {} design columns; need n > p + 1",
            x.n(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Fits the α-regression from `B = 0`.
pub fn fit_alpha_regression(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    opts: &LmOptions,
) -> Result<FitResult> {
    fit_alpha_regression_from(y, x, alpha, opts, None)
}

/// Fits the α-regression from the given starting coefficients.
pub fn fit_alpha_regression_from(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    opts: &LmOptions,
    start: Option<&CoefficientMatrix>,
) -> Result<FitResult> {
    check_sample_size(x)?;
    let problem = AlphaProblem::new(y, x, alpha)?;
    let (coefficients, lm) = solve_problem(&problem, opts, start, None)?;
    finish_fit(y, x, alpha, &problem, coefficients, lm)
}

/// Runs the solver on a (possibly weighted) problem and returns the
/// coefficient matrix with the solver report.
pub(crate) fn solve_problem(
    problem: &AlphaProblem,
    opts: &LmOptions,
    start: Option<&CoefficientMatrix>,
    weights: Option<&[f64]>,
) -> Result<(CoefficientMatrix, LmResult)> {
    let (cols, d) = (problem.design_cols(), problem.d());
    let theta0 = match start {
        Some(b) => {
            problem.check_coefficients(b)?;
            b.theta()
        }
        None => vec![0.0; cols * d],
    };
    let lm = match weights {
        None => levenberg_marquardt(problem, &theta0, opts)?,
        Some(w) => {
            // One weight per observation, repeated across its d residuals.
            let expanded: Vec<f64> = w.iter().flat_map(|&wi| std::iter::repeat_n(wi, d)).collect();
            let weighted = apply_weights(problem, &expanded)?;
            levenberg_marquardt(&weighted, &theta0, opts)?
        }
    };
    Ok((CoefficientMatrix::from_theta(&lm.theta, cols, d), lm))
}

pub(crate) fn finish_fit(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    problem: &AlphaProblem,
    coefficients: CoefficientMatrix,
    lm: LmResult,
) -> Result<FitResult> {
    let fitted = fitted_mean(x, &coefficients)?;
    let sse = problem
        .residuals(&DVector::from_column_slice(coefficients.0.as_slice()))
        .norm_squared();
    let kld = kld(y, &fitted)?;
    Ok(FitResult { coefficients, fitted, sse, kld, alpha, lm, covariance: None })
}

/// Evaluates the fitted mean at new covariates.
pub fn predict(x_new: &DesignMatrix, fit: &FitResult) -> Result<CompositionMatrix> {
    fitted_mean(x_new, &fit.coefficients)
}
