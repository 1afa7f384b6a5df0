//! Marginal effects and coefficient covariance.
//!
//! For covariate `k` the effect on the mean composition of observation `i` is
//! `−μ_1·Σ_j β_jk μ_{j+1}` for the reference component and
//! `μ_ℓ(β_{ℓ−1,k} − Σ_j β_jk μ_{j+1})` for component `ℓ ≥ 2`; every row
//! sums to zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    fit_alpha_regression_from, fitted_mean, mean_jacobian, AlphaProblem, CoefficientMatrix,
    DesignMatrix, FitResult,
};
use crate::nls::{LmOptions, ResidualSystem};
use crate::par::map_indexed;
use crate::simplex::{Alpha, CompositionMatrix};
use crate::spatial::{GwarFit, SlxFit};

/// Condition numbers of `Ĥ` above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Negative eigenvalues down to this size are rounding and clipped to zero.
pub const PSD_TOL: f64 = 1e-10;
/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.2;

/// Per-observation effects of one covariate, `n × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEffectsTable {
    pub values: DMatrix<f64>,
    pub k: usize,
}

impl MarginalEffectsTable {
    /// Column means.
    pub fn average(&self) -> Vec<f64> {
        let n = self.values.nrows() as f64;
        self.values.column_iter().map(|c| c.sum() / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlxEffects {
    pub direct: MarginalEffectsTable,
    pub indirect: MarginalEffectsTable,
    pub total: MarginalEffectsTable,
}

fn check_covariate(k: usize, rows: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InterceptEffectRequested);
    }
    if k >= rows {
        return Err(Error::CovariateOutOfRange { k, p: rows - 1 });
    }
    Ok(())
}

fn effects_row(beta_k: &[f64], mu: &[f64], out: &mut [f64]) {
    let s: f64 = beta_k.iter().zip(&mu[1..]).map(|(b, m)| b * m).sum();
    out[0] = -mu[0] * s;
    for l in 1..mu.len() {
        out[l] = mu[l] * (beta_k[l - 1] - s);
    }
}

/// Effects of covariate `k` (1-based among covariates; 0 is the intercept).
pub fn marginal_effects(
    b: &CoefficientMatrix,
    mu: &CompositionMatrix,
    k: usize,
) -> Result<MarginalEffectsTable> {
    check_covariate(k, b.nrows())?;
    if b.ncols() + 1 != mu.parts() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficient columns for {} parts",
            b.ncols(),
            mu.parts()
        )));
    }
    let beta_k: Vec<f64> = (0..b.ncols()).map(|j| b.get(k, j)).collect();
    let mut values = DMatrix::zeros(mu.n(), mu.parts());
    let mut row = vec![0.0; mu.parts()];
    for i in 0..mu.n() {
        effects_row(&beta_k, &mu.row(i), &mut row);
        for (c, &v) in row.iter().enumerate() {
            values[(i, c)] = v;
        }
    }
    Ok(MarginalEffectsTable { values, k })
}

/// Average marginal effects of covariate `k` over the fitted observations.
pub fn average_marginal_effects(fit: &FitResult, k: usize) -> Result<Vec<f64>> {
    Ok(marginal_effects(&fit.coefficients, &fit.fitted, k)?.average())
}

/// Direct (through `B`), indirect (through `Γ`) and total (`B + Γ`) effects.
pub fn slx_effects(fit: &SlxFit, k: usize) -> Result<SlxEffects> {
    let mu = &fit.fit.fitted;
    let direct = marginal_effects(&fit.beta, mu, k)?;
    let indirect = marginal_effects(&fit.gamma, mu, k)?;
    let sum = CoefficientMatrix::new(fit.beta.as_matrix() + fit.gamma.as_matrix())?;
    let total = marginal_effects(&sum, mu, k)?;
    Ok(SlxEffects { direct, indirect, total })
}

/// Location-specific effects, each row using that location's coefficients.
pub fn gwar_marginal_effects(fit: &GwarFit, k: usize) -> Result<MarginalEffectsTable> {
    let rows = fit.local_coefficients.first().map_or(0, |b| b.nrows());
    check_covariate(k, rows)?;
    let parts = fit.fitted.parts();
    let mut values = DMatrix::zeros(fit.fitted.n(), parts);
    let mut row = vec![0.0; parts];
    for (i, b) in fit.local_coefficients.iter().enumerate() {
        let beta_k: Vec<f64> = (0..b.ncols()).map(|j| b.get(k, j)).collect();
        effects_row(&beta_k, &fit.fitted.row(i), &mut row);
        for (c, &v) in row.iter().enumerate() {
            values[(i, c)] = v;
        }
    }
    Ok(MarginalEffectsTable { values, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Sandwich,
    Spherical,
    Bootstrap,
}

/// Covariance of `vec(B̂)` (column-major, `(p+1)·d` square).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub kind: CovarianceKind,
    /// Successful replicates (bootstrap only).
    pub replicates: Option<usize>,
}

impl CovarianceEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Symmetrizes and clips rounding-level negative eigenvalues.
fn enforce_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < -PSD_TOL {
        return Err(Error::NotPositiveSemidefinite(min));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}

fn inverse_checked(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let (min, max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularH { condition });
    }
    let inv = eig.eigenvalues.map(|v| 1.0 / v);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// `Ĥ = GᵀG/n` and `Ĵ = Σ_i (G_iᵀε_i)(G_iᵀε_i)ᵀ/n` from the stacked mean
/// Jacobian and residuals.
pub(crate) fn sandwich_parts(
    g: &DMatrix<f64>,
    eps: &DVector<f64>,
    n: usize,
    d: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = g.ncols();
    let h = g.tr_mul(g) / n as f64;
    let mut j = DMatrix::zeros(q, q);
    for i in 0..n {
        let gi = g.rows(i * d, d);
        let s = gi.tr_mul(&eps.rows(i * d, d));
        j += &s * s.transpose();
    }
    (h, j / n as f64)
}

fn covariance_inputs(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<(AlphaProblem, DMatrix<f64>, DVector<f64>)> {
    let problem = AlphaProblem::new(y, x, alpha)?;
    if b.nrows() != problem.design_cols() || b.ncols() != problem.d() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients are {}x{}, expected {}x{}",
            b.nrows(),
            b.ncols(),
            problem.design_cols(),
            problem.d()
        )));
    }
    let g = mean_jacobian(&problem, b);
    let eps = problem.residuals(&DVector::from_column_slice(b.as_matrix().as_slice()));
    Ok((problem, g, eps))
}

/// `Ĥ⁻¹ĴĤ⁻¹/n`.
pub fn sandwich_covariance(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<CovarianceEstimate> {
    let (problem, g, eps) = covariance_inputs(y, x, alpha, b)?;
    let n = problem.n();
    let (h, j) = sandwich_parts(&g, &eps, n, problem.d());
    let hinv = inverse_checked(&h)?;
    let matrix = enforce_psd(&hinv * j * &hinv / n as f64)?;
    Ok(CovarianceEstimate { matrix, kind: CovarianceKind::Sandwich, replicates: None })
}

/// `σ̂²Ĥ⁻¹/n` with `σ̂² = SSE/(nd − (p+1)d)`.
pub fn spherical_covariance(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<CovarianceEstimate> {
    let (problem, g, eps) = covariance_inputs(y, x, alpha, b)?;
    let (n, d, cols) = (problem.n(), problem.d(), problem.design_cols());
    let dof = (n * d).saturating_sub(cols * d);
    if dof == 0 {
        return Err(Error::InvalidDimension("no residual degrees of freedom".into()));
    }
    let sigma2 = eps.norm_squared() / dof as f64;
    let h = g.tr_mul(&g) / n as f64;
    let hinv = inverse_checked(&h)?;
    let matrix = enforce_psd(hinv * (sigma2 / n as f64))?;
    Ok(CovarianceEstimate { matrix, kind: CovarianceKind::Spherical, replicates: None })
}

/// Coefficient estimates from pairs-bootstrap resamples.
#[derive(Debug, Clone)]
pub struct BootstrapDraws {
    /// `vec(B̂*)` of each successful replicate, in replicate order.
    pub thetas: Vec<Vec<f64>>,
    pub failed: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BootstrapDraws {
    pub fn covariance(&self) -> Result<CovarianceEstimate> {
        let q = self.rows * self.cols;
        let r = self.thetas.len();
        let mut mean = DVector::zeros(q);
        for t in &self.thetas {
            mean += DVector::from_column_slice(t);
        }
        mean /= r as f64;
        let mut cov = DMatrix::zeros(q, q);
        for t in &self.thetas {
            let dev = DVector::from_column_slice(t) - &mean;
            cov += &dev * dev.transpose();
        }
        let matrix = enforce_psd(cov / (r - 1) as f64)?;
        Ok(CovarianceEstimate { matrix, kind: CovarianceKind::Bootstrap, replicates: Some(r) })
    }

    /// Standard deviations of the average marginal effects of covariate
    /// `k`, each replicate evaluated at the original covariates.
    pub fn ame_standard_errors(&self, x: &DesignMatrix, k: usize) -> Result<Vec<f64>> {
        let mut draws = Vec::with_capacity(self.thetas.len());
        for t in &self.thetas {
            let b = CoefficientMatrix::from_theta(t, self.rows, self.cols);
            let mu = fitted_mean(x, &b)?;
            draws.push(marginal_effects(&b, &mu, k)?.average());
        }
        let parts = self.cols + 1;
        let r = draws.len() as f64;
        Ok((0..parts)
            .map(|c| {
                let m = draws.iter().map(|a| a[c]).sum::<f64>() / r;
                (draws.iter().map(|a| (a[c] - m).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
            })
            .collect())
    }
}

/// Resamples rows with replacement and refits. Replicate `r` draws from
/// its own ChaCha stream `r` of `seed` and warm-starts from the full-data
/// fit, so results are independent of scheduling.
pub fn bootstrap_draws(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    opts: &LmOptions,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapDraws> {
    if replicates < 2 {
        return Err(Error::InvalidOptions(format!("{replicates} bootstrap replicates; need at least 2")));
    }
    let full = fit_alpha_regression_from(y, x, alpha, opts, None)?;
    let n = y.n();
    let results: Vec<Option<Vec<f64>>> = map_indexed(replicates, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let (yb, xb) = (y.select_rows(&rows), x.select_rows(&rows));
        fit_alpha_regression_from(&yb, &xb, alpha, opts, Some(&full.coefficients))
            .ok()
            .map(|f| f.coefficients.theta())
    });
    let thetas: Vec<Vec<f64>> = results.iter().flatten().cloned().collect();
    let failed = replicates - thetas.len();
    if failed as f64 > MAX_BOOTSTRAP_FAILURE * replicates as f64 || thetas.len() < 2 {
        return Err(Error::BootstrapFailures { failed, total: replicates });
    }
    if failed > 0 {
        log::warn!("{failed} of {replicates} bootstrap replicates failed and were dropped");
    }
    Ok(BootstrapDraws {
        thetas,
        failed,
        rows: full.coefficients.nrows(),
        cols: full.coefficients.ncols(),
    })
}

/// Empirical covariance of `vec(B̂*)` over pairs-bootstrap replicates.
pub fn bootstrap_covariance(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    opts: &LmOptions,
    replicates: usize,
    seed: u64,
) -> Result<CovarianceEstimate> {
    bootstrap_draws(y, x, alpha, opts, replicates, seed)?.covariance()
}
