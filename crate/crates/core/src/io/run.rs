//! End-to-end runs: hyper-parameter selection, final fit and the result
//! document.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    average_marginal_effects, bootstrap_draws, marginal_effects, sandwich_covariance,
    slx_effects, gwar_marginal_effects, spherical_covariance, CovarianceEstimate, CovarianceKind,
    MarginalEffectsTable, SlxEffects,
};
use crate::model::{
    fit_alpha_regression, fitted_mean, mean_row, AlphaProblem, CoefficientMatrix, DesignMatrix,
    FitResult,
};
use crate::nls::{LmOptions, Termination};
use crate::selection::{
    default_h_grid, loocv_alpha, loocv_gwar, loocv_slx, CvGrid, CvResult,
};
use crate::simplex::{Alpha, CompositionMatrix};
use crate::spatial::gwar::local_fit;
use crate::spatial::{
    contiguity_matrix, fit_alpha_slx, fit_gwar, lag_at_point, spatial_lag, GeoCoordinates,
};

use super::{Dataset, DatasetSpec};

/// Neighbour counts tried when none are configured.
const DEFAULT_KS: [usize; 5] = [3, 5, 7, 9, 11];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Alpha,
    Slx,
    Gwar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    #[default]
    None,
    Sandwich,
    Spherical,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Fixed α; selected by cross-validation when absent.
    pub alpha: Option<f64>,
    /// Fixed neighbour count for SLX.
    pub k: Option<usize>,
    /// Fixed bandwidth for GWαR.
    pub h: Option<f64>,
    pub grid: CvGrid,
    pub solver: LmOptions,
    pub standard_errors: SeKind,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Alpha,
            alpha: None,
            k: None,
            h: None,
            grid: CvGrid::default(),
            solver: LmOptions::default(),
            standard_errors: SeKind::None,
            bootstrap_replicates: 200,
            seed: 0,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmeEntry {
    pub covariate: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlxAmeEntry {
    pub covariate: String,
    pub direct: Vec<f64>,
    pub indirect: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub converged_by: Termination,
    pub initial_sse: f64,
    pub final_sse: f64,
}

/// Everything a run produces. Coefficient matrices are written row by row:
/// one row per design column (intercept first), one entry per non-reference
/// component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub model: ModelKind,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    pub composition_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub n: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvResult>,
    /// `B` (the global fit for GWαR).
    pub coefficients: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<f64>>>,
    /// Same layout as the fitted design's coefficient matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_kind: Option<CovarianceKind>,
    pub kld: f64,
    /// Observed against fitted, per component.
    pub correlations: Vec<Option<f64>>,
    pub ame: Vec<AmeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slx_effects: Option<Vec<SlxAmeEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_coefficients: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_seconds: Option<f64>,
}

impl ResultDocument {
    pub fn coefficient_matrix(&self) -> Result<CoefficientMatrix> {
        matrix(&self.coefficients)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn matrix(rows: &[Vec<f64>]) -> Result<CoefficientMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidParameters("ragged coefficient rows".into()));
    }
    CoefficientMatrix::new(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn coords_of(data: &Dataset) -> Result<&GeoCoordinates> {
    data.coords.as_ref().ok_or_else(|| Error::MissingColumn("lat".into()))
}

fn correlations(y: &CompositionMatrix, mu: &CompositionMatrix) -> Vec<Option<f64>> {
    let n = y.n() as f64;
    (0..y.parts())
        .map(|j| {
            let a = y.as_matrix().column(j);
            let b = mu.as_matrix().column(j);
            let (ma, mb) = (a.sum() / n, b.sum() / n);
            let cov: f64 = a.iter().zip(b.iter()).map(|(x, z)| (x - ma) * (z - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|z| (z - mb).powi(2)).sum();
            let r = cov / (va * vb).sqrt();
            r.is_finite().then_some(r)
        })
        .collect()
}

/// The grid actually searched, after applying fixed hyper-parameters and
/// defaults.
fn effective_grid(config: &RunConfig, data: &Dataset) -> Result<CvGrid> {
    let mut grid = config.grid.clone();
    if let Some(a) = config.alpha {
        grid.alphas = vec![a];
    }
    match config.model {
        ModelKind::Alpha => {}
        ModelKind::Slx => {
            if let Some(k) = config.k {
                grid.ks = vec![k];
            } else if grid.ks.is_empty() {
                let n = data.y.n();
                grid.ks = DEFAULT_KS.iter().copied().filter(|&k| k < n).collect();
                if grid.ks.is_empty() {
                    grid.ks = vec![1];
                }
            }
        }
        ModelKind::Gwar => {
            if let Some(h) = config.h {
                grid.hs = vec![h];
            } else if grid.hs.is_empty() {
                grid.hs = default_h_grid(coords_of(data)?)?;
            }
        }
    }
    Ok(grid)
}

fn needs_cv(config: &RunConfig) -> bool {
    config.alpha.is_none()
        || match config.model {
            ModelKind::Alpha => false,
            ModelKind::Slx => config.k.is_none(),
            ModelKind::Gwar => config.h.is_none(),
        }
}

/// Cross-validates over the configured grid.
pub fn run_cv(config: &RunConfig, data: &Dataset) -> Result<CvResult> {
    let grid = effective_grid(config, data)?;
    match config.model {
        ModelKind::Alpha => loocv_alpha(&data.y, &data.x, &grid, &config.solver),
        ModelKind::Slx => loocv_slx(&data.y, &data.x, coords_of(data)?, &grid, &config.solver),
        ModelKind::Gwar => loocv_gwar(&data.y, &data.x, coords_of(data)?, &grid, &config.solver),
    }
}

fn covariance(
    config: &RunConfig,
    y: &CompositionMatrix,
    x: &DesignMatrix,
    fit: &FitResult,
) -> Result<Option<(CovarianceEstimate, Option<crate::inference::BootstrapDraws>)>> {
    let b = &fit.coefficients;
    Ok(match config.standard_errors {
        SeKind::None => None,
        SeKind::Sandwich => Some((sandwich_covariance(y, x, fit.alpha, b)?, None)),
        SeKind::Spherical => Some((spherical_covariance(y, x, fit.alpha, b)?, None)),
        SeKind::Bootstrap => {
            let draws = bootstrap_draws(
                y,
                x,
                fit.alpha,
                &config.solver,
                config.bootstrap_replicates,
                config.seed,
            )?;
            Some((draws.covariance()?, Some(draws)))
        }
    })
}

fn se_rows(cov: &CovarianceEstimate, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let se = cov.standard_errors();
    (0..rows).map(|r| (0..cols).map(|c| se[c * rows + r]).collect()).collect()
}

/// Selects hyper-parameters when needed, fits, and assembles the document.
pub fn run_fit(
    config: &RunConfig,
    data: &Dataset,
    spec: Option<&DatasetSpec>,
) -> Result<ResultDocument> {
    config.solver.validate()?;
    if config.model != ModelKind::Alpha {
        coords_of(data)?;
    }
    let cv = if needs_cv(config) { Some(run_cv(config, data)?) } else { None };
    let alpha_value = cv.as_ref().map_or_else(|| config.alpha.unwrap_or(1.0), |c| c.best.alpha);
    let alpha = Alpha::new(alpha_value)?;
    let p = data.x.covariates();
    let mut doc = ResultDocument {
        model: config.model,
        config: config.clone(),
        dataset: spec.cloned(),
        composition_names: data.composition_names.clone(),
        covariate_names: data.covariate_names.clone(),
        n: data.y.n(),
        alpha: alpha_value,
        k: None,
        h: None,
        cv,
        coefficients: Vec::new(),
        gamma: None,
        standard_errors: None,
        covariance_kind: None,
        kld: 0.0,
        correlations: Vec::new(),
        ame: Vec::new(),
        slx_effects: None,
        local_coefficients: None,
        solver: None,
        timing_seconds: None,
    };
    let name = |k: usize| data.covariate_names.get(k - 1).cloned().unwrap_or_else(|| format!("x{k}"));
    let summary = |f: &FitResult| SolverSummary {
        iterations: f.lm.iterations,
        converged_by: f.lm.converged_by,
        initial_sse: f.lm.initial_sse,
        final_sse: f.lm.final_sse,
    };

    match config.model {
        ModelKind::Alpha => {
            let fit = fit_alpha_regression(&data.y, &data.x, alpha, &config.solver)?;
            let cov = covariance(config, &data.y, &data.x, &fit)?;
            doc.coefficients = rows_of(fit.coefficients.as_matrix());
            doc.kld = fit.kld;
            doc.correlations = correlations(&data.y, &fit.fitted);
            for k in 1..=p {
                let ame_se = match &cov {
                    Some((_, Some(draws))) => Some(draws.ame_standard_errors(&data.x, k)?),
                    _ => None,
                };
                doc.ame.push(AmeEntry {
                    covariate: name(k),
                    values: average_marginal_effects(&fit, k)?,
                    standard_errors: ame_se,
                });
            }
            if let Some((c, _)) = &cov {
                doc.standard_errors = Some(se_rows(c, fit.coefficients.nrows(), fit.coefficients.ncols()));
                doc.covariance_kind = Some(c.kind);
            }
            doc.solver = Some(summary(&fit));
        }
        ModelKind::Slx => {
            let k = doc.cv.as_ref().and_then(|c| c.best.k).or(config.k).expect("k resolved");
            let w = contiguity_matrix(coords_of(data)?, k)?;
            let fit = fit_alpha_slx(&data.y, &data.x, &w, alpha, &config.solver)?;
            let cov = covariance(config, &data.y, &fit.design, &fit.fit)?;
            doc.k = Some(k);
            doc.coefficients = rows_of(fit.beta.as_matrix());
            doc.gamma = Some(rows_of(fit.gamma.as_matrix()));
            doc.kld = fit.fit.kld;
            doc.correlations = correlations(&data.y, &fit.fit.fitted);
            let mut effects = Vec::new();
            for kk in 1..=p {
                let e = slx_effects(&fit, kk)?;
                doc.ame.push(AmeEntry {
                    covariate: name(kk),
                    values: e.direct.average(),
                    standard_errors: None,
                });
                effects.push(SlxAmeEntry {
                    covariate: name(kk),
                    direct: e.direct.average(),
                    indirect: e.indirect.average(),
                    total: e.total.average(),
                });
            }
            doc.slx_effects = Some(effects);
            if let Some((c, _)) = &cov {
                let b = &fit.fit.coefficients;
                doc.standard_errors = Some(se_rows(c, b.nrows(), b.ncols()));
                doc.covariance_kind = Some(c.kind);
            }
            doc.solver = Some(summary(&fit.fit));
        }
        ModelKind::Gwar => {
            if config.standard_errors != SeKind::None {
                return Err(Error::InvalidOptions(
                    "standard errors are available for the alpha and slx models only".into(),
                ));
            }
            let h = doc.cv.as_ref().and_then(|c| c.best.h).or(config.h).expect("h resolved");
            let fit = fit_gwar(&data.y, &data.x, coords_of(data)?, alpha, h, &config.solver)?;
            doc.h = Some(h);
            doc.coefficients = rows_of(fit.global.coefficients.as_matrix());
            doc.kld = fit.kld;
            doc.correlations = correlations(&data.y, &fit.fitted);
            for k in 1..=p {
                doc.ame.push(AmeEntry {
                    covariate: name(k),
                    values: gwar_marginal_effects(&fit, k)?.average(),
                    standard_errors: None,
                });
            }
            doc.local_coefficients =
                Some(fit.local_coefficients.iter().map(|b| rows_of(b.as_matrix())).collect());
            doc.solver = Some(summary(&fit.global));
        }
    }
    Ok(doc)
}

/// Stacks `B` over the covariate rows of `Γ` for the augmented design.
fn stacked_slx(doc: &ResultDocument) -> Result<CoefficientMatrix> {
    let beta = doc.coefficient_matrix()?;
    let gamma = matrix(doc.gamma.as_deref().ok_or_else(|| {
        Error::InvalidParameters("SLX document has no gamma coefficients".into())
    })?)?;
    let (cols, d) = (beta.nrows(), beta.ncols());
    let mut s = DMatrix::zeros(2 * cols - 1, d);
    s.rows_mut(0, cols).copy_from(beta.as_matrix());
    s.rows_mut(cols, cols - 1).copy_from(&gamma.as_matrix().rows(1, cols - 1));
    CoefficientMatrix::new(s)
}

fn check_document(doc: &ResultDocument, x: &DesignMatrix) -> Result<()> {
    if doc.coefficients.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} coefficient rows, data has {} design columns",
            doc.coefficients.len(),
            x.ncols()
        )));
    }
    Ok(())
}

fn new_coords(coords: Option<&GeoCoordinates>) -> Result<&GeoCoordinates> {
    coords.ok_or_else(|| Error::MissingColumn("lat".into()))
}

/// Predicted compositions at new rows. SLX lags and GWαR local fits use the
/// training data the document was fitted on.
pub fn predict_from_document(
    doc: &ResultDocument,
    training: &Dataset,
    x_new: &DesignMatrix,
    coords_new: Option<&GeoCoordinates>,
) -> Result<CompositionMatrix> {
    check_document(doc, x_new)?;
    check_document(doc, &training.x)?;
    let b = doc.coefficient_matrix()?;
    match doc.model {
        ModelKind::Alpha => fitted_mean(x_new, &b),
        ModelKind::Slx => {
            let k = doc.k.ok_or_else(|| Error::InvalidParameters("SLX document has no k".into()))?;
            let train = coords_of(training)?;
            let target = new_coords(coords_new)?;
            if target.len() != x_new.n() {
                return Err(Error::DimensionMismatch("coordinates and covariates differ in length".into()));
            }
            let lag = DMatrix::from_fn(x_new.n(), x_new.covariates(), |i, c| {
                lag_at_point(&target.cartesian(i), train, &training.x, k)[c]
            });
            fitted_mean(&x_new.augment(&lag)?, &stacked_slx(doc)?)
        }
        ModelKind::Gwar => {
            let h = doc.h.ok_or_else(|| Error::InvalidParameters("GWAR document has no h".into()))?;
            let train = coords_of(training)?;
            let target = new_coords(coords_new)?;
            if target.len() != x_new.n() {
                return Err(Error::DimensionMismatch("coordinates and covariates differ in length".into()));
            }
            let problem = AlphaProblem::new(&training.y, &training.x, Alpha::new(doc.alpha)?)?;
            let parts = b.ncols() + 1;
            let mut out = DMatrix::zeros(x_new.n(), parts);
            let mut row = vec![0.0; parts];
            for i in 0..x_new.n() {
                let local =
                    local_fit(&problem, train, &target.cartesian(i), h, &doc.config.solver, &b, None, i)?;
                mean_row(&x_new.row(i), local.as_matrix(), &mut row);
                out.row_mut(i).copy_from_slice(&row);
            }
            CompositionMatrix::new(out)
        }
    }
}

/// Per-observation marginal effects recomputed from a result document.
#[derive(Debug, Clone, PartialEq)]
pub enum DocumentMargins {
    Plain(MarginalEffectsTable),
    Slx(SlxEffects),
    Local(MarginalEffectsTable),
}

pub fn margins_from_document(
    doc: &ResultDocument,
    training: &Dataset,
    k: usize,
) -> Result<DocumentMargins> {
    check_document(doc, &training.x)?;
    let b = doc.coefficient_matrix()?;
    match doc.model {
        ModelKind::Alpha => {
            let mu = fitted_mean(&training.x, &b)?;
            Ok(DocumentMargins::Plain(marginal_effects(&b, &mu, k)?))
        }
        ModelKind::Slx => {
            let kn = doc.k.ok_or_else(|| Error::InvalidParameters("SLX document has no k".into()))?;
            let w = contiguity_matrix(coords_of(training)?, kn)?;
            let aug = training.x.augment(&spatial_lag(&w, &training.x)?)?;
            let mu = fitted_mean(&aug, &stacked_slx(doc)?)?;
            let gamma = matrix(doc.gamma.as_deref().unwrap_or_default())?;
            let total = CoefficientMatrix::new(b.as_matrix() + gamma.as_matrix())?;
            Ok(DocumentMargins::Slx(SlxEffects {
                direct: marginal_effects(&b, &mu, k)?,
                indirect: marginal_effects(&gamma, &mu, k)?,
                total: marginal_effects(&total, &mu, k)?,
            }))
        }
        ModelKind::Gwar => {
            let locals = doc.local_coefficients.as_ref().ok_or_else(|| {
                Error::InvalidParameters("GWAR document has no local coefficients".into())
            })?;
            if locals.len() != training.x.n() {
                return Err(Error::DimensionMismatch(format!(
                    "{} local coefficient sets for {} observations",
                    locals.len(),
                    training.x.n()
                )));
            }
            let parts = b.ncols() + 1;
            let mut values = DMatrix::zeros(locals.len(), parts);
            for (i, rows) in locals.iter().enumerate() {
                let bi = matrix(rows)?;
                let xi = training.x.select_rows(&[i]);
                let mu = fitted_mean(&xi, &bi)?;
                let e = marginal_effects(&bi, &mu, k)?;
                values.row_mut(i).copy_from(&e.values.row(0));
            }
            Ok(DocumentMargins::Local(MarginalEffectsTable { values, k }))
        }
    }
}
