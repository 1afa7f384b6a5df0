use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    fit_alpha_regression_from, mean_row, solve_problem, AlphaProblem, CoefficientMatrix,
    DesignMatrix, FitResult,
};
use crate::nls::LmOptions;
use crate::par::map_indexed;
use crate::selection::kld;
use crate::simplex::{Alpha, CompositionMatrix};

use super::{kernel_from_point, GeoCoordinates};

/// Geographically weighted α-regression: one coefficient matrix per
/// training location.
#[derive(Debug, Clone)]
pub struct GwarFit {
    pub local_coefficients: Vec<CoefficientMatrix>,
    pub alpha: Alpha,
    pub h: f64,
    pub fitted: CompositionMatrix,
    pub kld: f64,
    /// Unweighted fit used as the warm start for every local problem.
    pub global: FitResult,
    pub(crate) y: CompositionMatrix,
    pub(crate) x: DesignMatrix,
    pub(crate) coords: GeoCoordinates,
    pub(crate) opts: LmOptions,
}

impl GwarFit {
    pub fn coords(&self) -> &GeoCoordinates {
        &self.coords
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.x
    }
}

/// Solves the kernel-weighted problem centred on `point`. `exclude` marks a
/// training row whose weight is not counted when checking for degenerate
/// weights (the focal observation itself during in-sample fitting).
#[allow(clippy::too_many_arguments)]
pub(crate) fn local_fit(
    problem: &AlphaProblem,
    coords: &GeoCoordinates,
    point: &[f64; 3],
    h: f64,
    opts: &LmOptions,
    start: &CoefficientMatrix,
    exclude: Option<usize>,
    location: usize,
) -> Result<CoefficientMatrix> {
    let weights = kernel_from_point(point, (0..coords.len()).map(|j| coords.cartesian(j)), h)?;
    let others: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != exclude)
        .map(|(_, w)| w)
        .sum();
    if !(others > 0.0) {
        return Err(Error::DegenerateWeights { location });
    }
    Ok(solve_problem(problem, opts, Some(start), Some(&weights))?.0)
}

pub fn fit_gwar(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    coords: &GeoCoordinates,
    alpha: Alpha,
    h: f64,
    opts: &LmOptions,
) -> Result<GwarFit> {
    fit_gwar_from(y, x, coords, alpha, h, opts, None)
}

pub(crate) fn fit_gwar_from(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    coords: &GeoCoordinates,
    alpha: Alpha,
    h: f64,
    opts: &LmOptions,
    global: Option<FitResult>,
) -> Result<GwarFit> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::NonpositiveBandwidth(h));
    }
    if coords.len() != y.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} coordinates for {} observations",
            coords.len(),
            y.n()
        )));
    }
    let global = match global {
        Some(g) => g,
        None => fit_alpha_regression_from(y, x, alpha, opts, None)?,
    };
    let problem = AlphaProblem::new(y, x, alpha)?;
    let local: Vec<Result<CoefficientMatrix>> = map_indexed(y.n(), |i| {
        local_fit(&problem, coords, &coords.cartesian(i), h, opts, &global.coefficients, Some(i), i)
    });
    let local_coefficients = local.into_iter().collect::<Result<Vec<_>>>()?;

    let parts = y.parts();
    let mut fitted = DMatrix::zeros(y.n(), parts);
    let mut row = vec![0.0; parts];
    for (i, b) in local_coefficients.iter().enumerate() {
        mean_row(&x.row(i), b.as_matrix(), &mut row);
        for (c, &v) in row.iter().enumerate() {
            fitted[(i, c)] = v;
        }
    }
    let fitted = CompositionMatrix::from_closed(fitted);
    let kld = kld(y, &fitted)?;
    Ok(GwarFit {
        local_coefficients,
        alpha,
        h,
        fitted,
        kld,
        global,
        y: y.clone(),
        x: x.clone(),
        coords: coords.clone(),
        opts: opts.clone(),
    })
}

/// Out-of-sample prediction: refits the weighted problem at each new
/// location from the training data and evaluates the mean there.
pub fn predict_gwar(
    fit: &GwarFit,
    x_new: &DesignMatrix,
    coords_new: &GeoCoordinates,
) -> Result<CompositionMatrix> {
    if x_new.ncols() != fit.x.ncols() || x_new.n() != coords_new.len() {
        return Err(Error::DimensionMismatch(format!(
            "new design is {}x{} with {} coordinates; training design has {} columns",
            x_new.n(),
            x_new.ncols(),
            coords_new.len(),
            fit.x.ncols()
        )));
    }
    let problem = AlphaProblem::new(&fit.y, &fit.x, fit.alpha)?;
    let local: Vec<Result<CoefficientMatrix>> = map_indexed(x_new.n(), |i| {
        local_fit(
            &problem,
            &fit.coords,
            &coords_new.cartesian(i),
            fit.h,
            &fit.opts,
            &fit.global.coefficients,
            None,
            i,
        )
    });
    let parts = fit.y.parts();
    let mut out = DMatrix::zeros(x_new.n(), parts);
    let mut row = vec![0.0; parts];
    for (i, b) in local.into_iter().enumerate() {
        mean_row(&x_new.row(i), b?.as_matrix(), &mut row);
        for (c, &v) in row.iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(CompositionMatrix::from_closed(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, SpatialMode, SyntheticSpec};
    use crate::spatial::gaussian_kernel_weights;

    fn data(n: usize, mode: SpatialMode, seed: u64) -> crate::io::SyntheticData {
        generate_synthetic(&SyntheticSpec {
            n,
            parts: 3,
            covariates: 1,
            alpha: 0.5,
            noise_scale: 0.05,
            spatial: mode,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn flat_kernel_matches_global() {
        let d = data(60, SpatialMode::None, 3);
        let coords = GeoCoordinates::new(d.lat.clone(), d.lon.clone()).unwrap();
        let alpha = Alpha::new(0.5).unwrap();
        let fit = fit_gwar(&d.y, &d.x, &coords, alpha, 1e6, &LmOptions::default()).unwrap();
        for b in &fit.local_coefficients {
            assert!(b.max_abs_diff(&fit.global.coefficients) < 1e-6);
        }
        for i in 0..d.y.n() {
            assert!((fit.fitted.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(gaussian_kernel_weights(&coords, i, 0.01).unwrap().values[i], 1.0);
        }
        let pred = predict_gwar(&fit, &d.x, &coords).unwrap();
        assert!((pred.as_matrix() - fit.global.fitted.as_matrix()).amax() < 1e-6);
    }

    #[test]
    fn coincident_prediction_matches_in_sample() {
        let d = data(50, SpatialMode::None, 4);
        let coords = GeoCoordinates::new(d.lat.clone(), d.lon.clone()).unwrap();
        let alpha = Alpha::new(0.5).unwrap();
        let fit = fit_gwar(&d.y, &d.x, &coords, alpha, 0.05, &LmOptions::default()).unwrap();
        let rows = [0usize, 7, 31];
        let pred = predict_gwar(&fit, &d.x.select_rows(&rows), &coords.select(&rows)).unwrap();
        for (r, &i) in rows.iter().enumerate() {
            for c in 0..3 {
                assert!((pred.as_matrix()[(r, c)] - fit.fitted.as_matrix()[(i, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_weights_reported() {
        let d = data(30, SpatialMode::None, 5);
        let coords = GeoCoordinates::new(d.lat.clone(), d.lon.clone()).unwrap();
        let alpha = Alpha::new(0.5).unwrap();
        let err = fit_gwar(&d.y, &d.x, &coords, alpha, 1e-9, &LmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights { .. }));
        assert!(matches!(
            fit_gwar(&d.y, &d.x, &coords, alpha, 0.0, &LmOptions::default()),
            Err(Error::NonpositiveBandwidth(_))
        ));
    }
}
