//! Divergence scoring and leave-one-out cross-validation.
//!
//! Every fold is an independent unit of work. Folds at a given α warm-start
//! from the full-data fit at that α, so the fold results do not depend on
//! scheduling and parallel scores equal serial ones exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    fit_alpha_regression_from, mean_row, solve_problem, AlphaProblem, CoefficientMatrix,
    DesignMatrix, FitResult,
};
use crate::nls::LmOptions;
use crate::par::map_indexed;
use crate::simplex::{Alpha, CompositionMatrix};
use crate::spatial::{
    contiguity_matrix, fit_alpha_slx, lag_at_point, spatial_lag, GeoCoordinates,
};
use crate::spatial::gwar::local_fit;

/// `Σ_i Σ_j y_ij log(y_ij/μ_ij)` with `0·log 0 = 0`.
pub fn kld(observed: &CompositionMatrix, fitted: &CompositionMatrix) -> Result<f64> {
    if observed.n() != fitted.n() || observed.parts() != fitted.parts() {
        return Err(Error::ShapeMismatch {
            observed: (observed.n(), observed.parts()),
            fitted: (fitted.n(), fitted.parts()),
        });
    }
    let (y, mu) = (observed.as_matrix(), fitted.as_matrix());
    let mut total = 0.0;
    for i in 0..y.nrows() {
        for j in 0..y.ncols() {
            if !(mu[(i, j)] > 0.0) {
                return Err(Error::NonpositiveFitted { row: i, col: j });
            }
            total += row_term(y[(i, j)], mu[(i, j)]);
        }
    }
    Ok(total)
}

fn row_term(y: f64, mu: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * (y / mu).ln()
    }
}

/// KLD of one held-out row; `+∞` when the prediction has a zero where the
/// observation does not.
fn fold_kld(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else if b > 0.0 { row_term(a, b) } else { f64::INFINITY })
        .sum()
}

/// Median of all pairwise chordal distances.
pub fn median_heuristic_bandwidth(coords: &GeoCoordinates) -> Result<f64> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::InvalidDimension(format!("{n} locations; need at least 2")));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(coords.distance_sq(i, j).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    if dists[dists.len() - 1] == 0.0 {
        return Err(Error::AllCoincident);
    }
    let m = dists.len();
    Ok(if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) })
}

/// Ten log-spaced bandwidths from `median/16` to `4·median`.
pub fn default_h_grid(coords: &GeoCoordinates) -> Result<Vec<f64>> {
    let median = median_heuristic_bandwidth(coords)?;
    let (lo, hi) = ((median / 16.0).ln(), (4.0 * median).ln());
    Ok((0..10)
        .map(|i| match i {
            0 => median / 16.0,
            9 => 4.0 * median,
            _ => (lo + (hi - lo) * i as f64 / 9.0).exp(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvGrid {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
    pub hs: Vec<f64>,
}

impl Default for CvGrid {
    fn default() -> Self {
        Self { alphas: vec![0.1, 0.25, 0.5, 0.75, 1.0], ks: Vec::new(), hs: Vec::new() }
    }
}

/// Score of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Sum of held-out KLDs; `+∞` when any fold failed (written as null).
    #[serde(with = "score_serde")]
    pub score: f64,
    /// Held-out KLD of every fold, in observation order.
    #[serde(skip)]
    pub folds: Vec<f64>,
}

mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub scores: Vec<CvPoint>,
    pub best: CvPoint,
}

impl CvResult {
    fn from_points(scores: Vec<CvPoint>) -> Result<Self> {
        let best = scores
            .iter()
            .min_by(|a, b| {
                a.score
                    .total_cmp(&b.score)
                    .then(a.alpha.total_cmp(&b.alpha))
                    .then(a.k.cmp(&b.k))
                    .then(a.h.unwrap_or(0.0).total_cmp(&b.h.unwrap_or(0.0)))
            })
            .cloned()
            .ok_or_else(|| Error::InvalidOptions("empty cross-validation grid".into()))?;
        if !best.score.is_finite() {
            return Err(Error::InvalidOptions("every grid point failed to fit".into()));
        }
        Ok(Self { scores, best })
    }
}

fn check_grid(values: &[f64], name: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidOptions(format!("{name} grid is empty")));
    }
    Ok(())
}

fn check_n(y: &CompositionMatrix, x: &DesignMatrix) -> Result<()> {
    if y.n() < 3 {
        return Err(Error::InvalidDimension(format!("{} observations; need at least 3", y.n())));
    }
    if y.n() != x.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} compositions but {} design rows",
            y.n(),
            x.n()
        )));
    }
    Ok(())
}

fn retained(n: usize, held_out: usize) -> Vec<usize> {
    (0..n).filter(|&j| j != held_out).collect()
}

fn sum_folds(folds: &[f64]) -> f64 {
    folds.iter().sum()
}

fn predict_row(x: &[f64], b: &CoefficientMatrix, parts: usize) -> Vec<f64> {
    let mut mu = vec![0.0; parts];
    mean_row(x, b.as_matrix(), &mut mu);
    mu
}

/// Full-data fits across the α grid, each warm-started from the previous
/// one. Grid order is preserved; failures are kept as `None`.
fn fit_path(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alphas: &[f64],
    opts: &LmOptions,
) -> Result<Vec<Option<FitResult>>> {
    let mut out = Vec::with_capacity(alphas.len());
    let mut previous: Option<CoefficientMatrix> = None;
    for &a in alphas {
        let alpha = Alpha::new(a)?;
        alpha.check_for(y)?;
        match fit_alpha_regression_from(y, x, alpha, opts, previous.as_ref()) {
            Ok(fit) => {
                previous = Some(fit.coefficients.clone());
                out.push(Some(fit));
            }
            Err(e) => {
                log::warn!("full-data fit failed at alpha = {a}: {e}");
                out.push(None);
            }
        }
    }
    Ok(out)
}

fn alpha_folds(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    problem: &AlphaProblem,
    start: &CoefficientMatrix,
    opts: &LmOptions,
    fold: usize,
) -> f64 {
    let keep = retained(y.n(), fold);
    let sub = problem.select_rows(&keep);
    match solve_problem(&sub, opts, Some(start), None) {
        Ok((b, _)) => fold_kld(&y.row(fold), &predict_row(&x.row(fold), &b, y.parts())),
        Err(_) => f64::INFINITY,
    }
}

/// Leave-one-out CV over α for the plain α-regression.
pub fn loocv_alpha(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    grid: &CvGrid,
    opts: &LmOptions,
) -> Result<CvResult> {
    loocv_alpha_with(y, x, grid, opts, true)
}

/// Serial or parallel evaluation of [`loocv_alpha`].
pub fn loocv_alpha_with(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    grid: &CvGrid,
    opts: &LmOptions,
    parallel: bool,
) -> Result<CvResult> {
    check_n(y, x)?;
    check_grid(&grid.alphas, "alpha")?;
    let path = fit_path(y, x, &grid.alphas, opts)?;
    let mut points = Vec::with_capacity(grid.alphas.len());
    for (&a, full) in grid.alphas.iter().zip(&path) {
        let folds = match full {
            Some(full) => {
                let problem = AlphaProblem::new(y, x, full.alpha)?;
                let run = |i: usize| alpha_folds(y, x, &problem, &full.coefficients, opts, i);
                if parallel {
                    map_indexed(y.n(), run)
                } else {
                    (0..y.n()).map(run).collect()
                }
            }
            None => vec![f64::INFINITY; y.n()],
        };
        points.push(CvPoint { alpha: a, k: None, h: None, score: sum_folds(&folds), folds });
    }
    CvResult::from_points(points)
}

/// Leave-one-out CV over `(α, k)` for the α-SLX model. The contiguity
/// matrix is rebuilt on the retained locations of every fold, with `k`
/// capped at the number of retained neighbours.
pub fn loocv_slx(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    coords: &GeoCoordinates,
    grid: &CvGrid,
    opts: &LmOptions,
) -> Result<CvResult> {
    check_n(y, x)?;
    check_grid(&grid.alphas, "alpha")?;
    if grid.ks.is_empty() {
        return Err(Error::InvalidOptions("k grid is empty".into()));
    }
    let n = y.n();
    for &k in &grid.ks {
        if k == 0 || k > n - 1 {
            return Err(Error::InvalidK { k, n });
        }
    }
    let mut points = Vec::new();
    for &a in &grid.alphas {
        let alpha = Alpha::new(a)?;
        alpha.check_for(y)?;
        for &k in &grid.ks {
            let w = contiguity_matrix(coords, k)?;
            let full = match fit_alpha_slx(y, x, &w, alpha, opts) {
                Ok(f) => f,
                Err(e) => {
                    log::warn!("full-data SLX fit failed at alpha = {a}, k = {k}: {e}");
                    points.push(CvPoint {
                        alpha: a,
                        k: Some(k),
                        h: None,
                        score: f64::INFINITY,
                        folds: vec![f64::INFINITY; n],
                    });
                    continue;
                }
            };
            let folds = map_indexed(n, |i| {
                slx_fold(y, x, coords, alpha, k, &full.fit.coefficients, opts, i)
                    .unwrap_or(f64::INFINITY)
            });
            points.push(CvPoint { alpha: a, k: Some(k), h: None, score: sum_folds(&folds), folds });
        }
    }
    CvResult::from_points(points)
}

#[allow(clippy::too_many_arguments)]
fn slx_fold(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    coords: &GeoCoordinates,
    alpha: Alpha,
    k: usize,
    start: &CoefficientMatrix,
    opts: &LmOptions,
    fold: usize,
) -> Result<f64> {
    let keep = retained(y.n(), fold);
    let (y_r, x_r, c_r) = (y.select_rows(&keep), x.select_rows(&keep), coords.select(&keep));
    let k_r = k.min(keep.len() - 1);
    let w = contiguity_matrix(&c_r, k_r)?;
    let design = x_r.augment(&spatial_lag(&w, &x_r)?)?;
    let problem = AlphaProblem::new(&y_r, &design, alpha)?;
    let (b, _) = solve_problem(&problem, opts, Some(start), None)?;
    let mut row = x.row(fold);
    row.extend(lag_at_point(&coords.cartesian(fold), &c_r, &x_r, k_r));
    Ok(fold_kld(&y.row(fold), &predict_row(&row, &b, y.parts())))
}

/// Leave-one-out CV over `(α, h)` for GWαR. Each fold fits the local model
/// at the held-out location from the other observations. Bandwidths are
/// visited from largest to smallest, each warm-started from the previous
/// one's solution.
pub fn loocv_gwar(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    coords: &GeoCoordinates,
    grid: &CvGrid,
    opts: &LmOptions,
) -> Result<CvResult> {
    check_n(y, x)?;
    check_grid(&grid.alphas, "alpha")?;
    check_grid(&grid.hs, "bandwidth")?;
    if let Some(&h) = grid.hs.iter().find(|&&h| !(h > 0.0) || !h.is_finite()) {
        return Err(Error::NonpositiveBandwidth(h));
    }
    let n = y.n();
    let mut order: Vec<usize> = (0..grid.hs.len()).collect();
    order.sort_by(|&a, &b| grid.hs[b].total_cmp(&grid.hs[a]).then(a.cmp(&b)));
    let path = fit_path(y, x, &grid.alphas, opts)?;
    let mut points = Vec::new();
    for (&a, full) in grid.alphas.iter().zip(&path) {
        // folds[i][g]: fold i at bandwidth grid.hs[g].
        let folds: Vec<Vec<f64>> = match full {
            Some(full) => {
                let problem = AlphaProblem::new(y, x, full.alpha)?;
                map_indexed(n, |i| {
                    gwar_fold(y, x, coords, &problem, &grid.hs, &order, &full.coefficients, opts, i)
                })
            }
            None => vec![vec![f64::INFINITY; grid.hs.len()]; n],
        };
        for (g, &h) in grid.hs.iter().enumerate() {
            let per: Vec<f64> = folds.iter().map(|f| f[g]).collect();
            points.push(CvPoint { alpha: a, k: None, h: Some(h), score: sum_folds(&per), folds: per });
        }
    }
    CvResult::from_points(points)
}

#[allow(clippy::too_many_arguments)]
fn gwar_fold(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    coords: &GeoCoordinates,
    problem: &AlphaProblem,
    hs: &[f64],
    order: &[usize],
    global: &CoefficientMatrix,
    opts: &LmOptions,
    fold: usize,
) -> Vec<f64> {
    let keep = retained(y.n(), fold);
    let sub = problem.select_rows(&keep);
    let c_r = coords.select(&keep);
    let point = coords.cartesian(fold);
    let mut out = vec![f64::INFINITY; hs.len()];
    let mut start = global.clone();
    for &g in order {
        match local_fit(&sub, &c_r, &point, hs[g], opts, &start, None, fold) {
            Ok(b) => {
                out[g] = fold_kld(&y.row(fold), &predict_row(&x.row(fold), &b, y.parts()));
                start = b;
            }
            Err(e) => log::debug!("fold {fold} failed at h = {}: {e}", hs[g]),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn kld_examples() {
        let y = CompositionMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mu = CompositionMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(kld(&y, &mu).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(kld(&mu, &mu).unwrap(), 0.0);
        let bad = CompositionMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(kld(&mu, &bad), Err(Error::NonpositiveFitted { row: 0, col: 1 })));
        let wide = CompositionMatrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        assert!(matches!(kld(&y, &wide), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn median_examples() {
        let two = GeoCoordinates::new(vec![40.0, 41.0], vec![20.0, 21.0]).unwrap();
        assert_abs_diff_eq!(
            median_heuristic_bandwidth(&two).unwrap(),
            two.distance_sq(0, 1).sqrt(),
            epsilon = 1e-15
        );
        let same = GeoCoordinates::new(vec![40.0; 4], vec![20.0; 4]).unwrap();
        assert!(matches!(median_heuristic_bandwidth(&same), Err(Error::AllCoincident)));
        assert!(matches!(default_h_grid(&same), Err(Error::AllCoincident)));
    }

    #[test]
    fn h_grid_shape() {
        let coords =
            GeoCoordinates::new(vec![40.0, 41.0, 39.5, 38.0], vec![20.0, 21.0, 22.5, 23.0]).unwrap();
        let median = median_heuristic_bandwidth(&coords).unwrap();
        let grid = default_h_grid(&coords).unwrap();
        assert_eq!(grid.len(), 10);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert_abs_diff_eq!(grid[0], median / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grid[9], 4.0 * median, epsilon = 1e-12);
        assert!(grid[0] < median && median < grid[9]);
    }

    #[test]
    fn argmin_tie_break() {
        let p = |alpha, score| CvPoint { alpha, k: None, h: None, score, folds: vec![] };
        let r = CvResult::from_points(vec![p(0.5, 1.0), p(0.25, 1.0), p(1.0, 2.0)]).unwrap();
        assert_eq!(r.best.alpha, 0.25);
        let r = CvResult::from_points(vec![p(0.5, f64::INFINITY), p(1.0, 3.0)]).unwrap();
        assert_eq!(r.best.alpha, 1.0);
        assert!(CvResult::from_points(vec![p(0.5, f64::INFINITY)]).is_err());
    }

    fn composition(parts: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, parts).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kld_nonnegative(rows in prop::collection::vec((composition(4), composition(4)), 1..20)) {
            let (a, b): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let y = CompositionMatrix::from_rows(&a).unwrap();
            let mu = CompositionMatrix::from_rows(&b).unwrap();
            prop_assert!(kld(&y, &mu).unwrap() >= -1e-15);
        }

        #[test]
        fn median_matches_brute_force(lat in prop::collection::vec(35.0f64..45.0, 2..15), seed in 0u64..100) {
            let lon: Vec<f64> = lat.iter().enumerate().map(|(i, _)| 20.0 + ((seed + i as u64 * 7) % 11) as f64 * 0.4).collect();
            let coords = GeoCoordinates::new(lat, lon).unwrap();
            let mut all = Vec::new();
            for i in 0..coords.len() {
                for j in 0..coords.len() {
                    if i < j {
                        let ci = coords.cartesian(i);
                        let cj = coords.cartesian(j);
                        all.push((0..3).map(|t| (ci[t] - cj[t]).powi(2)).sum::<f64>().sqrt());
                    }
                }
            }
            all.sort_by(f64::total_cmp);
            let m = all.len();
            let oracle = if m % 2 == 1 { all[m / 2] } else { (all[m / 2 - 1] + all[m / 2]) / 2.0 };
            prop_assert!((median_heuristic_bandwidth(&coords).unwrap() - oracle).abs() < 1e-12);
        }
    }
}
