//! Geographic machinery and the two spatial models.
//!
//! Locations are embedded on the unit sphere as
//! `c = (cos ν, sin ν·cos v, sin ν·sin v)` with `ν` the latitude and `v` the
//! longitude in radians, and compared through the squared chordal distance
//! `‖c_i − c_j‖² = 2(1 − c_iᵀc_j)`. Longitudes therefore wrap around
//! correctly: 179° and −179° are as close as 1° and −1°.

pub(crate) mod gwar;
mod slx;

pub use gwar::{fit_gwar, predict_gwar, GwarFit};
pub use slx::{fit_alpha_slx, SlxFit};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::DesignMatrix;

/// Inverse squared distances of coincident neighbours are capped at `1/ε`.
pub const COINCIDENT_EPS: f64 = 1e-12;

/// Latitude/longitude in degrees with cached unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoCoordinates {
    lat: Vec<f64>,
    lon: Vec<f64>,
    cart: Vec<[f64; 3]>,
}

impl GeoCoordinates {
    pub fn new(lat: Vec<f64>, lon: Vec<f64>) -> Result<Self> {
        if lat.len() != lon.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} latitudes, {} longitudes",
                lat.len(),
                lon.len()
            )));
        }
        let cart = lat
            .iter()
            .zip(&lon)
            .map(|(&a, &o)| to_cartesian(a, o))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lat, lon, cart })
    }

    pub fn len(&self) -> usize {
        self.lat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lat.is_empty()
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }

    pub fn cartesian(&self, i: usize) -> [f64; 3] {
        self.cart[i]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            lat: rows.iter().map(|&i| self.lat[i]).collect(),
            lon: rows.iter().map(|&i| self.lon[i]).collect(),
            cart: rows.iter().map(|&i| self.cart[i]).collect(),
        }
    }

    /// Squared chordal distance between locations `i` and `j`.
    pub fn distance_sq(&self, i: usize, j: usize) -> f64 {
        chordal_distance_sq(&self.cart[i], &self.cart[j])
    }
}

pub fn to_cartesian(lat: f64, lon: f64) -> Result<[f64; 3]> {
    if !(-90.0..=90.0).contains(&lat) || !(lon > -180.0 && lon <= 180.0) {
        return Err(Error::OutOfRangeCoordinate { lat, lon });
    }
    let (nu, v) = (lat.to_radians(), lon.to_radians());
    Ok([nu.cos(), nu.sin() * v.cos(), nu.sin() * v.sin()])
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `2(1 − c_iᵀc_j)`, evaluated as `‖c_i − c_j‖²` to avoid cancellation
/// between nearby points; exactly zero for identical points.
pub fn chordal_distance_sq(ci: &[f64; 3], cj: &[f64; 3]) -> f64 {
    let d = [ci[0] - cj[0], ci[1] - cj[1], ci[2] - cj[2]];
    dot(&d, &d)
}

/// Row-standardized k-nearest-neighbour weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeightMatrix {
    values: DMatrix<f64>,
    k: usize,
}

impl SpatialWeightMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Indices of the `k` nearest candidates to `point` with their inverse
/// squared distances. Ties keep the lower index.
pub(crate) fn nearest_inverse_sq(
    point: &[f64; 3],
    candidates: impl Iterator<Item = (usize, [f64; 3])>,
    k: usize,
) -> Vec<(usize, f64)> {
    let mut dists: Vec<(f64, usize)> =
        candidates.map(|(j, c)| (chordal_distance_sq(point, &c), j)).collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists
        .into_iter()
        .take(k)
        .map(|(d2, j)| (j, 1.0 / d2.max(COINCIDENT_EPS)))
        .collect()
}

/// `w̃_ij = 1/d_ij²` for the `k` nearest neighbours of each location, zero
/// elsewhere, then each row divided by its sum.
pub fn contiguity_matrix(coords: &GeoCoordinates, k: usize) -> Result<SpatialWeightMatrix> {
    let n = coords.len();
    if n < 2 || k == 0 || k > n - 1 {
        return Err(Error::InvalidK { k, n });
    }
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        let others = (0..n).filter(|&j| j != i).map(|j| (j, coords.cart[j]));
        let neighbours = nearest_inverse_sq(&coords.cart[i], others, k);
        let total: f64 = neighbours.iter().map(|(_, w)| w).sum();
        for (j, w) in neighbours {
            values[(i, j)] = w / total;
        }
    }
    Ok(SpatialWeightMatrix { values, k })
}

/// Kernel weights around one focal location.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

/// `exp(−d²/(2h²)) = exp((c_iᵀc_j − 1)/h²)` for every location `j`. The
/// first form is evaluated, with `d²` from [`chordal_distance_sq`], so the
/// focal weight is exactly 1 and small bandwidths keep full precision.
pub fn gaussian_kernel_weights(
    coords: &GeoCoordinates,
    focal: usize,
    h: f64,
) -> Result<KernelWeights> {
    let point = *coords.cart.get(focal).ok_or_else(|| {
        Error::InvalidParameters(format!("focal index {focal} for {} locations", coords.len()))
    })?;
    let values = kernel_from_point(&point, coords.cart.iter().copied(), h)?;
    Ok(KernelWeights { values, bandwidth: h })
}

pub(crate) fn kernel_from_point(
    point: &[f64; 3],
    others: impl Iterator<Item = [f64; 3]>,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::NonpositiveBandwidth(h));
    }
    let two_h2 = 2.0 * h * h;
    Ok(others.map(|c| (-chordal_distance_sq(point, &c) / two_h2).exp()).collect())
}

/// `W·X` over the covariate columns; the intercept is never lagged.
pub fn spatial_lag(w: &SpatialWeightMatrix, x: &DesignMatrix) -> Result<DMatrix<f64>> {
    if w.values.nrows() != x.n() {
        return Err(Error::DimensionMismatch(format!(
            "weights are {}x{}, design has {} rows",
            w.values.nrows(),
            w.values.ncols(),
            x.n()
        )));
    }
    let covariates = x.as_matrix().columns(1, x.covariates());
    Ok(&w.values * covariates)
}

/// Spatial lag of a location outside the training set: the inverse
/// squared-distance average of its `k` nearest training covariates.
pub(crate) fn lag_at_point(
    point: &[f64; 3],
    coords: &GeoCoordinates,
    x: &DesignMatrix,
    k: usize,
) -> Vec<f64> {
    let neighbours = nearest_inverse_sq(point, (0..coords.len()).map(|j| (j, coords.cart[j])), k);
    let total: f64 = neighbours.iter().map(|(_, w)| w).sum();
    (1..x.ncols())
        .map(|c| neighbours.iter().map(|&(j, w)| w * x.as_matrix()[(j, c)]).sum::<f64>() / total)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cartesian_examples() {
        let c = to_cartesian(0.0, 0.0).unwrap();
        assert_eq!(c, [1.0, 0.0, 0.0]);
        let c = to_cartesian(90.0, 0.0).unwrap();
        assert_abs_diff_eq!(c[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c[2], 0.0, epsilon = 1e-15);
        assert!(matches!(to_cartesian(91.0, 0.0), Err(Error::OutOfRangeCoordinate { .. })));
        assert!(matches!(to_cartesian(0.0, -180.0), Err(Error::OutOfRangeCoordinate { .. })));
    }

    #[test]
    fn chordal_examples() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        assert_eq!(chordal_distance_sq(&a, &a), 0.0);
        assert_abs_diff_eq!(chordal_distance_sq(&a, &b), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn wraparound() {
        for lat in [0.0, 40.0, -25.0] {
            let far = chordal_distance_sq(
                &to_cartesian(lat, 179.0).unwrap(),
                &to_cartesian(lat, -179.0).unwrap(),
            );
            let near = chordal_distance_sq(
                &to_cartesian(lat, 1.0).unwrap(),
                &to_cartesian(lat, -1.0).unwrap(),
            );
            assert_abs_diff_eq!(far, near, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_point_contiguity() {
        let coords = GeoCoordinates::new(vec![40.0, 41.0], vec![20.0, 21.0]).unwrap();
        let w = contiguity_matrix(&coords, 1).unwrap();
        assert_eq!(w.as_matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert!(matches!(contiguity_matrix(&coords, 2), Err(Error::InvalidK { .. })));
        assert!(matches!(contiguity_matrix(&coords, 0), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn collinear_nearest_neighbour() {
        // Points along one meridian at 30°, 31°, 33°: the middle point is
        // closer to the 30° endpoint.
        let coords = GeoCoordinates::new(vec![30.0, 31.0, 33.0], vec![10.0; 3]).unwrap();
        let w = contiguity_matrix(&coords, 1).unwrap();
        assert_eq!(w.as_matrix()[(1, 0)], 1.0);
        assert_eq!(w.as_matrix()[(1, 2)], 0.0);
    }

    #[test]
    fn coincident_points_are_capped() {
        let coords = GeoCoordinates::new(vec![40.0, 40.0, 41.0], vec![20.0, 20.0, 21.0]).unwrap();
        let w = contiguity_matrix(&coords, 2).unwrap();
        let row = w.as_matrix().row(0);
        assert!(row[1] > 0.999);
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_examples() {
        let coords = GeoCoordinates::new(vec![40.0, 40.5, 39.0], vec![22.0, 22.3, 21.0]).unwrap();
        let k = gaussian_kernel_weights(&coords, 1, 0.01).unwrap();
        assert_eq!(k.values[1], 1.0);
        let flat = gaussian_kernel_weights(&coords, 0, 1e6).unwrap();
        for w in flat.values {
            assert_abs_diff_eq!(w, 1.0, epsilon = 1e-9);
        }
        assert!(matches!(
            gaussian_kernel_weights(&coords, 0, 0.0),
            Err(Error::NonpositiveBandwidth(_))
        ));
        assert!(matches!(
            gaussian_kernel_weights(&coords, 3, 1.0),
            Err(Error::InvalidParameters(_))
        ));
    }

    #[test]
    fn lag_examples() {
        let coords = GeoCoordinates::new(vec![40.0, 40.1, 39.9], vec![20.0, 20.0, 20.0]).unwrap();
        let w = contiguity_matrix(&coords, 2).unwrap();
        let cov = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 3.0, 5.0, 7.0, 5.0]);
        let x = DesignMatrix::with_intercept(&cov).unwrap();
        let lag = spatial_lag(&w, &x).unwrap();
        // Row 0 has two equidistant neighbours: plain mean.
        assert_abs_diff_eq!(lag[(0, 0)], 5.0, epsilon = 1e-9);
        for i in 0..3 {
            assert_abs_diff_eq!(lag[(i, 1)], 5.0, epsilon = 1e-12);
        }
    }

    fn coords_strategy(n: usize) -> impl Strategy<Value = GeoCoordinates> {
        (
            prop::collection::vec(35.0f64..42.0, n),
            prop::collection::vec(19.0f64..26.0, n),
        )
            .prop_map(|(lat, lon)| GeoCoordinates::new(lat, lon).unwrap())
    }

    proptest! {
        #[test]
        fn contiguity_invariants(coords in (3usize..25).prop_flat_map(coords_strategy), kf in 0.0f64..1.0) {
            let n = coords.len();
            let k = 1 + ((n - 2) as f64 * kf) as usize;
            let w = contiguity_matrix(&coords, k).unwrap();
            for i in 0..n {
                let row = w.as_matrix().row(i);
                prop_assert_eq!(row[i], 0.0);
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), k);
            }
        }

        #[test]
        fn unit_norm(lat in -90.0f64..=90.0, lon in -179.999f64..=180.0) {
            let c = to_cartesian(lat, lon).unwrap();
            prop_assert!((dot(&c, &c) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn chordal_matches_norm(a in (-90.0f64..=90.0, -179.9f64..180.0), b in (-90.0f64..=90.0, -179.9f64..180.0)) {
            let ca = to_cartesian(a.0, a.1).unwrap();
            let cb = to_cartesian(b.0, b.1).unwrap();
            let direct: f64 = (0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum();
            prop_assert!((chordal_distance_sq(&ca, &cb) - direct).abs() < 1e-12);
            prop_assert_eq!(chordal_distance_sq(&ca, &cb), chordal_distance_sq(&cb, &ca));
        }

        #[test]
        fn kernel_forms_agree(a in (30.0f64..45.0, 15.0f64..30.0), b in (30.0f64..45.0, 15.0f64..30.0), h in 0.2f64..5.0) {
            let ca = to_cartesian(a.0, a.1).unwrap();
            let cb = to_cartesian(b.0, b.1).unwrap();
            let simplified = ((dot(&ca, &cb) - 1.0) / (h * h)).exp();
            let kernel = kernel_from_point(&ca, std::iter::once(cb), h).unwrap()[0];
            prop_assert!((kernel - simplified).abs() < 1e-14);
        }

        #[test]
        fn lag_permutation_equivariance(coords in coords_strategy(8), cov in prop::collection::vec(-3.0f64..3.0, 8), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let w = contiguity_matrix(&coords, 3).unwrap();
            let x = DesignMatrix::with_intercept(&DMatrix::from_column_slice(8, 1, &cov)).unwrap();
            let lag = spatial_lag(&w, &x).unwrap();
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let wp = SpatialWeightMatrix {
                values: DMatrix::from_fn(8, 8, |i, j| w.as_matrix()[(perm[i], perm[j])]),
                k: 3,
            };
            let xp = x.select_rows(&perm);
            let lagp = spatial_lag(&wp, &xp).unwrap();
            for i in 0..8 {
                prop_assert!((lagp[(i, 0)] - lag[(perm[i], 0)]).abs() < 1e-12);
            }
        }
    }
}
