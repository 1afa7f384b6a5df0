//! Synthetic datasets with known coefficients.
//!
//! Responses are the multinomial-logit means, optionally perturbed by
//! Gaussian noise in α-transformed space and mapped back to the simplex.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fitted_mean, CoefficientMatrix, DesignMatrix};
use crate::simplex::{alpha_row, helmert_submatrix, inverse_row, CompositionMatrix};
use crate::spatial::{contiguity_matrix, spatial_lag, GeoCoordinates};

use super::DatasetSpec;

const MAX_NOISE_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SpatialMode {
    /// Coordinates are drawn but play no role in the means.
    None,
    /// Means include spatially lagged covariates through `k`-NN weights.
    Slx { k: usize },
    /// Two spatial clusters; the first covariate's coefficients flip sign
    /// in the second cluster.
    TwoCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub parts: usize,
    pub covariates: usize,
    pub alpha: f64,
    pub noise_scale: f64,
    pub spatial: SpatialMode,
    pub seed: u64,
}

/// Generator settings and true parameters, written beside the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    /// Rows are design columns (intercept first), columns are components 2..D.
    pub beta: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flipped_covariate: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub y: CompositionMatrix,
    pub x: DesignMatrix,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    /// Noise-free means.
    pub mu: CompositionMatrix,
    pub truth: GroundTruth,
}

impl SyntheticData {
    pub fn beta(&self) -> CoefficientMatrix {
        matrix_from_rows(&self.truth.beta)
    }

    pub fn gamma(&self) -> Option<CoefficientMatrix> {
        self.truth.gamma.as_deref().map(matrix_from_rows)
    }

    pub fn coords(&self) -> GeoCoordinates {
        GeoCoordinates::new(self.lat.clone(), self.lon.clone()).expect("generated in range")
    }

    /// Writes `<stem>.csv` and `<stem>.truth.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf, DatasetSpec)> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let truth_path = dir.join(format!("{stem}.truth.json"));
        let comp: Vec<String> = (1..=self.y.parts()).map(|j| format!("y{j}")).collect();
        let cov: Vec<String> = (1..=self.x.covariates()).map(|j| format!("x{j}")).collect();
        let mut w = csv::Writer::from_path(&csv_path)?;
        let header: Vec<&str> = comp
            .iter()
            .chain(&cov)
            .map(String::as_str)
            .chain(["lat", "lon"])
            .collect();
        w.write_record(&header)?;
        for i in 0..self.y.n() {
            let record: Vec<String> = self
                .y
                .row(i)
                .into_iter()
                .chain(self.x.row(i).into_iter().skip(1))
                .chain([self.lat[i], self.lon[i]])
                .map(|v| v.to_string())
                .collect();
            w.write_record(&record)?;
        }
        w.flush()?;
        std::fs::write(&truth_path, serde_json::to_string_pretty(&self.truth)? + "\n")?;
        let spec = DatasetSpec {
            path: csv_path.clone(),
            composition_columns: comp,
            covariate_columns: cov,
            lat_column: Some("lat".into()),
            lon_column: Some("lon".into()),
        };
        Ok((csv_path, truth_path, spec))
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> CoefficientMatrix {
    let cols = rows.first().map_or(0, Vec::len);
    CoefficientMatrix::new(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
        .expect("finite generated coefficients")
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn check(spec: &SyntheticSpec) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidParameters(msg));
    if spec.n < 10 {
        return bad(format!("n = {} (need at least 10)", spec.n));
    }
    if spec.parts < 2 {
        return bad(format!("D = {} (need at least 2)", spec.parts));
    }
    if spec.covariates < 1 {
        return bad("need at least one covariate".into());
    }
    if !(-1.0..=1.0).contains(&spec.alpha) {
        return bad(format!("alpha = {} outside [-1, 1]", spec.alpha));
    }
    if !(spec.noise_scale >= 0.0) || !spec.noise_scale.is_finite() {
        return bad(format!("noise scale {}", spec.noise_scale));
    }
    if let SpatialMode::Slx { k } = spec.spatial {
        if k == 0 || k >= spec.n {
            return bad(format!("k = {k} for n = {}", spec.n));
        }
    }
    Ok(())
}

/// Draws a dataset. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    check(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, p, d) = (spec.n, spec.covariates, spec.parts - 1);

    let mut beta = DMatrix::zeros(p + 1, d);
    for j in 0..d {
        beta[(0, j)] = rng.random_range(-0.5..0.5);
        for c in 1..=p {
            beta[(c, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let cluster: Option<Vec<u8>> = match spec.spatial {
        SpatialMode::TwoCluster => {
            for j in 0..d {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                beta[(1, j)] = sign * rng.random_range(1.0..1.5);
            }
            Some((0..n).map(|_| rng.random_range(0..2u8)).collect())
        }
        _ => None,
    };
    let (lat, lon): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| match &cluster {
            Some(c) => {
                let (clat, clon) = if c[i] == 0 { (37.0, 21.5) } else { (41.0, 25.5) };
                (clat + rng.random_range(-1.0..1.0), clon + rng.random_range(-1.0..1.0))
            }
            None => (rng.random_range(35.0..42.0), rng.random_range(20.0..27.0)),
        })
        .unzip();
    let covariates = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let x = DesignMatrix::with_intercept(&covariates)?;
    let coords = GeoCoordinates::new(lat.clone(), lon.clone())?;

    let mut gamma = None;
    let mu = match (spec.spatial, &cluster) {
        (SpatialMode::Slx { k }, _) => {
            let mut g = DMatrix::zeros(p + 1, d);
            for j in 0..d {
                for c in 1..=p {
                    g[(c, j)] = rng.random_range(-0.5..0.5);
                }
            }
            let w = contiguity_matrix(&coords, k)?;
            let aug = x.augment(&spatial_lag(&w, &x)?)?;
            let mut stacked = DMatrix::zeros(2 * p + 1, d);
            stacked.rows_mut(0, p + 1).copy_from(&beta);
            stacked.rows_mut(p + 1, p).copy_from(&g.rows(1, p));
            gamma = Some(g);
            fitted_mean(&aug, &CoefficientMatrix::new(stacked)?)?
        }
        (_, Some(c)) => {
            let mut flipped = beta.clone();
            flipped.row_mut(1).neg_mut();
            let b0 = CoefficientMatrix::new(beta.clone())?;
            let b1 = CoefficientMatrix::new(flipped)?;
            let mut out = DMatrix::zeros(n, d + 1);
            for (i, &ci) in c.iter().enumerate() {
                let b = if ci == 0 { &b0 } else { &b1 };
                let row = fitted_mean(&x.select_rows(&[i]), b)?;
                out.row_mut(i).copy_from(&row.as_matrix().row(0));
            }
            CompositionMatrix::new(out)?
        }
        _ => fitted_mean(&x, &CoefficientMatrix::new(beta.clone())?)?,
    };

    let y = if spec.noise_scale == 0.0 {
        mu.clone()
    } else {
        perturb(&mu, spec.alpha, spec.noise_scale, &mut rng)?
    };
    let truth = GroundTruth {
        spec: spec.clone(),
        beta: rows_of(&beta),
        gamma: gamma.as_ref().map(rows_of),
        flipped_covariate: cluster.as_ref().map(|_| 1),
        cluster,
    };
    Ok(SyntheticData { y, x, lat, lon, mu, truth })
}

fn perturb(
    mu: &CompositionMatrix,
    alpha: f64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CompositionMatrix> {
    let parts = mu.parts();
    let d = parts - 1;
    let h = helmert_submatrix(parts)?;
    let mut z = vec![0.0; d];
    let mut noisy = vec![0.0; d];
    let mut out = DMatrix::zeros(mu.n(), parts);
    let mut row = vec![0.0; parts];
    for i in 0..mu.n() {
        alpha_row(&mu.row(i), alpha, &h, &mut z);
        let mut draws = 0;
        loop {
            for (nz, &zz) in noisy.iter_mut().zip(&z) {
                let e: f64 = StandardNormal.sample(rng);
                *nz = zz + scale * e;
            }
            if inverse_row(&noisy, alpha, &h, &mut row).is_some() {
                break;
            }
            draws += 1;
            if draws >= MAX_NOISE_DRAWS {
                return Err(Error::InvalidParameters(format!(
                    "noise scale {scale} keeps row {i} outside the simplex image"
                )));
            }
        }
        out.row_mut(i).copy_from_slice(&row);
    }
    CompositionMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spatial: SpatialMode, noise: f64) -> SyntheticSpec {
        SyntheticSpec { n: 40, parts: 3, covariates: 2, alpha: 0.5, noise_scale: noise, spatial, seed: 9 }
    }

    #[test]
    fn noiseless_is_the_mean() {
        let d = generate_synthetic(&spec(SpatialMode::None, 0.0)).unwrap();
        assert_eq!(d.y, d.mu);
        let again = fitted_mean(&d.x, &d.beta()).unwrap();
        assert_eq!(again, d.mu);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&spec(SpatialMode::Slx { k: 4 }, 0.1)).unwrap();
        let b = generate_synthetic(&spec(SpatialMode::Slx { k: 4 }, 0.1)).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.truth, b.truth);
        assert!(a.truth.gamma.is_some());
    }

    #[test]
    fn two_cluster_records_assignment() {
        let d = generate_synthetic(&spec(SpatialMode::TwoCluster, 0.05)).unwrap();
        let c = d.truth.cluster.as_ref().unwrap();
        assert_eq!(c.len(), 40);
        assert!(c.contains(&0) && c.contains(&1));
        assert_eq!(d.truth.flipped_covariate, Some(1));
    }

    #[test]
    fn invalid_parameters() {
        let mut s = spec(SpatialMode::None, 0.1);
        s.n = 5;
        assert!(matches!(generate_synthetic(&s), Err(Error::InvalidParameters(_))));
        let mut s = spec(SpatialMode::None, 0.1);
        s.parts = 1;
        assert!(matches!(generate_synthetic(&s), Err(Error::InvalidParameters(_))));
    }
}
