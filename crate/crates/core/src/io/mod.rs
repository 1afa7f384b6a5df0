//! Dataset ingestion, run orchestration and synthetic data.

mod run;
mod synthetic;

pub use run::{
    margins_from_document, predict_from_document, run_cv, run_fit, AmeEntry, DocumentMargins,
    ModelKind, ResultDocument, RunConfig, SeKind, SlxAmeEntry,
};
pub use synthetic::{generate_synthetic, GroundTruth, SpatialMode, SyntheticData, SyntheticSpec};

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DesignMatrix;
use crate::simplex::CompositionMatrix;
use crate::spatial::GeoCoordinates;

/// Raw row sums further than this from 1 are reported when closing.
pub const CLOSURE_WARN_TOL: f64 = 1e-6;

/// Which columns of a CSV file hold what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub composition_columns: Vec<String>,
    pub covariate_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon_column: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: CompositionMatrix,
    pub x: DesignMatrix,
    pub coords: Option<GeoCoordinates>,
    pub composition_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.composition_columns.len() < 2 {
            return Err(Error::InvalidDimension(format!(
                "{} composition columns; need at least 2",
                self.composition_columns.len()
            )));
        }
        self.validate_columns()
    }

    fn validate_columns(&self) -> Result<()> {
        let mut all: Vec<&String> =
            self.composition_columns.iter().chain(&self.covariate_columns).collect();
        all.extend(self.lat_column.iter().chain(&self.lon_column));
        let mut seen = std::collections::HashSet::new();
        for c in all {
            if !seen.insert(c) {
                return Err(Error::InvalidOptions(format!("column `{c}` is listed twice")));
            }
        }
        if self.lat_column.is_some() != self.lon_column.is_some() {
            return Err(Error::InvalidOptions("lat and lon columns must be given together".into()));
        }
        Ok(())
    }
}

/// Reads the named columns of a headered CSV file. Returns the values of
/// each group of columns row-major, and the number of rows.
fn read_columns(path: &Path, groups: &[&[String]]) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx = groups
        .iter()
        .map(|g| g.iter().map(|c| index(c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![Vec::new(); groups.len()];
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (cols, out) in idx.iter().zip(values.iter_mut()) {
            for &i in cols {
                let raw = record.get(i).unwrap_or("").trim();
                let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::NonNumericCell {
                        row,
                        column: headers.get(i).unwrap_or("").to_string(),
                        value: raw.to_string(),
                    }
                })?;
                out.push(v);
            }
        }
        rows += 1;
    }
    Ok((values, rows))
}

fn geo_columns(lat: &Option<String>, lon: &Option<String>) -> Vec<String> {
    lat.iter().chain(lon).cloned().collect()
}

fn coords_from(geo: &[f64], rows: usize) -> Result<Option<GeoCoordinates>> {
    if geo.is_empty() {
        return Ok(None);
    }
    let lat = (0..rows).map(|i| geo[2 * i]).collect();
    let lon = (0..rows).map(|i| geo[2 * i + 1]).collect();
    GeoCoordinates::new(lat, lon).map(Some)
}

/// Reads a headered CSV file. Compositions are closed, with a warning when
/// the raw sums are not already 1 (percentages are recognised as such).
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let geo = geo_columns(&spec.lat_column, &spec.lon_column);
    let (values, n) = read_columns(
        &spec.path,
        &[&spec.composition_columns, &spec.covariate_columns, &geo],
    )?;
    let raw = DMatrix::from_row_slice(n, spec.composition_columns.len(), &values[0]);
    let y = close_with_warning(raw)?;
    let cov = DMatrix::from_row_slice(n, spec.covariate_columns.len(), &values[1]);
    let x = DesignMatrix::with_intercept(&cov)?;
    Ok(Dataset {
        y,
        x,
        coords: coords_from(&values[2], n)?,
        composition_names: spec.composition_columns.clone(),
        covariate_names: spec.covariate_columns.clone(),
    })
}

/// Reads only the covariates (and coordinates, when named) of a CSV file,
/// for prediction at new rows.
pub fn load_covariates(spec: &DatasetSpec) -> Result<(DesignMatrix, Option<GeoCoordinates>)> {
    spec.validate_columns()?;
    let geo = geo_columns(&spec.lat_column, &spec.lon_column);
    let (values, n) = read_columns(&spec.path, &[&spec.covariate_columns, &geo])?;
    let cov = DMatrix::from_row_slice(n, spec.covariate_columns.len(), &values[0]);
    Ok((DesignMatrix::with_intercept(&cov)?, coords_from(&values[1], n)?))
}

fn close_with_warning(raw: DMatrix<f64>) -> Result<CompositionMatrix> {
    let sums: Vec<f64> = raw.row_iter().map(|r| r.sum()).collect();
    let off = sums.iter().filter(|s| (*s - 1.0).abs() > CLOSURE_WARN_TOL).count();
    if off == 0 {
        return CompositionMatrix::new(raw);
    }
    if sums.iter().all(|s| (s - 100.0).abs() <= 100.0 * CLOSURE_WARN_TOL) {
        warn!("compositions look like percentages; dividing rows by their sums");
    } else {
        warn!("{off} composition rows do not sum to 1; closing them");
    }
    CompositionMatrix::closure(raw)
}

/// Convenience for writing a dataset spec next to data.
pub fn default_spec(path: &Path, parts: usize, covariates: usize, spatial: bool) -> DatasetSpec {
    DatasetSpec {
        path: path.to_path_buf(),
        composition_columns: (1..=parts).map(|j| format!("y{j}")).collect(),
        covariate_columns: (1..=covariates).map(|j| format!("x{j}")).collect(),
        lat_column: spatial.then(|| "lat".into()),
        lon_column: spatial.then(|| "lon".into()),
    }
}
