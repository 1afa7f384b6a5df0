//! Maps between the simplex and Euclidean space.
//!
//! The α-transformation takes a composition `y` to
//! `z = (1/α)(D·u − 1)·Hᵀ`, where `u` is the power-transformed composition
//! `u_i = y_iᵅ / Σ_j y_jᵅ` and `H` is the `d × D` Helmert sub-matrix
//! (`d = D − 1`). At `α = 0` the map is the isometric log-ratio transform.
//! For `α > 0`, zeros are allowed and map to zeros under the power step.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row-sum tolerance at ingestion.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// An `n × D` matrix of compositions: nonnegative rows that sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionMatrix(DMatrix<f64>);

impl CompositionMatrix {
    /// Validates an already-closed matrix. Rows whose sums drift from one by
    /// more than [`ROW_SUM_TOL`] are re-closed with a warning.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        check_shape(&values)?;
        let mut values = values;
        for i in 0..values.nrows() {
            let mut sum = 0.0;
            for j in 0..values.ncols() {
                let v = values[(i, j)];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::NegativeEntry { row: i, col: j, value: v });
                }
                sum += v;
            }
            if sum <= 0.0 {
                return Err(Error::ZeroRow { row: i });
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                warn!("row {i} sums to {sum}; re-closing");
                let mut row = values.row_mut(i);
                row /= sum;
            }
        }
        Ok(Self(values))
    }

    /// Closure: divides each row of a nonnegative matrix by its sum.
    pub fn closure(raw: DMatrix<f64>) -> Result<Self> {
        check_shape(&raw)?;
        let mut values = raw;
        for i in 0..values.nrows() {
            let mut sum = 0.0;
            for j in 0..values.ncols() {
                let v = values[(i, j)];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::NegativeEntry { row: i, col: j, value: v });
                }
                sum += v;
            }
            if sum <= 0.0 {
                return Err(Error::ZeroRow { row: i });
            }
            let mut row = values.row_mut(i);
            row /= sum;
        }
        Ok(Self(values))
    }

    /// Closes a list of raw rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::closure(rows_to_matrix(rows)?)
    }

    /// Wraps rows known to be closed (internal fast path).
    pub(crate) fn from_closed(values: DMatrix<f64>) -> Self {
        debug_assert!(values
            .row_iter()
            .all(|r| (r.sum() - 1.0).abs() < 1e-8));
        Self(values)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Number of components `D`.
    pub fn parts(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn has_zeros(&self) -> bool {
        self.0.iter().any(|&v| v == 0.0)
    }

    /// Keeps the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select_rows(rows))
    }
}

fn check_shape(values: &DMatrix<f64>) -> Result<()> {
    if values.ncols() < 2 {
        return Err(Error::InvalidDimension(format!(
            "a composition needs at least 2 components, got {}",
            values.ncols()
        )));
    }
    if values.nrows() == 0 {
        return Err(Error::InvalidDimension("no observations".into()));
    }
    Ok(())
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// The transformation parameter, restricted to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&alpha) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    /// Zeros in the data require a strictly positive α.
    pub fn check_for(self, y: &CompositionMatrix) -> Result<()> {
        if self.0 <= 0.0 {
            if let Some(row) = first_row_with_zero(y) {
                return Err(if self.0 == 0.0 {
                    Error::ZeroWithLogRatio { row }
                } else {
                    Error::ZeroWithNonpositiveAlpha { alpha: self.0 }
                });
            }
        }
        Ok(())
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

fn first_row_with_zero(y: &CompositionMatrix) -> Option<usize> {
    (0..y.n()).find(|&i| y.0.row(i).iter().any(|&v| v == 0.0))
}

/// The `d × D` Helmert sub-matrix. Row `m` (1-based) holds `m` copies of
/// `1/√(m(m+1))`, then `−m/√(m(m+1))`, then zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct HelmertSubmatrix(DMatrix<f64>);

impl HelmertSubmatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Number of components `D`.
    pub fn parts(&self) -> usize {
        self.0.ncols()
    }

    /// `H·v` for a `D`-vector `v`.
    pub(crate) fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = (0..v.len()).map(|l| self.0[(m, l)] * v[l]).sum();
        }
    }

    /// `Hᵀ·z` for a `d`-vector `z`.
    pub(crate) fn apply_transpose(&self, z: &[f64], out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            *o = (0..z.len()).map(|m| self.0[(m, l)] * z[m]).sum();
        }
    }
}

pub fn helmert_submatrix(parts: usize) -> Result<HelmertSubmatrix> {
    if parts < 2 {
        return Err(Error::InvalidDimension(format!(
            "Helmert sub-matrix needs D >= 2, got {parts}"
        )));
    }
    let d = parts - 1;
    let mut h = DMatrix::zeros(d, parts);
    for m in 1..=d {
        let scale = 1.0 / ((m * (m + 1)) as f64).sqrt();
        for l in 0..m {
            h[(m - 1, l)] = scale;
        }
        h[(m - 1, m)] = -(m as f64) * scale;
    }
    Ok(HelmertSubmatrix(h))
}

/// An `n × d` matrix of transformed compositions.
#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanScores(DMatrix<f64>);

impl EuclideanScores {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }
}

/// `y_iᵅ / Σ_j y_jᵅ` applied row by row.
pub fn power_transform(y: &CompositionMatrix, alpha: Alpha) -> Result<CompositionMatrix> {
    alpha.check_for(y).map_err(|e| match e {
        Error::ZeroWithLogRatio { .. } => Error::ZeroWithNonpositiveAlpha { alpha: 0.0 },
        e => e,
    })?;
    let mut out = y.0.clone();
    let mut buf = vec![0.0; y.parts()];
    for i in 0..y.n() {
        let row: Vec<f64> = y.0.row(i).iter().copied().collect();
        power_row(&row, alpha.value(), &mut buf);
        for (j, &v) in buf.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(CompositionMatrix(out))
}

pub(crate) fn power_row(y: &[f64], alpha: f64, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(y) {
        *o = if v == 0.0 { 0.0 } else { v.powf(alpha) };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-level α-transformation; the caller has already validated α against
/// the row's zeros. `out` has length `d`.
pub(crate) fn alpha_row(y: &[f64], alpha: f64, h: &HelmertSubmatrix, out: &mut [f64]) {
    let parts = y.len();
    let mut buf = vec![0.0; parts];
    if alpha == 0.0 {
        let mean_log = y.iter().map(|v| v.ln()).sum::<f64>() / parts as f64;
        for (b, &v) in buf.iter_mut().zip(y) {
            *b = v.ln() - mean_log;
        }
        h.apply(&buf, out);
    } else {
        power_row(y, alpha, &mut buf);
        // H·1 = 0, so (D·u − 1)Hᵀ/α reduces to (D/α)·H·u.
        h.apply(&buf, out);
        let scale = parts as f64 / alpha;
        for o in out.iter_mut() {
            *o *= scale;
        }
    }
}

/// `(1/α)(D·u − 1)·Hᵀ` row by row; dispatches to [`ilr_transform`] at `α = 0`.
pub fn alpha_transform(y: &CompositionMatrix, alpha: Alpha) -> Result<EuclideanScores> {
    if alpha.is_zero() {
        return ilr_transform(y);
    }
    alpha.check_for(y)?;
    Ok(transform_rows(y, alpha.value()))
}

fn transform_rows(y: &CompositionMatrix, alpha: f64) -> EuclideanScores {
    let h = helmert_submatrix(y.parts()).expect("validated at construction");
    let d = y.parts() - 1;
    let mut out = DMatrix::zeros(y.n(), d);
    let mut buf = vec![0.0; d];
    for i in 0..y.n() {
        let row: Vec<f64> = y.0.row(i).iter().copied().collect();
        alpha_row(&row, alpha, &h, &mut buf);
        for (m, &v) in buf.iter().enumerate() {
            out[(i, m)] = v;
        }
    }
    EuclideanScores(out)
}

/// Isometric log-ratio scores: centred log-ratios post-multiplied by `Hᵀ`.
pub fn ilr_transform(y: &CompositionMatrix) -> Result<EuclideanScores> {
    if let Some(row) = first_row_with_zero(y) {
        return Err(Error::ZeroWithLogRatio { row });
    }
    Ok(transform_rows(y, 0.0))
}

/// Tolerance below zero for a recovered power-composition entry.
const IMAGE_TOL: f64 = 1e-12;

/// Inverse of [`alpha_transform`]: `u = (α·z·H + 1)/D`, then
/// `y_i = u_i^{1/α} / Σ_j u_j^{1/α}`. At `α = 0` the inverse is the softmax
/// of the centred log-ratios `z·H`.
pub fn alpha_transform_inverse(z: &EuclideanScores, alpha: Alpha) -> Result<CompositionMatrix> {
    let d = z.0.ncols();
    let parts = d + 1;
    let h = helmert_submatrix(parts)?;
    let mut out = DMatrix::zeros(z.0.nrows(), parts);
    let mut row = vec![0.0; d];
    let mut buf = vec![0.0; parts];
    for i in 0..z.0.nrows() {
        for (m, r) in row.iter_mut().enumerate() {
            *r = z.0[(i, m)];
        }
        inverse_row(&row, alpha.value(), &h, &mut buf).ok_or(Error::OutOfImage { row: i })?;
        for (j, &v) in buf.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(CompositionMatrix(out))
}

pub(crate) fn inverse_row(
    z: &[f64],
    alpha: f64,
    h: &HelmertSubmatrix,
    out: &mut [f64],
) -> Option<()> {
    let parts = out.len();
    h.apply_transpose(z, out);
    if alpha == 0.0 {
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        return Some(());
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        let u = (alpha * *o + 1.0) / parts as f64;
        if !(u >= -IMAGE_TOL) {
            return None;
        }
        let u = u.max(0.0);
        *o = if u == 0.0 {
            if alpha < 0.0 {
                return None;
            }
            0.0
        } else {
            u.powf(1.0 / alpha)
        };
        total += *o;
    }
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Some(())
}
