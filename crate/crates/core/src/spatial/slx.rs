use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{fit_alpha_regression_from, CoefficientMatrix, DesignMatrix, FitResult};
use crate::nls::LmOptions;
use crate::simplex::{Alpha, CompositionMatrix};

use super::{spatial_lag, SpatialWeightMatrix};

/// α-SLX fit: linear predictors `xᵀβ_j + (Wx)ᵀγ_j`.
///
/// `gamma` has the same shape as `beta`; its intercept row is identically
/// zero because the intercept is never lagged.
#[derive(Debug, Clone)]
pub struct SlxFit {
    pub beta: CoefficientMatrix,
    pub gamma: CoefficientMatrix,
    /// Fit on the augmented design `[X | WX]`.
    pub fit: FitResult,
    /// The augmented design itself.
    pub design: DesignMatrix,
}

pub fn fit_alpha_slx(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    w: &SpatialWeightMatrix,
    alpha: Alpha,
    opts: &LmOptions,
) -> Result<SlxFit> {
    let lag = spatial_lag(w, x)?;
    let design = x.augment(&lag)?;
    let fit = fit_alpha_regression_from(y, &design, alpha, opts, None)?;
    let (beta, gamma) = split_coefficients(&fit.coefficients, x.ncols());
    Ok(SlxFit { beta, gamma, fit, design })
}

pub(crate) fn split_coefficients(
    b: &CoefficientMatrix,
    cols: usize,
) -> (CoefficientMatrix, CoefficientMatrix) {
    let p = cols - 1;
    let beta = b.rows(0, cols);
    let mut gamma = DMatrix::zeros(cols, b.ncols());
    gamma.rows_mut(1, p).copy_from(&b.as_matrix().rows(cols, p));
    (beta, CoefficientMatrix::from_theta(gamma.as_slice(), cols, b.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, SpatialMode, SyntheticSpec};
    use crate::model::fit_alpha_regression;
    use crate::spatial::{contiguity_matrix, GeoCoordinates};

    #[test]
    fn reduces_to_augmented_regression() {
        let data = generate_synthetic(&SyntheticSpec {
            n: 120,
            parts: 3,
            covariates: 2,
            alpha: 0.5,
            noise_scale: 0.1,
            spatial: SpatialMode::Slx { k: 5 },
            seed: 11,
        })
        .unwrap();
        let coords = GeoCoordinates::new(data.lat.clone(), data.lon.clone()).unwrap();
        let w = contiguity_matrix(&coords, 5).unwrap();
        let alpha = Alpha::new(0.5).unwrap();
        let opts = LmOptions::default();
        let slx = fit_alpha_slx(&data.y, &data.x, &w, alpha, &opts).unwrap();
        let aug = data.x.augment(&spatial_lag(&w, &data.x).unwrap()).unwrap();
        let direct = fit_alpha_regression(&data.y, &aug, alpha, &opts).unwrap();
        assert!(slx.fit.coefficients.max_abs_diff(&direct.coefficients) < 1e-12);
        for j in 0..2 {
            assert_eq!(slx.gamma.get(0, j), 0.0);
        }
        for i in 0..data.y.n() {
            assert!((slx.fit.fitted.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_layout() {
        let b = CoefficientMatrix::new(DMatrix::from_row_slice(
            5,
            2,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
        ))
        .unwrap();
        let (beta, gamma) = split_coefficients(&b, 3);
        assert_eq!(beta.as_matrix(), &DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(gamma.as_matrix(), &DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 7.0, 8.0, 9.0, 10.0]));
    }
}
