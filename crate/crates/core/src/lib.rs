//! Regression for compositional data through the α-transformation.
//!
//! Compositions are mapped to Euclidean space with a power transform indexed
//! by `α`, which reduces to the isometric log-ratio transform as `α → 0` and
//! handles zeros without imputation for `α > 0`. The conditional mean is a
//! multinomial logit, fitted by Levenberg-Marquardt least squares in the
//! transformed space. Two spatial extensions are provided: spatially lagged
//! covariates (α-SLX) and geographically weighted local fits (GWαR), with
//! leave-one-out cross-validation over their hyper-parameters, marginal
//! effects, and sandwich or bootstrap covariance estimates.
//!
//! ```
//! use alphareg::{fit_alpha_regression, generate_synthetic, Alpha, LmOptions};
//! use alphareg::io::{SpatialMode, SyntheticSpec};
//!
//! let data = generate_synthetic(&SyntheticSpec {
//!     n: 100, parts: 3, covariates: 1, alpha: 0.5,
//!     noise_scale: 0.0, spatial: SpatialMode::None, seed: 1,
//! }).unwrap();
//! let fit = fit_alpha_regression(&data.y, &data.x, Alpha::new(0.5).unwrap(),
//!                                &LmOptions::default()).unwrap();
//! assert!(fit.coefficients.max_abs_diff(&data.beta()) < 1e-6);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod nls;
mod par;
pub mod selection;
pub mod simplex;
pub mod spatial;

pub use error::{Error, ErrorKind, Result};
pub use inference::{
    average_marginal_effects, bootstrap_covariance, gwar_marginal_effects, marginal_effects,
    sandwich_covariance, slx_effects, spherical_covariance, CovarianceEstimate, CovarianceKind,
    MarginalEffectsTable, SlxEffects,
};
pub use io::{generate_synthetic, load_dataset, Dataset, DatasetSpec, RunConfig};
pub use model::{
    fit_alpha_regression, fit_alpha_regression_from, fitted_mean, predict, CoefficientMatrix,
    DesignMatrix, FitResult,
};
pub use nls::{levenberg_marquardt, LmOptions, LmResult, ResidualSystem, Termination};
pub use selection::{
    default_h_grid, kld, loocv_alpha, loocv_gwar, loocv_slx, median_heuristic_bandwidth, CvGrid,
    CvResult,
};
pub use simplex::{
    alpha_transform, alpha_transform_inverse, helmert_submatrix, ilr_transform, power_transform,
    Alpha, CompositionMatrix, EuclideanScores, HelmertSubmatrix,
};
pub use spatial::{
    chordal_distance_sq, contiguity_matrix, fit_alpha_slx, fit_gwar, gaussian_kernel_weights,
    predict_gwar, spatial_lag, to_cartesian, GeoCoordinates, GwarFit, KernelWeights, SlxFit,
    SpatialWeightMatrix,
};
