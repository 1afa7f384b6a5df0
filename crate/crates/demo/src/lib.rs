//! Browser demo: three interactive operations on top of `alphareg`. Each
//! returns a JSON string so the page can stay framework-free.

use alphareg::io::{SpatialMode, SyntheticSpec};
use alphareg::{
    alpha_transform, average_marginal_effects, fit_alpha_regression, gaussian_kernel_weights,
    generate_synthetic, ilr_transform, median_heuristic_bandwidth, Alpha, CompositionMatrix,
    LmOptions,
};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[derive(Serialize)]
struct TransformCurve {
    alphas: Vec<f64>,
    /// Transformed scores of the composition at each α.
    scores: Vec<Vec<f64>>,
    /// ilr scores; `null` when the composition has a zero.
    ilr: Option<Vec<f64>>,
    /// Distance of each α score to the ilr scores.
    distance_to_ilr: Option<Vec<f64>>,
}

/// Traces the α-transform of one 3-part composition as α runs over
/// `steps` points of `[lo, 1]`.
pub fn transform_curve(y: &[f64], lo: f64, steps: usize) -> Result<String> {
    if steps < 2 {
        return Err("need at least two steps".into());
    }
    let comp = CompositionMatrix::closure(DMatrix::from_row_slice(1, y.len(), y)).map_err(err)?;
    let ilr = ilr_transform(&comp).ok().map(|z| z.row(0));
    let mut alphas = Vec::with_capacity(steps);
    let mut scores = Vec::with_capacity(steps);
    for s in 0..steps {
        let a = lo + (1.0 - lo) * s as f64 / (steps - 1) as f64;
        let Ok(alpha) = Alpha::new(a) else { continue };
        if let Ok(z) = alpha_transform(&comp, alpha) {
            alphas.push(a);
            scores.push(z.row(0));
        }
    }
    let distance_to_ilr = ilr.as_ref().map(|l| {
        scores
            .iter()
            .map(|z| z.iter().zip(l).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
            .collect()
    });
    json(&TransformCurve { alphas, scores, ilr, distance_to_ilr })
}

#[derive(Serialize)]
struct SyntheticFit {
    observed: Vec<Vec<f64>>,
    fitted: Vec<Vec<f64>>,
    covariate: Vec<f64>,
    true_beta: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    ame: Vec<f64>,
    kld: f64,
    iterations: usize,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Generates a 3-part, one-covariate dataset at `alpha` and refits it.
pub fn fit_synthetic(n: usize, alpha: f64, noise: f64, seed: u64) -> Result<String> {
    let data = generate_synthetic(&SyntheticSpec {
        n,
        parts: 3,
        covariates: 1,
        alpha,
        noise_scale: noise,
        spatial: SpatialMode::None,
        seed,
    })
    .map_err(err)?;
    let a = Alpha::new(alpha).map_err(err)?;
    let fit = fit_alpha_regression(&data.y, &data.x, a, &LmOptions::default()).map_err(err)?;
    json(&SyntheticFit {
        observed: rows(data.y.as_matrix()),
        fitted: rows(fit.fitted.as_matrix()),
        covariate: data.x.as_matrix().column(1).iter().copied().collect(),
        true_beta: data.truth.beta.clone(),
        beta: rows(fit.coefficients.as_matrix()),
        ame: average_marginal_effects(&fit, 1).map_err(err)?,
        kld: fit.kld,
        iterations: fit.lm.iterations,
    })
}

#[derive(Serialize)]
struct KernelField {
    lat: Vec<f64>,
    lon: Vec<f64>,
    weights: Vec<f64>,
    cluster: Option<Vec<u8>>,
    median: f64,
    h: f64,
}

/// Gaussian kernel weights around observation `focal` of a two-cluster
/// layout, at bandwidth `scale · median`.
pub fn kernel_field(n: usize, seed: u64, focal: usize, scale: f64) -> Result<String> {
    let data = generate_synthetic(&SyntheticSpec {
        n,
        parts: 3,
        covariates: 1,
        alpha: 0.5,
        noise_scale: 0.0,
        spatial: SpatialMode::TwoCluster,
        seed,
    })
    .map_err(err)?;
    let coords = data.coords();
    let median = median_heuristic_bandwidth(&coords).map_err(err)?;
    let h = scale * median;
    let w = gaussian_kernel_weights(&coords, focal, h).map_err(err)?;
    json(&KernelField {
        lat: data.lat.clone(),
        lon: data.lon.clone(),
        weights: w.values,
        cluster: data.truth.cluster.clone(),
        median,
        h,
    })
}

#[wasm_bindgen(js_name = transformCurve)]
pub fn transform_curve_js(y: Vec<f64>, lo: f64, steps: usize) -> std::result::Result<String, JsError> {
    transform_curve(&y, lo, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fitSynthetic)]
pub fn fit_synthetic_js(n: usize, alpha: f64, noise: f64, seed: u32) -> std::result::Result<String, JsError> {
    fit_synthetic(n, alpha, noise, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = kernelField)]
pub fn kernel_field_js(n: usize, seed: u32, focal: usize, scale: f64) -> std::result::Result<String, JsError> {
    kernel_field(n, seed as u64, focal, scale).map_err(|e| JsError::new(&e))
}
