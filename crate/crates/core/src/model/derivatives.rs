//! Analytic derivatives of `l = −½·SSE` with respect to `vec(B)`.
//!
//! These follow the chain `B → μ (multinomial logit) → u (power transform)
//! → m = (D/α)·H·u`, using the Jacobians `∂u/∂μ` and `∂μ/∂η` and their
//! second derivatives. The solver's residual Jacobian is assembled on a
//! different route (directly from `softmax(α·η)`), so the two can be checked
//! against each other.
//!
//! Second derivatives of the power transform, with `g_p = α·μ_p^{α−1}` and
//! `T = Σ_j μ_jᵅ`:
//!
//! ```text
//! ∂²u_ℓ/∂μ_p∂μ_q = δ_pq·α(α−1)μ_p^{α−2}/T·(δ_ℓp − u_ℓ) − g_p·g_q/T²·(δ_ℓp + δ_ℓq − 2u_ℓ)
//! ```
//!
//! and of the logit, with `ν_k = μ_{k+1}`:
//!
//! ```text
//! ∂²μ_p/∂η_k∂η_k' = μ_p(δ_{p,k+1} − ν_k)(δ_{p,k'+1} − ν_k') − μ_p·ν_k(δ_kk' − ν_k')
//! ```

use nalgebra::{DMatrix, DVector};

use super::{mean_row, AlphaProblem, CoefficientMatrix, DesignMatrix};
use crate::error::{Error, Result};
use crate::simplex::{Alpha, CompositionMatrix};

/// Floor applied to μ before negative powers.
const MU_FLOOR: f64 = 1e-300;

/// Per-observation derivative blocks in linear-predictor space.
struct ObservationTerms {
    /// `∂m_m/∂η_k`, `d × d`.
    dm: DMatrix<f64>,
    /// `Σ_m r_m·∂²m_m/∂η_k∂η_k'`, `d × d`; only when requested.
    second: Option<DMatrix<f64>>,
}

/// `∂u_ℓ/∂μ_p = (g_p/T)(δ_ℓp − u_ℓ)`.
fn power_jacobian(mu: &[f64], alpha: f64) -> (DMatrix<f64>, Vec<f64>, f64) {
    let parts = mu.len();
    let mu_a: Vec<f64> = mu.iter().map(|&m| m.max(MU_FLOOR).powf(alpha)).collect();
    let total: f64 = mu_a.iter().sum();
    let u: Vec<f64> = mu_a.iter().map(|v| v / total).collect();
    let ju = DMatrix::from_fn(parts, parts, |l, p| {
        let g = alpha * mu[p].max(MU_FLOOR).powf(alpha - 1.0);
        let delta = if l == p { 1.0 } else { 0.0 };
        g / total * (delta - u[l])
    });
    (ju, u, total)
}

/// `∂²u_ℓ/∂μ_p∂μ_q`, split by index pattern.
fn power_second_derivative(l: usize, p: usize, q: usize, mu: &[f64], u: &[f64], alpha: f64, total: f64) -> f64 {
    let pw = |i: usize, e: f64| mu[i].max(MU_FLOOR).powf(e);
    let g = |i: usize| alpha * pw(i, alpha - 1.0);
    let t2 = total * total;
    let curvature = |i: usize| alpha * (alpha - 1.0) * pw(i, alpha - 2.0) / total;
    if p == q {
        if l == p {
            // ℓ = p = q
            curvature(l) * (1.0 - u[l]) - 2.0 * g(l) * g(l) / t2 * (1.0 - u[l])
        } else {
            // p = q ≠ ℓ
            -curvature(p) * u[l] + 2.0 * g(p) * g(p) / t2 * u[l]
        }
    } else if l == p || l == q {
        // ℓ = p ≠ q, or ℓ = q ≠ p
        -g(p) * g(q) / t2 * (1.0 - 2.0 * u[l])
    } else {
        // ℓ, p, q all distinct
        2.0 * g(p) * g(q) / t2 * u[l]
    }
}

/// `∂μ_p/∂η_k`, `D × d`.
fn logit_jacobian(mu: &[f64]) -> DMatrix<f64> {
    let d = mu.len() - 1;
    DMatrix::from_fn(d + 1, d, |p, k| {
        let nu = mu[k + 1];
        if p == 0 {
            -mu[0] * nu
        } else if p == k + 1 {
            nu * (1.0 - nu)
        } else {
            -mu[p] * nu
        }
    })
}

/// `∂²μ_p/∂η_k∂η_k'`.
fn logit_second_derivative(p: usize, k: usize, kp: usize, mu: &[f64]) -> f64 {
    let (nu, nup) = (mu[k + 1], mu[kp + 1]);
    if k == kp {
        if p == 0 {
            mu[0] * nu * (2.0 * nu - 1.0)
        } else if p == k + 1 {
            nu * (1.0 - nu) * (1.0 - 2.0 * nu)
        } else {
            mu[p] * nu * (2.0 * nu - 1.0)
        }
    } else if p == 0 {
        2.0 * mu[0] * nu * nup
    } else if p == k + 1 {
        -nu * nup * (1.0 - 2.0 * nu)
    } else if p == kp + 1 {
        -nu * nup * (1.0 - 2.0 * nup)
    } else {
        2.0 * mu[p] * nu * nup
    }
}

fn observation_terms(
    problem: &AlphaProblem,
    b: &DMatrix<f64>,
    i: usize,
    residual: Option<&[f64]>,
) -> ObservationTerms {
    let d = problem.d();
    let parts = d + 1;
    let alpha = problem.alpha();
    let h = problem.helmert().as_matrix();
    let x: Vec<f64> = problem.design().row(i).iter().copied().collect();
    let mut mu = vec![0.0; parts];
    mean_row(&x, b, &mut mu);
    let jmu = logit_jacobian(&mu);

    if alpha == 0.0 {
        // m = H·clr(μ) = H·(0, η): linear in η.
        let dm = DMatrix::from_fn(d, d, |m, k| h[(m, k + 1)]);
        return ObservationTerms { dm, second: residual.map(|_| DMatrix::zeros(d, d)) };
    }

    let (ju, u, total) = power_jacobian(&mu, alpha);
    let du = &ju * &jmu;
    let scale = parts as f64 / alpha;
    let dm = h * &du * scale;

    let second = residual.map(|r| {
        // ρ_ℓ = (D/α)·Σ_m r_m·H_mℓ
        let rho: Vec<f64> = (0..parts)
            .map(|l| scale * (0..d).map(|m| r[m] * h[(m, l)]).sum::<f64>())
            .collect();
        let v = DMatrix::from_fn(parts, parts, |p, q| {
            (0..parts)
                .map(|l| rho[l] * power_second_derivative(l, p, q, &mu, &u, alpha, total))
                .sum::<f64>()
        });
        let through_power = jmu.transpose() * &v * &jmu;
        let rho_ju: Vec<f64> = (0..parts)
            .map(|p| (0..parts).map(|l| rho[l] * ju[(l, p)]).sum())
            .collect();
        DMatrix::from_fn(d, d, |k, kp| {
            through_power[(k, kp)]
                + (0..parts)
                    .map(|p| rho_ju[p] * logit_second_derivative(p, k, kp, &mu))
                    .sum::<f64>()
        })
    });
    ObservationTerms { dm, second }
}

fn setup(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<AlphaProblem> {
    let problem = AlphaProblem::new(y, x, alpha)?;
    if b.nrows() != problem.design_cols() || b.ncols() != problem.d() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients are {}x{}, expected {}x{}",
            b.nrows(),
            b.ncols(),
            problem.design_cols(),
            problem.d()
        )));
    }
    Ok(problem)
}

fn residual_row(problem: &AlphaProblem, r: &DVector<f64>, i: usize) -> Vec<f64> {
    let d = problem.d();
    r.rows(i * d, d).iter().copied().collect()
}

/// Gradient of `l = −½·SSE` with respect to `vec(B)`.
pub fn gradient(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<DVector<f64>> {
    use crate::nls::ResidualSystem;
    let problem = setup(y, x, alpha, b)?;
    let (d, cols) = (problem.d(), problem.design_cols());
    let r = problem.residuals(&DVector::from_column_slice(b.as_matrix().as_slice()));
    let mut grad = DVector::zeros(cols * d);
    for i in 0..problem.n() {
        let terms = observation_terms(&problem, b.as_matrix(), i, None);
        let ri = residual_row(&problem, &r, i);
        for k in 0..d {
            let w: f64 = (0..d).map(|m| ri[m] * terms.dm[(m, k)]).sum();
            for c in 0..cols {
                grad[k * cols + c] += w * problem.design()[(i, c)];
            }
        }
    }
    Ok(grad)
}

fn assemble_hessian(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
    exact: bool,
) -> Result<DMatrix<f64>> {
    use crate::nls::ResidualSystem;
    let problem = setup(y, x, alpha, b)?;
    let (d, cols) = (problem.d(), problem.design_cols());
    let r = problem.residuals(&DVector::from_column_slice(b.as_matrix().as_slice()));
    let mut hess = DMatrix::zeros(cols * d, cols * d);
    for i in 0..problem.n() {
        let ri = residual_row(&problem, &r, i);
        let terms = observation_terms(&problem, b.as_matrix(), i, exact.then_some(ri.as_slice()));
        let gn = terms.dm.transpose() * &terms.dm;
        let xi = problem.design().row(i);
        for k in 0..d {
            for kp in 0..d {
                let mut w = -gn[(k, kp)];
                if let Some(s) = &terms.second {
                    w += s[(k, kp)];
                }
                for c in 0..cols {
                    for cp in 0..cols {
                        hess[(k * cols + c, kp * cols + cp)] += w * xi[c] * xi[cp];
                    }
                }
            }
        }
    }
    Ok(hess)
}

/// Gauss-Newton part of the Hessian of `l`: `−Σ_i (∂m_i/∂θ)ᵀ(∂m_i/∂θ)`.
pub fn hessian_gauss_newton(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<DMatrix<f64>> {
    assemble_hessian(y, x, alpha, b, false)
}

/// Full Hessian of `l`, including the residual-weighted second derivatives
/// of the transformed mean.
pub fn hessian_exact(
    y: &CompositionMatrix,
    x: &DesignMatrix,
    alpha: Alpha,
    b: &CoefficientMatrix,
) -> Result<DMatrix<f64>> {
    assemble_hessian(y, x, alpha, b, true)
}

/// Stacked `∂m_i/∂θ` (`n·d × (p+1)·d`), rows ordered observation-major.
pub fn mean_jacobian(problem: &AlphaProblem, b: &CoefficientMatrix) -> DMatrix<f64> {
    let (d, cols) = (problem.d(), problem.design_cols());
    let mut g = DMatrix::zeros(problem.n() * d, cols * d);
    for i in 0..problem.n() {
        let terms = observation_terms(problem, b.as_matrix(), i, None);
        for m in 0..d {
            for k in 0..d {
                for c in 0..cols {
                    g[(i * d + m, k * cols + c)] = terms.dm[(m, k)] * problem.design()[(i, c)];
                }
            }
        }
    }
    g
}
