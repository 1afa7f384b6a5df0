//! Acceptance criteria, one line of output per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use alphareg::io::{SpatialMode, SyntheticSpec};
use alphareg::model::{gradient, hessian_exact, sse};
use alphareg::selection::loocv_alpha_with;
use alphareg::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn synthetic(
    n: usize,
    parts: usize,
    covariates: usize,
    alpha: f64,
    noise: f64,
    spatial: SpatialMode,
    seed: u64,
) -> io::SyntheticData {
    generate_synthetic(&SyntheticSpec {
        n,
        parts,
        covariates,
        alpha,
        noise_scale: noise,
        spatial,
        seed,
    })
    .unwrap()
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

// 1. Analytic gradient and exact Hessian against central differences.
fn derivatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alphas = [-1.0, -0.5, 0.25, 0.5, 1.0];
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for inst in 0..50 {
        let n = rng.random_range(8..=30);
        let parts = rng.random_range(2..=5);
        let p = rng.random_range(1..=3);
        let alpha = Alpha::new(alphas[inst % alphas.len()]).unwrap();
        let d = parts - 1;
        let cov = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let x = DesignMatrix::with_intercept(&cov).unwrap();
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..parts).map(|_| rng.random_range(0.05..1.0)).collect()).collect();
        let y = CompositionMatrix::from_rows(&rows).unwrap();
        let theta: Vec<f64> = (0..(p + 1) * d).map(|_| rng.random_range(-0.7..0.7)).collect();
        let b = CoefficientMatrix::from_theta(&theta, p + 1, d);

        let l = |t: &[f64]| -0.5 * sse(&y, &x, alpha, &CoefficientMatrix::from_theta(t, p + 1, d)).unwrap();
        let g = |t: &[f64]| gradient(&y, &x, alpha, &CoefficientMatrix::from_theta(t, p + 1, d)).unwrap();
        let q = theta.len();
        let step = 1e-5;
        let mut fd_g = DMatrix::zeros(q, 1);
        let mut fd_h = DMatrix::zeros(q, q);
        for j in 0..q {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[j] += step;
            down[j] -= step;
            fd_g[(j, 0)] = (l(&up) - l(&down)) / (2.0 * step);
            let col = (g(&up) - g(&down)) / (2.0 * step);
            fd_h.set_column(j, &col);
        }
        let an_g = DMatrix::from_column_slice(q, 1, gradient(&y, &x, alpha, &b).unwrap().as_slice());
        let an_h = hessian_exact(&y, &x, alpha, &b).unwrap();
        worst_g = worst_g.max(rel_err(&an_g, &fd_g));
        worst_h = worst_h.max(rel_err(&an_h, &fd_h));
    }
    outcome(
        worst_g < 1e-5 && worst_h < 1e-4,
        format!("50 instances, max gradient rel err {worst_g:.2e} (< 1e-5), max Hessian rel err {worst_h:.2e} (< 1e-4)"),
    )
}

// 2. Small α against per-component OLS of additive log-ratios.
fn limit_consistency() -> Outcome {
    let data = synthetic(300, 4, 2, 0.0, 0.2, SpatialMode::None, 2);
    let fit = fit_alpha_regression(&data.y, &data.x, Alpha::new(1e-4).unwrap(), &LmOptions::default()).unwrap();
    let x = data.x.as_matrix();
    let y = data.y.as_matrix();
    let svd = x.clone().svd(true, true);
    let mut oracle = DMatrix::zeros(3, 3);
    for j in 0..3 {
        let target = DVector::from_fn(300, |i, _| (y[(i, j + 1)] / y[(i, 0)]).ln());
        let coef = svd.solve(&target, 1e-14).unwrap();
        oracle.set_column(j, &coef);
    }
    let diff = (fit.coefficients.as_matrix() - &oracle).amax();
    outcome(diff < 1e-2, format!("max |B(1e-4) - B_alr-OLS| = {diff:.2e} (< 1e-2)"))
}

// 3. Coefficient recovery at every default grid α.
fn recovery() -> Outcome {
    let mut worst_clean = 0.0f64;
    let mut worst_noisy = 0.0f64;
    for (s, &a) in CvGrid::default().alphas.iter().enumerate() {
        let alpha = Alpha::new(a).unwrap();
        let clean = synthetic(500, 3, 2, a, 0.0, SpatialMode::None, 30 + s as u64);
        let fit = fit_alpha_regression(&clean.y, &clean.x, alpha, &LmOptions::default()).unwrap();
        worst_clean = worst_clean.max(fit.coefficients.max_abs_diff(&clean.beta()));
        let noisy = synthetic(500, 3, 2, a, 0.05, SpatialMode::None, 40 + s as u64);
        let fit = fit_alpha_regression(&noisy.y, &noisy.x, alpha, &LmOptions::default()).unwrap();
        worst_noisy = worst_noisy.max(fit.coefficients.max_abs_diff(&noisy.beta()));
    }
    outcome(
        worst_clean < 1e-4 && worst_noisy < 0.05,
        format!("noiseless max err {worst_clean:.2e} (< 1e-4), noise 0.05 max err {worst_noisy:.2e} (< 0.05)"),
    )
}

/// Central difference of the fitted mean in column `col` of `x`, row by row.
fn fd_effects(x: &DesignMatrix, b: &CoefficientMatrix, col: usize) -> DMatrix<f64> {
    let step = 1e-6;
    let shift = |s: f64| {
        let mut m = x.as_matrix().clone();
        m.column_mut(col).add_scalar_mut(s);
        DesignMatrix::new(m).unwrap()
    };
    let up = fitted_mean(&shift(step), b).unwrap();
    let down = fitted_mean(&shift(-step), b).unwrap();
    (up.as_matrix() - down.as_matrix()) / (2.0 * step)
}

fn max_row_sum(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
}

// 4. Marginal effects: finite differences, zero sums, SLX additivity.
fn effects() -> Outcome {
    let opts = LmOptions::default();
    let (mut fd_err, mut zero_sum, mut additivity) = (0.0f64, 0.0f64, 0.0f64);

    let data = synthetic(150, 4, 2, 0.5, 0.1, SpatialMode::None, 4);
    let fit = fit_alpha_regression(&data.y, &data.x, Alpha::new(0.5).unwrap(), &opts).unwrap();
    for k in 1..=2 {
        let me = marginal_effects(&fit.coefficients, &fit.fitted, k).unwrap();
        fd_err = fd_err.max(rel_err(&me.values, &fd_effects(&data.x, &fit.coefficients, k)));
        zero_sum = zero_sum.max(max_row_sum(&me.values));
    }

    let sdata = synthetic(150, 3, 2, 0.5, 0.1, SpatialMode::Slx { k: 5 }, 5);
    let w = contiguity_matrix(&sdata.coords(), 5).unwrap();
    let slx = fit_alpha_slx(&sdata.y, &sdata.x, &w, Alpha::new(0.5).unwrap(), &opts).unwrap();
    for k in 1..=2 {
        let e = slx_effects(&slx, k).unwrap();
        let direct_fd = fd_effects(&slx.design, &slx.fit.coefficients, k);
        let indirect_fd = fd_effects(&slx.design, &slx.fit.coefficients, k + 2);
        fd_err = fd_err.max(rel_err(&e.direct.values, &direct_fd));
        fd_err = fd_err.max(rel_err(&e.indirect.values, &indirect_fd));
        for t in [&e.direct, &e.indirect, &e.total] {
            zero_sum = zero_sum.max(max_row_sum(&t.values));
        }
        additivity = additivity.max((&e.total.values - (&e.direct.values + &e.indirect.values)).amax());
    }

    let gdata = synthetic(80, 3, 1, 0.5, 0.05, SpatialMode::TwoCluster, 6);
    let coords = gdata.coords();
    let gw = fit_gwar(&gdata.y, &gdata.x, &coords, Alpha::new(0.5).unwrap(), 0.02, &opts).unwrap();
    let table = gwar_marginal_effects(&gw, 1).unwrap();
    zero_sum = zero_sum.max(max_row_sum(&table.values));
    let mut local_fd = DMatrix::zeros(80, 3);
    for (i, b) in gw.local_coefficients.iter().enumerate() {
        let xi = gdata.x.select_rows(&[i]);
        local_fd.set_row(i, &fd_effects(&xi, b, 1).row(0));
    }
    fd_err = fd_err.max(rel_err(&table.values, &local_fd));

    outcome(
        fd_err < 1e-5 && zero_sum < 1e-12 && additivity < 1e-12,
        format!("FD rel err {fd_err:.2e} (< 1e-5), max |row sum| {zero_sum:.1e} (< 1e-12), |total - direct - indirect| {additivity:.1e} (< 1e-12)"),
    )
}

// 5. GWαR reductions.
fn gwar_reductions() -> Outcome {
    let opts = LmOptions::default();
    let flat_data = synthetic(100, 3, 1, 0.5, 0.1, SpatialMode::None, 7);
    let alpha = Alpha::new(0.5).unwrap();
    let flat = fit_gwar(&flat_data.y, &flat_data.x, &flat_data.coords(), alpha, 1e6, &opts).unwrap();
    let flat_err = flat
        .local_coefficients
        .iter()
        .map(|b| b.max_abs_diff(&flat.global.coefficients))
        .fold(0.0, f64::max);

    let data = synthetic(300, 3, 1, 0.5, 0.05, SpatialMode::TwoCluster, 8);
    let fit = fit_gwar(&data.y, &data.x, &data.coords(), alpha, 0.01, &opts).unwrap();
    let truth = data.beta();
    let cluster = data.truth.cluster.as_ref().unwrap();
    let correct = fit
        .local_coefficients
        .iter()
        .enumerate()
        .filter(|(i, b)| {
            let flip = if cluster[*i] == 0 { 1.0 } else { -1.0 };
            (0..2).all(|j| (b.get(1, j) * flip * truth.get(1, j)) > 0.0)
        })
        .count();
    let share = correct as f64 / 300.0;

    let mut finite_wins = 0;
    for seed in 0..10u64 {
        let d = synthetic(60, 3, 1, 0.5, 0.05, SpatialMode::TwoCluster, 100 + seed);
        let coords = d.coords();
        let mut hs = default_h_grid(&coords).unwrap();
        hs.push(1e6);
        let grid = CvGrid { hs, ..CvGrid::default() };
        let cv = loocv_gwar(&d.y, &d.x, &coords, &grid, &opts).unwrap();
        if cv.best.h.unwrap() < 1e6 {
            finite_wins += 1;
        }
    }
    outcome(
        flat_err < 1e-6 && share >= 0.95 && finite_wins >= 8,
        format!("flat-kernel max diff {flat_err:.1e} (< 1e-6), sign pattern recovered at {:.1}% (>= 95%), finite h selected in {finite_wins}/10 seeds (>= 8)", share * 100.0),
    )
}

/// Gaussian noise in α-space around fixed means, mapped back to the simplex.
fn perturb(mu: &CompositionMatrix, alpha: Alpha, scale: f64, rng: &mut ChaCha8Rng) -> CompositionMatrix {
    let z = alpha_transform(mu, alpha).unwrap();
    let mut rows = Vec::with_capacity(mu.n());
    for i in 0..mu.n() {
        loop {
            let noisy = DMatrix::from_fn(1, z.as_matrix().ncols(), |_, m| {
                let e: f64 = StandardNormal.sample(rng);
                z.as_matrix()[(i, m)] + scale * e
            });
            if let Ok(y) = alpha_transform_inverse(&EuclideanScores::new(noisy), alpha) {
                rows.push(y.row(0));
                break;
            }
        }
    }
    CompositionMatrix::from_rows(&rows).unwrap()
}

// 6. Coverage of sandwich confidence intervals; spherical agreement.
fn coverage() -> Outcome {
    let (n, reps) = (1000, 1000);
    let alpha = Alpha::new(0.5).unwrap();
    let base = synthetic(n, 3, 1, 0.5, 0.0, SpatialMode::None, 9);
    let truth = base.beta().theta();
    let q = truth.len();
    let mut covered = vec![0usize; q];
    let (mut sand_sum, mut sph_sum) = (vec![0.0; q], vec![0.0; q]);
    let mut within = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let opts = LmOptions::default();
    for _ in 0..reps {
        let y = perturb(&base.mu, alpha, 0.1, &mut rng);
        let fit = fit_alpha_regression_from(&y, &base.x, alpha, &opts, Some(&base.beta())).unwrap();
        let sand = sandwich_covariance(&y, &base.x, alpha, &fit.coefficients).unwrap();
        let sph = spherical_covariance(&y, &base.x, alpha, &fit.coefficients).unwrap();
        let theta = fit.coefficients.theta();
        for j in 0..q {
            let se = sand.matrix[(j, j)].sqrt();
            if (theta[j] - truth[j]).abs() <= 1.959964 * se {
                covered[j] += 1;
            }
            sand_sum[j] += sand.matrix[(j, j)];
            sph_sum[j] += sph.matrix[(j, j)];
        }
        within += usize::from((0..q).all(|j| (sph.matrix[(j, j)] / sand.matrix[(j, j)] - 1.0).abs() < 0.25));
    }
    let worst_ratio = (0..q).map(|j| (sph_sum[j] / sand_sum[j] - 1.0).abs()).fold(0.0, f64::max);
    let rates: Vec<f64> = covered.iter().map(|&c| c as f64 / reps as f64).collect();
    let ok = rates.iter().all(|&r| (0.92..=0.97).contains(&r)) && worst_ratio < 0.25;
    outcome(
        ok,
        format!("coverage per coefficient {rates:?} (each in [0.92, 0.97]), max |mean spherical / mean sandwich - 1| {worst_ratio:.3} (< 0.25); all diagonals within 25% in {within}/{reps} single replicates"),
    )
}

// 7. Parallel LOOCV against a serial brute-force recomputation.
fn loocv_oracle() -> Outcome {
    let data = synthetic(60, 3, 2, 0.5, 0.1, SpatialMode::None, 10);
    let grid = CvGrid::default();
    let opts = LmOptions::default();
    let cv = loocv_alpha_with(&data.y, &data.x, &grid, &opts, true).unwrap();
    let mut worst = 0.0f64;
    let mut previous: Option<CoefficientMatrix> = None;
    for (g, &a) in grid.alphas.iter().enumerate() {
        let alpha = Alpha::new(a).unwrap();
        let full = fit_alpha_regression_from(&data.y, &data.x, alpha, &opts, previous.as_ref()).unwrap();
        let mut total = 0.0;
        for i in 0..60 {
            let keep: Vec<usize> = (0..60).filter(|&j| j != i).collect();
            let fold = fit_alpha_regression_from(
                &data.y.select_rows(&keep),
                &data.x.select_rows(&keep),
                alpha,
                &opts,
                Some(&full.coefficients),
            )
            .unwrap();
            let mu = predict(&data.x.select_rows(&[i]), &fold).unwrap();
            total += kld(&data.y.select_rows(&[i]), &mu).unwrap();
        }
        worst = worst.max((cv.scores[g].score - total).abs());
        previous = Some(full.coefficients);
    }
    outcome(worst < 1e-10, format!("max |parallel - serial| = {worst:.1e} (< 1e-10) over {} grid points", grid.alphas.len()))
}

// 8. Geometry.
fn geometry() -> Outcome {
    let mut wrap = 0.0f64;
    for lat in [0.0, 40.0] {
        let far = chordal_distance_sq(&to_cartesian(lat, 179.0).unwrap(), &to_cartesian(lat, -179.0).unwrap());
        let near = chordal_distance_sq(&to_cartesian(lat, 1.0).unwrap(), &to_cartesian(lat, -1.0).unwrap());
        wrap = wrap.max((far - near).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut contiguity_ok = true;
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let lat: Vec<f64> = (0..n).map(|_| rng.random_range(-80.0..80.0)).collect();
        let lon: Vec<f64> = (0..n).map(|_| rng.random_range(-179.0..180.0)).collect();
        let coords = GeoCoordinates::new(lat, lon).unwrap();
        let k = rng.random_range(1..n);
        let w = contiguity_matrix(&coords, k).unwrap();
        for i in 0..n {
            let row = w.as_matrix().row(i);
            contiguity_ok &= row[i] == 0.0
                && (row.sum() - 1.0).abs() < 1e-12
                && row.iter().filter(|&&v| v > 0.0).count() == k
                && row.iter().all(|&v| v >= 0.0);
        }
    }
    outcome(
        wrap < 1e-12 && contiguity_ok,
        format!("wraparound |d(179,-179) - d(1,-1)| = {wrap:.1e} (< 1e-12) at lat 0 and 40; contiguity invariants on 50 random configurations: {contiguity_ok}"),
    )
}

// 9. Zeros: fits for α > 0, errors for α ≤ 0.
fn zeros() -> Outcome {
    let data = synthetic(200, 4, 2, 0.5, 0.1, SpatialMode::None, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut m = data.y.as_matrix().clone();
    let total = m.len();
    let mut zeroed = 0;
    while (zeroed as f64) < 0.3 * total as f64 {
        let (i, j) = (rng.random_range(0..200), rng.random_range(0..4));
        let nonzero = m.row(i).iter().filter(|&&v| v > 0.0).count();
        if m[(i, j)] > 0.0 && nonzero > 1 {
            m[(i, j)] = 0.0;
            zeroed += 1;
        }
    }
    let y = CompositionMatrix::closure(m).unwrap();
    let opts = LmOptions::default();
    let fits_ok = CvGrid::default()
        .alphas
        .iter()
        .all(|&a| fit_alpha_regression(&y, &data.x, Alpha::new(a).unwrap(), &opts).is_ok());
    let zero_err = matches!(
        fit_alpha_regression(&y, &data.x, Alpha::new(0.0).unwrap(), &opts),
        Err(Error::ZeroWithLogRatio { .. })
    );
    let neg_err = matches!(
        fit_alpha_regression(&y, &data.x, Alpha::new(-0.5).unwrap(), &opts),
        Err(Error::ZeroWithNonpositiveAlpha { .. })
    );
    outcome(
        fits_ok && zero_err && neg_err,
        format!("{:.0}% zero cells; all grid alphas fit: {fits_ok}; alpha = 0 rejected: {zero_err}; alpha = -0.5 rejected: {neg_err}", 100.0 * zeroed as f64 / total as f64),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 derivative correctness", derivatives),
        ("2 limit consistency", limit_consistency),
        ("3 coefficient recovery", recovery),
        ("4 marginal-effect validity", effects),
        ("5 GWaR reductions", gwar_reductions),
        ("6 sandwich coverage", coverage),
        ("7 LOOCV oracle", loocv_oracle),
        ("8 spatial geometry", geometry),
        ("9 zero handling", zeros),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(o) => {
                println!("[{}] criterion {name} ({secs:.1} s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                failed += usize::from(!o.pass);
            }
            Err(_) => {
                println!("[FAIL] criterion {name} ({secs:.1} s): panicked");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
