use alphareg::io::{SpatialMode, SyntheticSpec};
use alphareg::*;

fn data(n: usize, seed: u64) -> io::SyntheticData {
    generate_synthetic(&SyntheticSpec {
        n,
        parts: 3,
        covariates: 1,
        alpha: 0.5,
        noise_scale: 0.1,
        spatial: SpatialMode::None,
        seed,
    })
    .unwrap()
}

fn ratio_ok(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(u, v)| (u / v - 1.0).abs() < tol)
}

#[test]
fn spherical_and_sandwich_agree_at_n2000() {
    let d = data(2000, 31);
    let alpha = Alpha::new(0.5).unwrap();
    let fit = fit_alpha_regression(&d.y, &d.x, alpha, &LmOptions::default()).unwrap();
    let sand = sandwich_covariance(&d.y, &d.x, alpha, &fit.coefficients).unwrap();
    let sph = spherical_covariance(&d.y, &d.x, alpha, &fit.coefficients).unwrap();
    let (a, b) = (sand.matrix.diagonal(), sph.matrix.diagonal());
    assert!(ratio_ok(a.as_slice(), b.as_slice(), 0.25), "{a:?} vs {b:?}");
}

#[test]
fn bootstrap_and_sandwich_agree_at_n500() {
    let d = data(500, 32);
    let alpha = Alpha::new(0.5).unwrap();
    let opts = LmOptions::default();
    let fit = fit_alpha_regression(&d.y, &d.x, alpha, &opts).unwrap();
    let sand = sandwich_covariance(&d.y, &d.x, alpha, &fit.coefficients).unwrap();
    let boot = bootstrap_covariance(&d.y, &d.x, alpha, &opts, 400, 7).unwrap();
    let (a, b) = (boot.standard_errors(), sand.standard_errors());
    assert_eq!(boot.replicates, Some(400));
    assert!(ratio_ok(&a, &b, 0.25), "{a:?} vs {b:?}");
}

#[test]
fn bootstrap_repeatable_across_thread_counts() {
    let d = data(60, 33);
    let alpha = Alpha::new(0.5).unwrap();
    let opts = LmOptions::default();
    let run = |t: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
            .install(|| bootstrap_covariance(&d.y, &d.x, alpha, &opts, 50, 11).unwrap().matrix)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn effects_rows_sum_to_zero_on_fitted_data() {
    let d = data(200, 34);
    let fit = fit_alpha_regression(&d.y, &d.x, Alpha::new(0.5).unwrap(), &LmOptions::default()).unwrap();
    let me = marginal_effects(&fit.coefficients, &fit.fitted, 1).unwrap();
    for i in 0..me.values.nrows() {
        assert!(me.values.row(i).sum().abs() < 1e-12);
    }
    let ame = average_marginal_effects(&fit, 1).unwrap();
    assert!(ame.iter().sum::<f64>().abs() < 1e-12);
}
