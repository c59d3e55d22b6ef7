use nalgebra::DMatrix;

use lookalike_lab::data::{empirical_centers, CenterSource, Dataset};
use lookalike_lab::estimators::fit_look_alike_with_centers;
use lookalike_lab::exec::rng_from_seed;
use lookalike_lab::{build_ground_truth, fit_look_alike, min_norm_fit, ridge_fit, sample_dataset, ProblemConfig};

fn config(n: usize, d: usize, p: usize, k: usize) -> ProblemConfig {
    ProblemConfig {
        n,
        d,
        p,
        k,
        mu: if p == 0 { 0.0 } else { 3.0 },
        sigma: 0.5,
        r_s: if p == 0 { 0.0 } else { 1.0 },
        r_ns: 1.5,
        rho: if p == 0 { 0.0 } else { 0.4 },
        ..ProblemConfig::reference(n)
    }
}

#[test]
fn no_sensitive_features_leaves_the_fit_unchanged() {
    for (n, d) in [(30, 12), (12, 30)] {
        let cfg = config(n, d, 0, 2);
        let mut rng = rng_from_seed(n as u64);
        let gt = build_ground_truth(&cfg, &mut rng).unwrap();
        let ds = sample_dataset(&cfg, &gt, &mut rng).unwrap();
        let raw = min_norm_fit(&ds.x, &ds.y).unwrap();
        let la = fit_look_alike(&ds, &gt, CenterSource::TrueCenters).unwrap();
        assert_eq!(raw.theta, la.theta);
    }
}

#[test]
fn sensitive_rows_already_at_centers_gives_identical_fits() {
    let cfg = config(40, 25, 8, 3);
    let mut rng = rng_from_seed(3);
    let gt = build_ground_truth(&cfg, &mut rng).unwrap();
    let ds = sample_dataset(&cfg, &gt, &mut rng).unwrap();
    let centers = gt.centers_s();
    let mut x = ds.x.clone();
    for (i, &l) in ds.labels.iter().enumerate() {
        x.view_mut((0, i), (cfg.p, 1)).copy_from(&centers.column(l));
    }
    let flat = Dataset { x, ..ds };
    let raw = min_norm_fit(&flat.x, &flat.y).unwrap();
    let la = fit_look_alike_with_centers(&flat, &centers).unwrap();
    assert!((&raw.theta - &la.theta).amax() < 1e-12);
}

#[test]
fn empirical_centers_approach_truth_with_sample_size() {
    let cfg = config(20_000, 30, 10, 3);
    let mut rng = rng_from_seed(8);
    let gt = build_ground_truth(&cfg, &mut rng).unwrap();
    let ds = sample_dataset(&cfg, &gt, &mut rng).unwrap();
    let est = empirical_centers(&ds).unwrap();
    let err: DMatrix<f64> = est - gt.centers_s();
    // Per-entry standard error is sqrt(k / n) ~ 0.012.
    assert!(err.amax() < 0.06, "max center error {}", err.amax());
}

#[test]
fn ridge_approaches_min_norm_as_penalty_vanishes() {
    let cfg = config(30, 45, 10, 3);
    let mut rng = rng_from_seed(13);
    let gt = build_ground_truth(&cfg, &mut rng).unwrap();
    let ds = sample_dataset(&cfg, &gt, &mut rng).unwrap();
    let mn = min_norm_fit(&ds.x, &ds.y).unwrap().theta;
    let mut prev = f64::INFINITY;
    for lambda in [1e-2, 1e-4, 1e-6, 1e-8] {
        let gap = (ridge_fit(&ds.x, &ds.y, lambda).unwrap().theta - &mn).norm();
        assert!(gap < prev);
        prev = gap;
    }
    assert!(prev < 1e-5 * mn.norm());
}
