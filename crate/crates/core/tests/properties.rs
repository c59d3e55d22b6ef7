use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use lookalike_lab::config::random_orthonormal_frame;
use lookalike_lab::exec::rng_from_seed;
use lookalike_lab::sweep::apply_theory_axis;
use lookalike_lab::theory::{case1_gain, GainCase};
use lookalike_lab::{
    anonymize, build_ground_truth, gain_theory, min_norm_fit, risk_closed_form, sample_dataset, GroundTruth,
    ProblemConfig, TheoryParams,
};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn small_config(n: usize, d: usize, p: usize, k: usize, mu: f64, rho: f64, seed: u64) -> ProblemConfig {
    ProblemConfig {
        n,
        d,
        p,
        k,
        mu,
        sigma: 0.7,
        r_s: 1.3,
        r_ns: 0.8,
        rho,
        seed,
        ..ProblemConfig::reference(n)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ground_truth_norms_and_constellation(
        p in 3usize..30, extra in 1usize..30, k_frac in 0.0f64..1.0,
        mu in 0.1f64..8.0, rho in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let k = 1 + ((p - 2) as f64 * k_frac) as usize;
        let cfg = small_config(50, p + extra, p, k, mu, rho, seed);
        let gt = build_ground_truth(&cfg, &mut rng_from_seed(seed)).unwrap();
        let again = build_ground_truth(&cfg, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(&gt, &again);

        prop_assert!(rel(gt.theta0_s().norm(), cfg.r_s) < 1e-10);
        prop_assert!(rel(gt.theta0_ns().norm(), cfg.r_ns) < 1e-10);
        prop_assert!(rel(gt.theta0.norm_squared(), cfg.r_s.powi(2) + cfg.r_ns.powi(2)) < 1e-10);
        prop_assert!((gt.alignment().norm() - rho.sqrt() * cfg.r_s).abs() < 1e-10 * cfg.r_s);

        let utu = gt.u_s.tr_mul(&gt.u_s);
        prop_assert!((utu - DMatrix::identity(k, k)).abs().max() < 1e-10);
        let mtm = gt.centers.tr_mul(&gt.centers);
        prop_assert!((mtm - DMatrix::identity(k, k) * mu * mu).abs().max() < 1e-10 * mu * mu.max(1.0));
        prop_assert!(gt.centers.rows(p, extra).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_norm_interpolates_or_projects(d in 1usize..=12, n in 1usize..=12, seed in any::<u64>()) {
        let x = gaussian(d, n, seed);
        let y = DVector::from_column_slice(gaussian(n, 1, seed ^ 1).as_slice());
        let fit = min_norm_fit(&x, &y).unwrap();
        let pred = x.tr_mul(&fit.theta);
        if n <= d {
            prop_assert!((pred - &y).amax() < 1e-8 * (1.0 + y.amax()));
        } else {
            let resid = &y - pred;
            prop_assert!((&x * resid).amax() < 1e-8 * (1.0 + y.norm()) * (1.0 + x.norm()));
        }
        prop_assert!(fit.rank_used <= d.min(n));
    }

    #[test]
    fn min_norm_scaling_equivariance(d in 1usize..=12, n in 1usize..=12, c in 0.01f64..100.0, seed in any::<u64>()) {
        let x = gaussian(d, n, seed);
        let y = DVector::from_column_slice(gaussian(n, 1, seed ^ 2).as_slice());
        let base = min_norm_fit(&x, &y).unwrap().theta;
        let scaled = min_norm_fit(&(&x * c), &y).unwrap().theta;
        prop_assert!((scaled * c - &base).norm() <= 1e-10 * base.norm().max(1e-12));
    }

    #[test]
    fn risk_bounded_below_and_rotation_invariant(
        seed in any::<u64>(), scale in 0.0f64..3.0, mu in 0.0f64..6.0,
    ) {
        let cfg = small_config(40, 14, 6, 3, mu, 0.4, seed);
        let mut rng = rng_from_seed(seed);
        let gt = build_ground_truth(&cfg, &mut rng).unwrap();
        let theta = DVector::from_fn(cfg.d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let sigma2 = cfg.sigma * cfg.sigma;
        let risk = risk_closed_form(&theta, &gt, &cfg).unwrap();
        prop_assert!(risk >= sigma2 - 1e-12);
        prop_assert!((risk_closed_form(&gt.theta0, &gt, &cfg).unwrap() - sigma2).abs() < 1e-12);

        let q = random_orthonormal_frame(cfg.d, cfg.d, &mut rng);
        let theta0 = &q * &gt.theta0;
        let rotated = GroundTruth::from_parts(
            theta0.rows(0, cfg.p).into_owned(),
            theta0.rows(cfg.p, cfg.d - cfg.p).into_owned(),
            &q * &gt.centers,
        ).unwrap();
        let risk_rot = risk_closed_form(&(&q * &theta), &rotated, &cfg).unwrap();
        prop_assert!((risk_rot - risk).abs() < 1e-10 * risk);
    }

    #[test]
    fn anonymize_replaces_only_sensitive_block(seed in any::<u64>(), n in 6usize..40) {
        let cfg = small_config(n, 10, 5, 3, 2.0, 0.5, seed);
        let mut rng = rng_from_seed(seed);
        let gt = build_ground_truth(&cfg, &mut rng).unwrap();
        let ds = sample_dataset(&cfg, &gt, &mut rng).unwrap();
        let centers = gt.centers_s();
        let anon = anonymize(&ds, &centers).unwrap();
        for (i, &l) in ds.labels.iter().enumerate() {
            prop_assert_eq!(anon.x_l.view((0, i), (cfg.p, 1)), centers.column(l));
            prop_assert_eq!(anon.x_l.view((cfg.p, i), (cfg.d - cfg.p, 1)), ds.x.view((cfg.p, i), (cfg.d - cfg.p, 1)));
        }
        let twice = anonymize(&anon.clone().into_dataset(), &centers).unwrap();
        prop_assert_eq!(twice, anon);

        let lambda = ds.membership();
        for j in 0..n {
            prop_assert_eq!(lambda.column(j).iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(lambda.column(j).sum(), 1.0);
        }
        prop_assert_eq!(ds.cluster_sizes().iter().sum::<usize>(), n);
    }

    #[test]
    fn case1_gain_matches_explicit_ratio(
        psi_d in 0.05f64..0.9, frac in 0.0f64..1.0, snr in 0.0f64..5.0, rho in 0.0f64..1.0, mu in 0.1f64..6.0,
    ) {
        let psi_p = frac * psi_d;
        let mut tp = TheoryParams::balanced(psi_d, psi_p, 3);
        tp.rho = rho;
        tp.mu = mu;
        apply_theory_axis(&mut tp, "snr", snr).unwrap();
        let pred = gain_theory(&tp, &tp.balanced_alignment());
        prop_assume!(pred.is_ok());
        let pred = pred.unwrap();
        prop_assert_eq!(pred.case, GainCase::BothUnder);
        let explicit = case1_gain(psi_d, psi_p, snr, rho);
        prop_assert!((pred.delta - explicit).abs() <= 1e-12 * explicit.abs().max(1.0));
    }

    #[test]
    fn mixed_regime_gain_monotone_in_rns_and_mu(
        mu2k in 0.05f64..20.0, rho in 0.0f64..1.0, r_ns in 0.05f64..5.0, snr in 0.1f64..2.0,
        bump in 0.01f64..2.0,
    ) {
        let delta = |mu2k: f64, r_ns: f64| {
            let mut tp = TheoryParams::balanced(2.0, 1.7, 5);
            tp.rho = rho;
            apply_theory_axis(&mut tp, "snr", snr).unwrap();
            apply_theory_axis(&mut tp, "r_ns", r_ns).unwrap();
            apply_theory_axis(&mut tp, "mu2_over_k", mu2k).unwrap();
            gain_theory(&tp, &tp.balanced_alignment()).unwrap().delta
        };
        let base = delta(mu2k, r_ns);
        prop_assert!(delta(mu2k, r_ns + bump) >= base - 1e-12);
        prop_assert!(delta(mu2k + bump, r_ns) <= base + 1e-12);
    }
}
