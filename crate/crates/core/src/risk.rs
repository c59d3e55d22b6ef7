//! Out-of-sample risk: exact closed form, Monte Carlo cross-check, gain ratio.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{GroundTruth, ProblemConfig};
use crate::data::label_sampler;
use crate::error::{config_err, dim_err, LabError, Result};
use crate::exec::{derive_seed, map_indexed, rng_from_seed, Execution};
use crate::stats::RunningStats;

const MC_SHARD: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risk_closed_form: f64,
    pub risk_monte_carlo: Option<f64>,
    pub mc_std_error: Option<f64>,
    pub theory_prediction: Option<f64>,
    pub gain_vs: Option<(String, f64)>,
}

impl RiskReport {
    pub fn closed_form(risk: f64) -> Self {
        RiskReport {
            risk_closed_form: risk,
            risk_monte_carlo: None,
            mc_std_error: None,
            theory_prediction: None,
            gain_vs: None,
        }
    }

    /// `|mc - closed form|`, when a Monte Carlo estimate is attached.
    pub fn mc_discrepancy(&self) -> Option<f64> {
        self.risk_monte_carlo
            .map(|mc| (mc - self.risk_closed_form).abs())
    }
}

fn check_theta(theta: &DVector<f64>, gt: &GroundTruth, cfg: &ProblemConfig) -> Result<()> {
    if theta.len() != gt.d() {
        return Err(dim_err(format!(
            "theta has length {} but the model has d = {}",
            theta.len(),
            gt.d()
        )));
    }
    if cfg.k != gt.k() {
        return Err(dim_err(format!("config k = {} but ground truth has {} centers", cfg.k, gt.k())));
    }
    Ok(())
}

/// `sigma^2 + |theta0 - theta|^2 + (theta0 - theta)^T M diag(pi) M^T (theta0 - theta)`.
pub fn risk_closed_form(theta: &DVector<f64>, gt: &GroundTruth, cfg: &ProblemConfig) -> Result<f64> {
    check_theta(theta, gt, cfg)?;
    let err = &gt.theta0 - theta;
    let proj = gt.centers.tr_mul(&err);
    let cluster_term: f64 = cfg
        .priors()
        .iter()
        .zip(proj.iter())
        .map(|(pi, c)| pi * c * c)
        .sum();
    Ok(cfg.sigma * cfg.sigma + err.norm_squared() + cluster_term)
}

/// Mean squared prediction error over `n_test` fresh draws, with its standard error.
///
/// Draws are sharded into fixed-size blocks, each with its own RNG stream
/// derived from one `u64` taken from `rng`; shard statistics are merged in
/// shard order so the result does not depend on `exec`.
pub fn risk_monte_carlo<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    gt: &GroundTruth,
    cfg: &ProblemConfig,
    n_test: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<(f64, f64)> {
    if n_test < 2 {
        return Err(config_err(format!("n_test must be at least 2, got {n_test}")));
    }
    check_theta(theta, gt, cfg)?;
    let base = rng.random::<u64>();
    let err = &gt.theta0 - theta;
    let center_proj = gt.centers.tr_mul(&err);
    let sampler = label_sampler(&cfg.priors())?;
    let d = gt.d();
    let shards = n_test.div_ceil(MC_SHARD);
    let parts = map_indexed(shards, exec, |s| {
        let mut r = rng_from_seed(derive_seed(base, &[s as u64]));
        let len = MC_SHARD.min(n_test - s * MC_SHARD);
        let mut stats = RunningStats::default();
        for _ in 0..len {
            let l = sampler.sample(&mut r);
            // (y - x^T theta) = x^T (theta0 - theta) + sigma * eps
            let mut resid = center_proj[l];
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut r);
                resid += z * err[j];
            }
            let eps: f64 = StandardNormal.sample(&mut r);
            resid += cfg.sigma * eps;
            stats.push(resid * resid);
        }
        stats
    });
    let total = parts
        .into_iter()
        .fold(RunningStats::default(), |acc, s| acc.merge(&s));
    Ok((total.mean(), total.std_error()))
}

/// Gain `risk_ref / risk_lookalike`; values above one favor the look-alike model.
pub fn gain(risk_ref: f64, risk_lookalike: f64) -> Result<f64> {
    if !(risk_lookalike > 0.0) {
        return Err(LabError::Numerical(format!(
            "gain undefined for look-alike risk {risk_lookalike}"
        )));
    }
    Ok(risk_ref / risk_lookalike)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_ground_truth, Priors, DEFAULT_POLE_MARGIN};

    fn cfg() -> ProblemConfig {
        ProblemConfig {
            n: 50,
            d: 20,
            p: 8,
            k: 3,
            mu: 2.0,
            sigma: 1.0,
            r_s: 1.0,
            r_ns: 0.7,
            rho: 0.4,
            priors: Priors::explicit(vec![0.2, 0.3, 0.5]),
            seed: 0,
            pole_margin: DEFAULT_POLE_MARGIN,
        }
    }

    #[test]
    fn truth_has_noise_floor_risk() {
        let c = cfg();
        let gt = build_ground_truth(&c, &mut rng_from_seed(1)).unwrap();
        let r = risk_closed_form(&gt.theta0, &gt, &c).unwrap();
        assert!((r - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_centers_zero_theta() {
        let mut c = cfg();
        c.mu = 0.0;
        let gt = build_ground_truth(&c, &mut rng_from_seed(2)).unwrap();
        let r = risk_closed_form(&DVector::zeros(20), &gt, &c).unwrap();
        assert!((r - (1.0 + 1.0 + 0.49)).abs() < 1e-12);
    }

    #[test]
    fn noiseless_truth_has_zero_mc_risk() {
        let mut c = cfg();
        c.sigma = 0.0;
        let gt = build_ground_truth(&c, &mut rng_from_seed(3)).unwrap();
        let (m, _) =
            risk_monte_carlo(&gt.theta0, &gt, &c, 1000, &mut rng_from_seed(4), Execution::Parallel).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn chi_square_mean_at_truth() {
        let c = cfg();
        let gt = build_ground_truth(&c, &mut rng_from_seed(5)).unwrap();
        let (m, se) =
            risk_monte_carlo(&gt.theta0, &gt, &c, 100_000, &mut rng_from_seed(6), Execution::Parallel).unwrap();
        assert!((m - 1.0).abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn monte_carlo_tracks_closed_form() {
        let c = cfg();
        let gt = build_ground_truth(&c, &mut rng_from_seed(7)).unwrap();
        let mut rng = rng_from_seed(8);
        let theta = DVector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
        let exact = risk_closed_form(&theta, &gt, &c).unwrap();
        let (m, se) =
            risk_monte_carlo(&theta, &gt, &c, 100_000, &mut rng, Execution::Parallel).unwrap();
        assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact} (se {se})");
    }

    #[test]
    fn monte_carlo_independent_of_execution_mode() {
        let c = cfg();
        let gt = build_ground_truth(&c, &mut rng_from_seed(9)).unwrap();
        let theta = DVector::zeros(20);
        let a = risk_monte_carlo(&theta, &gt, &c, 20_000, &mut rng_from_seed(10), Execution::Parallel).unwrap();
        let b = risk_monte_carlo(&theta, &gt, &c, 20_000, &mut rng_from_seed(10), Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_tiny_test_set() {
        let c = cfg();
        let gt = build_ground_truth(&c, &mut rng_from_seed(11)).unwrap();
        assert!(risk_monte_carlo(&gt.theta0, &gt, &c, 1, &mut rng_from_seed(1), Execution::Sequential).is_err());
    }

    #[test]
    fn rotation_invariance() {
        let c = cfg();
        let gt = build_ground_truth(&c, &mut rng_from_seed(12)).unwrap();
        let mut rng = rng_from_seed(13);
        let theta = DVector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = crate::config::random_orthonormal_frame(20, 20, &mut rng);
        let rotated = GroundTruth {
            theta0: &q * &gt.theta0,
            centers: &q * &gt.centers,
            ..gt.clone()
        };
        let a = risk_closed_form(&theta, &gt, &c).unwrap();
        let b = risk_closed_form(&(&q * &theta), &rotated, &c).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn gain_arithmetic() {
        assert_eq!(gain(1.5, 1.5).unwrap(), 1.0);
        assert_eq!(gain(2.0, 1.0).unwrap(), 2.0);
        assert!(gain(1.0, 0.0).is_err());
    }
}
