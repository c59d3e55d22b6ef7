//! Binomial responses with a logit link: data generation, IRLS fitting and
//! the raw-vs-look-alike gain experiment.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{build_ground_truth, GroundTruth, ProblemConfig, DEFAULT_POLE_MARGIN};
use crate::data::{anonymize, label_sampler, sample_features, Dataset};
use crate::error::{config_err, dim_err, LabError, Result};
use crate::estimators::{EstimatorKind, FittedModel};
use crate::exec::{derive_seed, map_indexed, rng_from_seed, Execution};
use crate::linalg::{default_rcond, spectral_solve, Filter};
use crate::stats::RunningStats;

/// Diagonal floor added to the weighted Gram matrix in each Newton step.
const RIDGE_FLOOR: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmConfig {
    pub base: ProblemConfig,
    /// Binomial trial count `N`.
    pub trials: u64,
    pub n_test: usize,
}

impl GlmConfig {
    /// The nonlinear setting with `n = 200`, `d = 180`, `N = 1000` and a
    /// 50K-sample test set. `r_s` is the swept axis and starts at 0.1.
    pub fn reference() -> Self {
        GlmConfig {
            base: ProblemConfig {
                n: 200,
                d: 180,
                p: 20,
                k: 3,
                mu: 5.0,
                sigma: 1.0,
                r_s: 0.1,
                r_ns: 2.0,
                rho: 0.3,
                priors: Default::default(),
                seed: 0,
                pole_margin: DEFAULT_POLE_MARGIN,
            },
            trials: 1000,
            n_test: 50_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.n_test == 0 {
            return Err(config_err("n_test must be at least 1"));
        }
        Ok(())
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Success probability `1 / (1 + exp(-<x, theta0> + eps))`.
fn success_prob<R: Rng + ?Sized>(eta: f64, sigma: f64, rng: &mut R) -> f64 {
    let eps: f64 = StandardNormal.sample(rng);
    sigmoid(eta - sigma * eps)
}

fn draw_count<R: Rng + ?Sized>(trials: u64, prob: f64, rng: &mut R) -> Result<f64> {
    let b = Binomial::new(trials, prob)
        .map_err(|e| LabError::Numerical(format!("binomial with p = {prob}: {e}")))?;
    Ok(b.sample(rng) as f64)
}

/// Features from the mixture model and binomial counts `y ~ Bin(N, p_x)`.
pub fn sample_glm<R: Rng + ?Sized>(cfg: &GlmConfig, gt: &GroundTruth, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let base = &cfg.base;
    if gt.d() != base.d || gt.p != base.p || gt.k() != base.k {
        return Err(dim_err("config does not match ground truth"));
    }
    let (x, labels) = sample_features(base.n, &base.priors(), &gt.centers, rng)?;
    let eta = x.tr_mul(&gt.theta0);
    let mut y = DVector::zeros(base.n);
    for i in 0..base.n {
        let prob = success_prob(eta[i], base.sigma, rng);
        y[i] = draw_count(cfg.trials, prob, rng)?;
    }
    Ok(Dataset {
        x,
        y,
        labels,
        k: base.k,
        p: base.p,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub model: FittedModel,
    pub converged: bool,
    /// Final `|grad|_inf` of the mean per-trial log-likelihood.
    pub grad_inf: f64,
    pub iterations: usize,
    /// Log-likelihood after each accepted step, starting from `theta = 0`.
    pub loglik_trace: Vec<f64>,
}

fn loglik(eta: &DVector<f64>, y: &DVector<f64>, trials: f64) -> f64 {
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| yi * e - trials * softplus(e))
        .sum()
}

/// Score of the mean per-trial log-likelihood: `A (y - N p) / (n N)`.
fn score(design: &DMatrix<f64>, eta: &DVector<f64>, y: &DVector<f64>, trials: f64) -> DVector<f64> {
    let n = y.len() as f64;
    let resid = DVector::from_iterator(
        y.len(),
        eta.iter().zip(y.iter()).map(|(&e, &yi)| yi - trials * sigmoid(e)),
    );
    design * resid / (n * trials)
}

/// Binomial-logit maximum likelihood by Newton steps with step halving.
///
/// Each step is the minimum-norm solution of the weighted normal equations,
/// so rank-deficient designs (such as look-alike designs) are handled the
/// same way as in the linear estimators. Convergence is declared when the
/// sup-norm of the mean per-trial score drops to `tol`.
pub fn glm_fit(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    trials: u64,
    max_iter: usize,
    tol: f64,
) -> Result<GlmFit> {
    let (d, n) = design.shape();
    if y.len() != n {
        return Err(dim_err(format!("design has {n} samples but y has {} entries", y.len())));
    }
    if n == 0 || trials == 0 {
        return Err(config_err("need at least one sample and one trial"));
    }
    let big_n = trials as f64;
    if let Some(bad) = y.iter().find(|&&v| !(0.0..=big_n).contains(&v)) {
        return Err(config_err(format!("count {bad} outside [0, {trials}]")));
    }
    let mut theta = DVector::zeros(d);
    let mut eta = design.tr_mul(&theta);
    let mut ll = loglik(&eta, y, big_n);
    let mut trace = vec![ll];
    let mut grad = score(design, &eta, y, big_n);
    let mut iterations = 0;
    let mut rank = 0;
    let mut sigma_min = 0.0;
    while grad.amax() > tol && iterations < max_iter {
        iterations += 1;
        // rows of B are sqrt(w_i) x_i^T; solve B step ~ r with r_i = (y_i - N p_i) / sqrt(w_i)
        let mut b = design.transpose();
        let mut r = DVector::zeros(n);
        for i in 0..n {
            let pi = sigmoid(eta[i]);
            let w = (big_n * pi * (1.0 - pi)).max(f64::MIN_POSITIVE.sqrt());
            let sw = w.sqrt();
            b.row_mut(i).scale_mut(sw);
            r[i] = (y[i] - big_n * pi) / sw;
        }
        let sol = spectral_solve(
            &b,
            &r,
            Filter::PinvShrink {
                rcond: default_rcond(n, d),
                shift: RIDGE_FLOOR,
            },
        )?;
        rank = sol.rank;
        sigma_min = sol.sigma_min_kept;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &theta + &sol.x * t;
            let cand_eta = design.tr_mul(&cand);
            let cand_ll = loglik(&cand_eta, y, big_n);
            if cand_ll >= ll {
                theta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(ll);
        grad = score(design, &eta, y, big_n);
    }
    let grad_inf = grad.amax();
    Ok(GlmFit {
        model: FittedModel {
            theta,
            rank_used: rank,
            sigma_min_kept: sigma_min,
            kind: EstimatorKind::Glm,
        },
        converged: grad_inf <= tol,
        grad_inf,
        iterations,
        loglik_trace: trace,
    })
}

/// Test-set errors of one fitted coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlmRisk {
    /// Mean of `(y/N - p_hat)^2`.
    pub response_mse: f64,
    /// Mean of `(p_x - p_hat)^2`.
    pub probability_mse: f64,
}

/// Evaluate several coefficient vectors on one stream of `n_test` fresh
/// samples without storing the test set.
pub fn glm_test_risks<R: Rng + ?Sized>(
    cfg: &GlmConfig,
    gt: &GroundTruth,
    thetas: &[&DVector<f64>],
    rng: &mut R,
) -> Result<Vec<GlmRisk>> {
    let base = &cfg.base;
    let sampler = label_sampler(&base.priors())?;
    let d = gt.d();
    let big_n = cfg.trials as f64;
    let mut sums = vec![(0.0, 0.0); thetas.len()];
    let mut x = DVector::zeros(d);
    for _ in 0..cfg.n_test {
        let l = sampler.sample(rng);
        for j in 0..d {
            x[j] = gt.centers[(j, l)] + rng.sample::<f64, _>(StandardNormal);
        }
        let prob = success_prob(x.dot(&gt.theta0), base.sigma, rng);
        let frac = draw_count(cfg.trials, prob, rng)? / big_n;
        for (s, th) in sums.iter_mut().zip(thetas) {
            let p_hat = sigmoid(x.dot(th));
            s.0 += (frac - p_hat).powi(2);
            s.1 += (prob - p_hat).powi(2);
        }
    }
    let m = cfg.n_test as f64;
    Ok(sums
        .into_iter()
        .map(|(a, b)| GlmRisk {
            response_mse: a / m,
            probability_mse: b / m,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmExperimentSpec {
    pub glm: GlmConfig,
    pub r_s_grid: Vec<f64>,
    pub replicates: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iter() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-8
}

impl GlmExperimentSpec {
    pub fn reference() -> Self {
        GlmExperimentSpec {
            glm: GlmConfig::reference(),
            r_s_grid: (0..10).map(|i| 0.1 + 0.2 * i as f64).collect(),
            replicates: 50,
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.glm.validate()?;
        if self.r_s_grid.is_empty() {
            return Err(config_err("r_s grid must not be empty"));
        }
        if self.replicates == 0 {
            return Err(config_err("replicates must be at least 1"));
        }
        for &r in &self.r_s_grid {
            let mut c = self.glm.base.clone();
            c.r_s = r;
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmGainRow {
    pub r_s: f64,
    pub mean_log_gain: f64,
    pub stderr: f64,
    pub replicates: usize,
    pub mean_log_gain_prob: f64,
    pub stderr_prob: f64,
    pub risk_raw_mean: f64,
    pub risk_lookalike_mean: f64,
    /// Fits that stopped before reaching the score tolerance.
    pub nonconverged: usize,
}

struct ReplicateOutcome {
    log_gain: f64,
    log_gain_prob: f64,
    risk_raw: f64,
    risk_la: f64,
    nonconverged: usize,
}

fn glm_replicate(spec: &GlmExperimentSpec, r_s: f64, seed: u64) -> Result<ReplicateOutcome> {
    let mut cfg = spec.glm.clone();
    cfg.base.r_s = r_s;
    let mut rng = rng_from_seed(seed);
    let gt = build_ground_truth(&cfg.base, &mut rng)?;
    let ds = sample_glm(&cfg, &gt, &mut rng)?;
    let raw = glm_fit(&ds.x, &ds.y, cfg.trials, spec.max_iter, spec.tol)?;
    let anon = anonymize(&ds, &gt.centers_s())?;
    let la = glm_fit(&anon.x_l, &anon.y, cfg.trials, spec.max_iter, spec.tol)?;
    let risks = glm_test_risks(&cfg, &gt, &[&raw.model.theta, &la.model.theta], &mut rng)?;
    let (a, b) = (risks[0], risks[1]);
    Ok(ReplicateOutcome {
        log_gain: (a.response_mse / b.response_mse).ln(),
        log_gain_prob: (a.probability_mse / b.probability_mse).ln(),
        risk_raw: a.response_mse,
        risk_la: b.response_mse,
        nonconverged: usize::from(!raw.converged) + usize::from(!la.converged),
    })
}

/// Average log-gain of the look-alike GLM over the raw GLM along the `r_s` grid.
pub fn glm_gain_experiment(spec: &GlmExperimentSpec, master: u64, exec: Execution) -> Result<Vec<GlmGainRow>> {
    spec.validate()?;
    let reps = spec.replicates;
    let tasks = spec.r_s_grid.len() * reps;
    let outcomes = map_indexed(tasks, exec, |t| {
        let (g, r) = (t / reps, t % reps);
        glm_replicate(spec, spec.r_s_grid[g], derive_seed(master, &[g as u64, r as u64]))
    });
    let mut rows = Vec::with_capacity(spec.r_s_grid.len());
    let mut it = outcomes.into_iter();
    for &r_s in &spec.r_s_grid {
        let mut lg = RunningStats::default();
        let mut lp = RunningStats::default();
        let mut raw = RunningStats::default();
        let mut la = RunningStats::default();
        let mut bad = 0;
        for o in it.by_ref().take(reps) {
            let o = o?;
            lg.push(o.log_gain);
            lp.push(o.log_gain_prob);
            raw.push(o.risk_raw);
            la.push(o.risk_la);
            bad += o.nonconverged;
        }
        rows.push(GlmGainRow {
            r_s,
            mean_log_gain: lg.mean(),
            stderr: lg.std_error(),
            replicates: reps,
            mean_log_gain_prob: lp.mean(),
            stderr_prob: lp.std_error(),
            risk_raw_mean: raw.mean(),
            risk_lookalike_mean: la.mean(),
            nonconverged: bad,
        });
    }
    Ok(rows)
}

pub fn write_glm_csv<W: Write>(rows: &[GlmGainRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
