//! Estimated clusterings, the error rate `delta_n`, and the pseudoinverse
//! perturbation experiment for the look-alike estimator.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{build_ground_truth, ProblemConfig};
use crate::data::{anonymize_with_labels, one_hot, sample_dataset, Dataset};
use crate::error::{config_err, dim_err, LabError, Result};
use crate::estimators::min_norm_fit;
use crate::exec::{derive_seed, map_indexed, rng_from_seed, Execution};
use crate::linalg::spectral_norm;
use crate::risk::risk_closed_form;

const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEstimate {
    /// Estimated sensitive centers, `p x k`.
    pub centers_s: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub delta_n: Option<f64>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
}

impl ClusterEstimate {
    /// `M_s Lambda`, the matrix whose column `i` is the center assigned to sample `i`.
    pub fn assigned_centers(&self) -> DMatrix<f64> {
        &self.centers_s * one_hot(&self.labels, self.centers_s.ncols())
    }

    /// Attach `delta_n` measured against the true assigned-center matrix.
    pub fn with_delta(mut self, truth: &DMatrix<f64>) -> Result<Self> {
        self.delta_n = Some(delta_rate(truth, &self.assigned_centers())?);
        Ok(self)
    }
}

fn sq_dist(xs: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    xs.column(i)
        .iter()
        .zip(centers.column(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn nearest(xs: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.ncols() {
        let d = sq_dist(xs, i, centers, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init<R: Rng + ?Sized>(xs: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let (p, n) = xs.shape();
    let mut centers = DMatrix::zeros(p, k);
    centers.set_column(0, &xs.column(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(xs, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.set_column(c, &xs.column(pick));
        for (i, di) in d2.iter_mut().enumerate() {
            *di = di.min(sq_dist(xs, i, &centers, c));
        }
    }
    centers
}

/// Lloyd's algorithm from a k-means++ start on the columns of `xs`.
///
/// Stops when the assignment no longer changes or after `max_iter` updates.
/// A cluster that loses all its points takes over the point farthest from
/// its current center.
pub fn kmeans<R: Rng + ?Sized>(
    xs: &DMatrix<f64>,
    k: usize,
    rng: &mut R,
    max_iter: usize,
) -> Result<ClusterEstimate> {
    let (p, n) = xs.shape();
    if k == 0 || k > n {
        return Err(config_err(format!("k-means needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    if max_iter == 0 {
        return Err(config_err("max_iter must be at least 1"));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Numerical("non-finite input to k-means".into()));
    }
    let mut centers = kmeans_pp_init(xs, k, rng);
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(xs, i, &centers).0).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = DMatrix::zeros(p, k);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let mut col = sums.column_mut(l);
            col += xs.column(i);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.set_column(c, &(sums.column(c) / counts[c] as f64));
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .map(|i| (i, sq_dist(xs, i, &centers, labels[i])))
                    .fold((None, -1.0), |best, (i, d)| if d > best.1 { (Some(i), d) } else { best })
                    .0;
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    centers.set_column(c, &xs.column(i));
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(xs, i, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(xs, i, &centers, l))
        .sum();
    Ok(ClusterEstimate {
        centers_s: centers,
        labels,
        delta_n: None,
        iterations,
        inertia,
    })
}

/// Best of `restarts` independent k-means runs; ties go to the lowest restart index.
pub fn kmeans_restarts(
    xs: &DMatrix<f64>,
    k: usize,
    restarts: usize,
    seed: u64,
    max_iter: usize,
    exec: Execution,
) -> Result<ClusterEstimate> {
    if restarts == 0 {
        return Err(config_err("need at least one k-means restart"));
    }
    let runs = map_indexed(restarts, exec, |r| {
        kmeans(xs, k, &mut rng_from_seed(derive_seed(seed, &[r as u64])), max_iter)
    });
    let mut best: Option<ClusterEstimate> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `|A - B|_2 / sqrt(n)` for `p x n` assigned-center matrices.
pub fn delta_rate(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(dim_err(format!(
            "shape mismatch: {:?} vs {:?}",
            truth.shape(),
            estimate.shape()
        )));
    }
    let n = truth.ncols();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(spectral_norm(&(truth - estimate))? / (n as f64).sqrt())
}

/// `phi * max(1/s_a^2, 1/s_b^2) * diff_norm` with `phi` the golden ratio: a
/// bound on `|A^+ - B^+|_2` given the smallest nonzero singular values.
pub fn pinv_perturbation_bound(sigma_min_a: f64, sigma_min_b: f64, diff_norm: f64) -> Result<f64> {
    if !(sigma_min_a > 0.0) || !(sigma_min_b > 0.0) {
        return Err(config_err(format!(
            "smallest singular values must be positive, got {sigma_min_a} and {sigma_min_b}"
        )));
    }
    let s = sigma_min_a.min(sigma_min_b);
    Ok(GOLDEN_RATIO * diff_norm / (s * s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionCondition {
    ConditionI,
    ConditionII,
    Neither,
}

impl CorruptionCondition {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionCondition::ConditionI => "condition_i",
            CorruptionCondition::ConditionII => "condition_ii",
            CorruptionCondition::Neither => "neither",
        }
    }
}

/// Largest `delta` for which the perturbation result applies at this aspect ratio.
pub fn corruption_threshold(psi_d: f64, psi_p: f64) -> Option<f64> {
    let gap = psi_d - psi_p;
    if (0.0..0.5).contains(&gap) {
        Some((1.0 - gap).sqrt() - gap.sqrt())
    } else if gap > 2.0 {
        Some((gap - 1.0).sqrt() - 1.0)
    } else {
        None
    }
}

pub fn corruption_condition(psi_d: f64, psi_p: f64, delta: f64) -> CorruptionCondition {
    let gap = psi_d - psi_p;
    match corruption_threshold(psi_d, psi_p) {
        Some(t) if delta < t && gap < 0.5 => CorruptionCondition::ConditionI,
        Some(t) if delta < t => CorruptionCondition::ConditionII,
        _ => CorruptionCondition::Neither,
    }
}

/// Reassign exactly `round(rate * n)` distinct samples to a different cluster,
/// chosen uniformly among the other `k - 1`.
pub fn flip_labels<R: Rng + ?Sized>(labels: &[usize], k: usize, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(config_err(format!("flip rate must lie in [0, 1], got {rate}")));
    }
    let n = labels.len();
    let count = (rate * n as f64).round() as usize;
    if count > 0 && k < 2 {
        return Err(config_err("cannot flip labels with a single cluster"));
    }
    let mut out = labels.to_vec();
    for i in sample_indices(rng, n, count) {
        let shift = rng.random_range(1..k);
        out[i] = (labels[i] + shift) % k;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterExpSpec {
    pub base: ProblemConfig,
    pub flip_rates: Vec<f64>,
    pub replicates: usize,
    /// Also run k-means on the sensitive block and report it as an extra row.
    #[serde(default)]
    pub include_kmeans: bool,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_max_iter")]
    pub kmeans_max_iter: usize,
}

fn default_restarts() -> usize {
    8
}

fn default_max_iter() -> usize {
    100
}

impl ClusterExpSpec {
    /// Instance with `psi_d - psi_p = 0.25`, inside the small-gap condition.
    ///
    /// Flipping a fraction `q` of labels gives `delta_n <= mu sqrt(2q)`, so the
    /// largest rate keeps `delta_n` below the corruption threshold (about 0.366).
    pub fn default_small_gap() -> Self {
        ClusterExpSpec {
            base: ProblemConfig {
                n: 480,
                d: 200,
                p: 80,
                k: 3,
                mu: 2.0,
                sigma: 1.0,
                r_s: 1.0,
                r_ns: 1.0,
                rho: 0.3,
                priors: Default::default(),
                seed: 0,
                pole_margin: crate::config::DEFAULT_POLE_MARGIN,
            },
            flip_rates: vec![0.0, 0.0025, 0.005, 0.0075, 0.01, 0.0125, 0.015],
            replicates: 10,
            include_kmeans: false,
            kmeans_restarts: default_restarts(),
            kmeans_max_iter: default_max_iter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.flip_rates.is_empty() {
            return Err(config_err("flip_rates must not be empty"));
        }
        if self.replicates == 0 {
            return Err(config_err("replicates must be at least 1"));
        }
        if let Some(bad) = self.flip_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(config_err(format!("flip rate {bad} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterExpRow {
    /// `flip` for corrupted true labels, `kmeans` for an estimated clustering.
    pub method: String,
    pub flip_rate: f64,
    pub replicate: usize,
    pub delta_n: f64,
    pub condition: CorruptionCondition,
    pub risk_lookalike_true: f64,
    pub risk_lookalike_estimated: f64,
    pub theta_gap: f64,
    pub y_norm: f64,
    pub bound: f64,
}

impl ClusterExpRow {
    pub fn risk_gap(&self) -> f64 {
        self.risk_lookalike_estimated - self.risk_lookalike_true
    }

    /// Whether `|theta_L - theta~_L| <= bound * |y|`, with a relative slack for rounding.
    pub fn bound_holds(&self) -> bool {
        self.theta_gap <= self.bound * self.y_norm * (1.0 + 1e-9) + 1e-12
    }
}

struct Fitted {
    theta: DVector<f64>,
    sigma_min: f64,
}

fn fit_with(ds: &Dataset, centers: &DMatrix<f64>, labels: &[usize]) -> Result<Fitted> {
    let anon = anonymize_with_labels(ds, centers, labels)?;
    let fit = min_norm_fit(&anon.x_l, &anon.y)?;
    Ok(Fitted {
        theta: fit.theta,
        sigma_min: fit.sigma_min_kept,
    })
}

fn replicate_rows(spec: &ClusterExpSpec, master: u64, rep: usize) -> Result<Vec<ClusterExpRow>> {
    let cfg = &spec.base;
    let mut rng = rng_from_seed(derive_seed(master, &[rep as u64]));
    let gt = build_ground_truth(cfg, &mut rng)?;
    let ds = sample_dataset(cfg, &gt, &mut rng)?;
    let centers = gt.centers_s();
    let truth = &centers * ds.membership();
    let reference = fit_with(&ds, &centers, &ds.labels)?;
    let risk_true = risk_closed_form(&reference.theta, &gt, cfg)?;
    let y_norm = ds.y.norm();
    let (psi_d, psi_p) = (cfg.psi_d(), cfg.psi_p());

    let row = |method: &str, rate: f64, est_centers: &DMatrix<f64>, labels: &[usize]| -> Result<ClusterExpRow> {
        let est = fit_with(&ds, est_centers, labels)?;
        let est_assigned = est_centers * one_hot(labels, est_centers.ncols());
        let delta_n = delta_rate(&truth, &est_assigned)?;
        // X_L and X~_L differ only in the sensitive block
        let diff_norm = spectral_norm(&(&truth - &est_assigned))?;
        Ok(ClusterExpRow {
            method: method.to_string(),
            flip_rate: rate,
            replicate: rep,
            delta_n,
            condition: corruption_condition(psi_d, psi_p, delta_n),
            risk_lookalike_true: risk_true,
            risk_lookalike_estimated: risk_closed_form(&est.theta, &gt, cfg)?,
            theta_gap: (&reference.theta - &est.theta).norm(),
            y_norm,
            bound: pinv_perturbation_bound(reference.sigma_min, est.sigma_min, diff_norm)?,
        })
    };

    let mut rows = Vec::with_capacity(spec.flip_rates.len() + 1);
    for (f, &rate) in spec.flip_rates.iter().enumerate() {
        let mut frng = rng_from_seed(derive_seed(master, &[rep as u64, f as u64 + 1]));
        let labels = flip_labels(&ds.labels, cfg.k, rate, &mut frng)?;
        rows.push(row("flip", rate, &centers, &labels)?);
    }
    if spec.include_kmeans {
        let km = kmeans_restarts(
            &ds.x_s(),
            cfg.k,
            spec.kmeans_restarts,
            derive_seed(master, &[rep as u64, 0]),
            spec.kmeans_max_iter,
            Execution::Sequential,
        )?;
        rows.push(row("kmeans", f64::NAN, &km.centers_s, &km.labels)?);
    }
    Ok(rows)
}

/// Corrupt true labels at each flip rate and compare the look-alike fits.
///
/// Flipped samples keep the true centers, so `delta_n` measures label error
/// alone. Each replicate draws one ground truth and dataset shared by all
/// flip rates.
pub fn run_cluster_experiment(spec: &ClusterExpSpec, master: u64, exec: Execution) -> Result<Vec<ClusterExpRow>> {
    spec.validate()?;
    let per_rep = map_indexed(spec.replicates, exec, |r| replicate_rows(spec, master, r));
    let mut rows = Vec::new();
    for r in per_rep {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Smallest `C` with `risk gap <= C * delta_n` over rows with `delta_n > 0`,
/// together with the least-squares slope through the origin.
pub fn linear_envelope(rows: &[ClusterExpRow]) -> (f64, f64) {
    let (mut env, mut sxy, mut sxx) = (0.0f64, 0.0, 0.0);
    for r in rows.iter().filter(|r| r.delta_n > 0.0) {
        env = env.max(r.risk_gap() / r.delta_n);
        sxy += r.delta_n * r.risk_gap();
        sxx += r.delta_n * r.delta_n;
    }
    (env, if sxx > 0.0 { sxy / sxx } else { 0.0 })
}

pub fn write_cluster_csv<W: Write>(rows: &[ClusterExpRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "flip_rate",
        "replicate",
        "delta_n",
        "condition",
        "risk_lookalike_true",
        "risk_lookalike_estimated",
        "theta_gap",
        "y_norm",
        "bound",
        "bound_holds",
    ])?;
    for r in rows {
        let rate = if r.flip_rate.is_nan() {
            String::new()
        } else {
            r.flip_rate.to_string()
        };
        w.write_record([
            r.method.clone(),
            rate,
            r.replicate.to_string(),
            r.delta_n.to_string(),
            r.condition.as_str().to_string(),
            r.risk_lookalike_true.to_string(),
            r.risk_lookalike_estimated.to_string(),
            r.theta_gap.to_string(),
            r.y_norm.to_string(),
            r.bound.to_string(),
            r.bound_holds().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
