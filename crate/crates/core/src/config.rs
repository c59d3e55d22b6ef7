//! Problem parameters, ground-truth construction and regime classification.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, LabError, Result};

pub const DEFAULT_POLE_MARGIN: f64 = 0.02;
const PRIOR_SUM_TOL: f64 = 1e-12;

fn default_pole_margin() -> f64 {
    DEFAULT_POLE_MARGIN
}

/// Cluster prior probabilities. An absent weight list means balanced priors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Priors {
    pub fn balanced() -> Self {
        Priors { weights: None }
    }

    pub fn explicit(weights: Vec<f64>) -> Self {
        Priors {
            weights: Some(weights),
        }
    }

    /// Resolve to a probability vector of length `k`.
    pub fn resolve(&self, k: usize) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / k as f64; k],
        }
    }
}

/// Scalar parameters of the mixture-plus-linear-response model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub mu: f64,
    pub sigma: f64,
    pub r_s: f64,
    pub r_ns: f64,
    pub rho: f64,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pole_margin")]
    pub pole_margin: f64,
}

impl ProblemConfig {
    /// Reference setting with d = 500, p = 200 and k = 3 at sample size `n`.
    pub fn reference(n: usize) -> Self {
        ProblemConfig {
            n,
            d: 500,
            p: 200,
            k: 3,
            mu: 5.0,
            sigma: 1.0,
            r_s: 1.0,
            r_ns: 2.0,
            rho: 0.3,
            priors: Priors::balanced(),
            seed: 0,
            pole_margin: DEFAULT_POLE_MARGIN,
        }
    }

    pub fn priors(&self) -> Vec<f64> {
        self.priors.resolve(self.k)
    }

    pub fn psi_d(&self) -> f64 {
        self.d as f64 / self.n as f64
    }

    pub fn psi_p(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    pub fn regime(&self) -> AsymptoticRegime {
        AsymptoticRegime::classify(self.psi_d(), self.psi_p(), self.pole_margin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_err("n must be positive"));
        }
        if self.d == 0 {
            return Err(config_err("d must be positive"));
        }
        if self.p > self.d {
            return Err(config_err(format!("p = {} exceeds d = {}", self.p, self.d)));
        }
        if self.k == 0 {
            return Err(config_err("k must be at least 1"));
        }
        if self.k > self.n {
            return Err(config_err(format!("k = {} exceeds n = {}", self.k, self.n)));
        }
        if self.mu > 0.0 && self.k > self.p {
            return Err(config_err(format!(
                "k = {} orthonormal centers do not fit in p = {} sensitive dimensions",
                self.k, self.p
            )));
        }
        for (name, v) in [
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("r_s", self.r_s),
            ("r_ns", self.r_ns),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(config_err(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.p == 0 && self.r_s > 0.0 {
            return Err(config_err("r_s must be 0 when there are no sensitive features"));
        }
        if self.p == self.d && self.r_ns > 0.0 {
            return Err(config_err("r_ns must be 0 when every feature is sensitive"));
        }
        if !(self.pole_margin > 0.0 && self.pole_margin < 0.5) {
            return Err(config_err(format!(
                "pole_margin must lie in (0, 0.5), got {}",
                self.pole_margin
            )));
        }
        validate_priors(&self.priors(), self.k)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ProblemConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

pub(crate) fn validate_priors(priors: &[f64], k: usize) -> Result<()> {
    if priors.len() != k {
        return Err(config_err(format!(
            "priors has {} entries but k = {k}",
            priors.len()
        )));
    }
    if priors.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(config_err("priors must be finite and nonnegative"));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > PRIOR_SUM_TOL {
        return Err(config_err(format!("priors sum to {total}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Under,
    Over,
    Pole,
}

impl Regime {
    /// Classify an effective aspect ratio against the interpolation threshold at 1.
    pub fn classify(ratio: f64, margin: f64) -> Regime {
        if ratio < 1.0 - margin {
            Regime::Under
        } else if ratio > 1.0 + margin {
            Regime::Over
        } else {
            Regime::Pole
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Under => "under",
            Regime::Over => "over",
            Regime::Pole => "pole",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRegime {
    pub psi_d: f64,
    pub psi_p: f64,
    pub regime_lookalike: Regime,
    pub regime_minnorm: Regime,
}

impl AsymptoticRegime {
    pub fn classify(psi_d: f64, psi_p: f64, margin: f64) -> Self {
        AsymptoticRegime {
            psi_d,
            psi_p,
            regime_lookalike: Regime::classify(psi_d - psi_p, margin),
            regime_minnorm: Regime::classify(psi_d, margin),
        }
    }
}

/// How the cluster-center matrix was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CenterStructure {
    /// `M = [mu * U_s; 0]` with orthonormal `U_s`.
    Orthogonal { mu: f64 },
    /// Arbitrary caller-supplied centers.
    General,
}

/// True model and cluster constellation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Full coefficient vector, sensitive block first.
    pub theta0: DVector<f64>,
    /// Orthonormal left singular frame of the sensitive centers (p x r).
    pub u_s: DMatrix<f64>,
    /// Cluster centers as columns (d x k).
    pub centers: DMatrix<f64>,
    pub p: usize,
    pub structure: CenterStructure,
}

impl GroundTruth {
    pub fn d(&self) -> usize {
        self.theta0.len()
    }

    pub fn k(&self) -> usize {
        self.centers.ncols()
    }

    pub fn theta0_s(&self) -> DVector<f64> {
        self.theta0.rows(0, self.p).into_owned()
    }

    pub fn theta0_ns(&self) -> DVector<f64> {
        self.theta0.rows(self.p, self.d() - self.p).into_owned()
    }

    /// Sensitive rows of the center matrix (p x k).
    pub fn centers_s(&self) -> DMatrix<f64> {
        self.centers.rows(0, self.p).into_owned()
    }

    /// `U_s^T theta0_s`, the alignment of the sensitive model with the centers.
    pub fn alignment(&self) -> DVector<f64> {
        self.u_s.transpose() * self.theta0_s()
    }

    /// Expert constructor taking an arbitrary center matrix verbatim.
    ///
    /// `U_s` is taken from the left singular vectors of the sensitive block,
    /// keeping directions above `1e-12 * sigma_max`.
    pub fn from_parts(
        theta0_s: DVector<f64>,
        theta0_ns: DVector<f64>,
        centers: DMatrix<f64>,
    ) -> Result<Self> {
        let p = theta0_s.len();
        let d = p + theta0_ns.len();
        if centers.nrows() != d {
            return Err(dim_err(format!(
                "centers have {} rows, expected d = {d}",
                centers.nrows()
            )));
        }
        let m_s = centers.rows(0, p).into_owned();
        let u_s = if p == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let svd = m_s.clone().svd(true, false);
            let u = svd.u.expect("requested U");
            let smax = svd.singular_values.max();
            let keep: Vec<usize> = (0..svd.singular_values.len())
                .filter(|&i| smax > 0.0 && svd.singular_values[i] > 1e-12 * smax)
                .collect();
            DMatrix::from_fn(p, keep.len(), |i, j| u[(i, keep[j])])
        };
        let mut theta0 = DVector::zeros(d);
        theta0.rows_mut(0, p).copy_from(&theta0_s);
        theta0.rows_mut(p, d - p).copy_from(&theta0_ns);
        Ok(GroundTruth {
            theta0,
            u_s,
            centers,
            p,
            structure: CenterStructure::General,
        })
    }
}

fn gaussian_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed `rows x cols` frame with orthonormal columns.
pub fn random_orthonormal_frame<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign-fix so the distribution is exactly Haar
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Scaled unit vector along `v`, or `None` if `v` is numerically zero relative to `scale`.
fn normalized_to(v: DVector<f64>, norm: f64, scale: f64) -> Option<DVector<f64>> {
    let len = v.norm();
    if len <= 1e-8 * scale.max(f64::MIN_POSITIVE) {
        None
    } else {
        Some(v * (norm / len))
    }
}

/// Build `theta0` and the orthogonal, equal-energy center constellation.
pub fn build_ground_truth<R: Rng + ?Sized>(cfg: &ProblemConfig, rng: &mut R) -> Result<GroundTruth> {
    cfg.validate()?;
    let (d, p, k) = (cfg.d, cfg.p, cfg.k);
    if k > p && p > 0 {
        return Err(config_err(format!("k = {k} exceeds p = {p}")));
    }

    let u_s = if p == 0 {
        DMatrix::zeros(0, k)
    } else {
        random_orthonormal_frame(p, k, rng)
    };
    let mut centers = DMatrix::zeros(d, k);
    centers.rows_mut(0, p).copy_from(&(&u_s * cfg.mu));

    let theta0_s = if p == 0 {
        DVector::zeros(0)
    } else {
        let proj = &u_s * u_s.transpose();
        let mut attempt = 0;
        loop {
            let z1 = gaussian_vector(p, rng);
            let z2 = gaussian_vector(p, rng);
            let mut theta = DVector::zeros(p);
            let mut ok = true;
            if cfg.rho > 0.0 {
                match normalized_to(&proj * &z1, cfg.r_s * cfg.rho.sqrt(), z1.norm()) {
                    Some(v) => theta += v,
                    None => ok = false,
                }
            }
            if cfg.rho < 1.0 {
                let perp = &z2 - &proj * &z2;
                match normalized_to(perp, cfg.r_s * (1.0 - cfg.rho).sqrt(), z2.norm()) {
                    Some(v) => theta += v,
                    None => ok = false,
                }
            }
            if ok {
                break theta;
            }
            attempt += 1;
            if attempt >= 2 {
                return Err(LabError::Numerical(format!(
                    "cannot place theta0_s with rho = {} when p = {p} and k = {k}",
                    cfg.rho
                )));
            }
        }
    };

    let theta0_ns = normalized_to(gaussian_vector(d - p, rng), cfg.r_ns, 1.0)
        .unwrap_or_else(|| DVector::zeros(d - p));

    let mut theta0 = DVector::zeros(d);
    theta0.rows_mut(0, p).copy_from(&theta0_s);
    theta0.rows_mut(p, d - p).copy_from(&theta0_ns);
    Ok(GroundTruth {
        theta0,
        u_s,
        centers,
        p,
        structure: CenterStructure::Orthogonal { mu: cfg.mu },
    })
}
