//! Closed-form asymptotic risks of the min-norm and look-alike estimators in
//! the proportional regime `d/n -> psi_d`, `p/n -> psi_p`, and the gain
//! `Delta = Risk(min-norm) / Risk(look-alike)` built from them.
//!
//! The overparametrized formulas assume orthogonal, equal-energy sensitive
//! centers (`M_s = mu U_s`, no non-sensitive cluster structure). They take the
//! alignment vector `U_s^T theta0_s` explicitly because with unbalanced priors
//! the risk depends on its direction, not only on its norm.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{validate_priors, ProblemConfig, Regime, DEFAULT_POLE_MARGIN};
use crate::error::{config_err, dim_err, LabError, Result};

const ALIGNMENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    pub psi_d: f64,
    pub psi_p: f64,
    pub sigma: f64,
    pub r_s: f64,
    pub r_ns: f64,
    pub rho: f64,
    pub mu: f64,
    pub priors: Vec<f64>,
    pub pole_margin: f64,
}

impl TheoryParams {
    pub fn from_config(cfg: &ProblemConfig) -> Self {
        TheoryParams {
            psi_d: cfg.psi_d(),
            psi_p: cfg.psi_p(),
            sigma: cfg.sigma,
            r_s: cfg.r_s,
            r_ns: cfg.r_ns,
            rho: cfg.rho,
            mu: cfg.mu,
            priors: cfg.priors(),
            pole_margin: cfg.pole_margin,
        }
    }

    /// Balanced-prior parameters with `k` clusters.
    pub fn balanced(psi_d: f64, psi_p: f64, k: usize) -> Self {
        TheoryParams {
            psi_d,
            psi_p,
            sigma: 1.0,
            r_s: 1.0,
            r_ns: 1.0,
            rho: 0.0,
            mu: 0.0,
            priors: vec![1.0 / k as f64; k],
            pole_margin: DEFAULT_POLE_MARGIN,
        }
    }

    pub fn k(&self) -> usize {
        self.priors.len()
    }

    pub fn snr(&self) -> f64 {
        self.r_s / self.sigma
    }

    pub fn is_balanced(&self) -> bool {
        let k = self.k() as f64;
        self.priors.iter().all(|&p| (p - 1.0 / k).abs() <= 1e-12)
    }

    /// `psi_d - psi_p`, the effective aspect ratio seen by the look-alike fit.
    pub fn gap(&self) -> f64 {
        self.psi_d - self.psi_p
    }

    pub fn regime_lookalike(&self) -> Regime {
        Regime::classify(self.gap(), self.pole_margin)
    }

    pub fn regime_minnorm(&self) -> Regime {
        Regime::classify(self.psi_d, self.pole_margin)
    }

    /// Alignment vector with the same weight on every cluster direction.
    pub fn balanced_alignment(&self) -> DVector<f64> {
        let k = self.k();
        DVector::from_element(k, (self.rho / k as f64).sqrt() * self.r_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.psi_d > 0.0) || !(self.psi_p >= 0.0) || self.psi_p > self.psi_d {
            return Err(config_err(format!(
                "need 0 <= psi_p <= psi_d and psi_d > 0, got psi_d = {}, psi_p = {}",
                self.psi_d, self.psi_p
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(config_err(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("r_s", self.r_s),
            ("r_ns", self.r_ns),
            ("mu", self.mu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        validate_priors(&self.priors, self.priors.len())?;
        if self.priors.is_empty() {
            return Err(config_err("need at least one cluster"));
        }
        Ok(())
    }

    fn check_alignment(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.k() {
            return Err(dim_err(format!(
                "alignment vector has length {} but there are {} clusters",
                v.len(),
                self.k()
            )));
        }
        let target = self.rho * self.r_s * self.r_s;
        if (v.norm_squared() - target).abs() > ALIGNMENT_TOL * (1.0 + target) {
            return Err(config_err(format!(
                "|U_s^T theta0_s|^2 = {} but rho * r_s^2 = {target}",
                v.norm_squared()
            )));
        }
        Ok(())
    }

    /// `I + mu^2 diag(pi)` as its diagonal.
    fn center_second_moment(&self) -> Vec<f64> {
        self.priors.iter().map(|&p| 1.0 + self.mu * self.mu * p).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryPrediction {
    pub risk: f64,
    /// Fixed-point vector of the overparametrized characterizations.
    pub alpha: Option<DVector<f64>>,
    pub gamma0_sq: Option<f64>,
    pub regime: Regime,
}

fn pole_guard(what: &'static str, ratio: f64, margin: f64) -> Result<Regime> {
    match Regime::classify(ratio, margin) {
        Regime::Pole => Err(LabError::Pole { what, ratio, margin }),
        r => Ok(r),
    }
}

/// Look-alike risk below the interpolation threshold:
/// `(sigma^2 + r_s^2) / (1 - (psi_d - psi_p)) - rho r_s^2`.
///
/// Priors, `r_ns` and the center energy drop out, except that `mu = 0`
/// removes the sensitive centers altogether, so no part of `theta0_s` is
/// recoverable and the `rho` term vanishes.
pub fn risk_lookalike_under(tp: &TheoryParams) -> Result<f64> {
    tp.validate()?;
    let gap = tp.gap();
    match pole_guard("psi_d - psi_p", gap, tp.pole_margin)? {
        Regime::Under => {}
        _ => {
            return Err(config_err(format!(
                "underparametrized look-alike formula needs psi_d - psi_p < 1, got {gap}"
            )))
        }
    }
    let rho = if tp.mu == 0.0 { 0.0 } else { tp.rho };
    let rs2 = tp.r_s * tp.r_s;
    Ok((tp.sigma * tp.sigma + rs2) / (1.0 - gap) - rho * rs2)
}

/// Look-alike risk above the interpolation threshold.
pub fn risk_lookalike_over(tp: &TheoryParams, alignment: &DVector<f64>) -> Result<TheoryPrediction> {
    tp.validate()?;
    tp.check_alignment(alignment)?;
    let gap = tp.gap();
    match pole_guard("psi_d - psi_p", gap, tp.pole_margin)? {
        Regime::Over => {}
        _ => {
            return Err(config_err(format!(
                "overparametrized look-alike formula needs psi_d - psi_p > 1, got {gap}"
            )))
        }
    }
    let excess = gap - 1.0;
    let mu2 = tp.mu * tp.mu;
    let alpha = DVector::from_iterator(
        tp.k(),
        alignment
            .iter()
            .zip(&tp.priors)
            .map(|(v, p)| v / (1.0 + mu2 * p / excess)),
    );
    let weighted: f64 = alpha.iter().zip(&tp.priors).map(|(a, p)| p * a * a).sum();
    let gamma0_sq = (tp.sigma * tp.sigma + tp.r_s * tp.r_s + mu2 * weighted) / excess
        + (1.0 - 1.0 / gap) * tp.r_ns * tp.r_ns;
    if gamma0_sq < 0.0 {
        return Err(LabError::Numerical(format!("negative gamma0^2 = {gamma0_sq}")));
    }
    let quad: f64 = alpha
        .iter()
        .zip(tp.center_second_moment())
        .map(|(a, m)| m * a * a)
        .sum();
    let risk = tp.sigma * tp.sigma + (1.0 - tp.rho) * tp.r_s * tp.r_s + gamma0_sq + quad;
    Ok(TheoryPrediction {
        risk,
        alpha: Some(alpha),
        gamma0_sq: Some(gamma0_sq),
        regime: Regime::Over,
    })
}

/// Look-alike risk in whichever regime `psi_d - psi_p` falls.
pub fn risk_lookalike(tp: &TheoryParams, alignment: &DVector<f64>) -> Result<TheoryPrediction> {
    match pole_guard("psi_d - psi_p", tp.gap(), tp.pole_margin)? {
        Regime::Under => Ok(TheoryPrediction {
            risk: risk_lookalike_under(tp)?,
            alpha: None,
            gamma0_sq: None,
            regime: Regime::Under,
        }),
        _ => risk_lookalike_over(tp, alignment),
    }
}

/// Risk of the min-norm estimator on the raw features.
///
/// Below the threshold this is `sigma^2 / (1 - psi_d)` regardless of every
/// other parameter.
pub fn risk_minnorm(tp: &TheoryParams, alignment: &DVector<f64>) -> Result<TheoryPrediction> {
    tp.validate()?;
    let psi = tp.psi_d;
    let s2 = tp.sigma * tp.sigma;
    match pole_guard("psi_d", psi, tp.pole_margin)? {
        Regime::Under => Ok(TheoryPrediction {
            risk: s2 / (1.0 - psi),
            alpha: None,
            gamma0_sq: None,
            regime: Regime::Under,
        }),
        _ => {
            tp.check_alignment(alignment)?;
            let excess = psi - 1.0;
            let moment = tp.center_second_moment();
            let alpha = DVector::from_iterator(
                tp.k(),
                alignment
                    .iter()
                    .zip(&moment)
                    .map(|(v, m)| v / (1.0 + m / excess)),
            );
            let quad: f64 = alpha.iter().zip(&moment).map(|(a, m)| m * a * a).sum();
            let gamma0_sq = (s2 + quad) / excess
                + (1.0 - 1.0 / psi)
                    * ((1.0 - tp.rho) * tp.r_s * tp.r_s + tp.r_ns * tp.r_ns);
            Ok(TheoryPrediction {
                risk: s2 + gamma0_sq + quad,
                alpha: Some(alpha),
                gamma0_sq: Some(gamma0_sq),
                regime: Regime::Over,
            })
        }
    }
}

/// Risk of regressing on the non-sensitive block alone (the look-alike
/// model when the sensitive centers vanish).
pub fn misspecified_lookalike_risk(tp: &TheoryParams) -> Result<f64> {
    let gap = tp.gap();
    let base = tp.sigma * tp.sigma + tp.r_s * tp.r_s;
    match pole_guard("psi_d - psi_p", gap, tp.pole_margin)? {
        Regime::Under => Ok(base / (1.0 - gap)),
        _ => Ok((1.0 + 1.0 / (gap - 1.0)) * base + (1.0 - 1.0 / gap) * tp.r_ns * tp.r_ns),
    }
}

/// Residuals of the overparametrized look-alike fixed-point relations at `pred`:
/// `|(I + mu^2 diag(pi)/(gap-1)) alpha - v|_inf` and the `gamma0^2` equation.
pub fn lookalike_over_residuals(
    tp: &TheoryParams,
    alignment: &DVector<f64>,
    pred: &TheoryPrediction,
) -> Option<(f64, f64)> {
    let alpha = pred.alpha.as_ref()?;
    let g0 = pred.gamma0_sq?;
    let excess = tp.gap() - 1.0;
    let mu2 = tp.mu * tp.mu;
    let a_res = alpha
        .iter()
        .zip(&tp.priors)
        .zip(alignment.iter())
        .map(|((a, p), v)| ((1.0 + mu2 * p / excess) * a - v).abs())
        .fold(0.0, f64::max);
    let weighted: f64 = alpha.iter().zip(&tp.priors).map(|(a, p)| p * a * a).sum();
    let g_res = (g0
        - (tp.sigma * tp.sigma + tp.r_s * tp.r_s + mu2 * weighted) / excess
        - (1.0 - 1.0 / tp.gap()) * tp.r_ns * tp.r_ns)
        .abs();
    Some((a_res, g_res))
}

/// Same as [`lookalike_over_residuals`] for the overparametrized min-norm relations.
pub fn minnorm_over_residuals(
    tp: &TheoryParams,
    alignment: &DVector<f64>,
    pred: &TheoryPrediction,
) -> Option<(f64, f64)> {
    let alpha = pred.alpha.as_ref()?;
    let g0 = pred.gamma0_sq?;
    let excess = tp.psi_d - 1.0;
    let moment = tp.center_second_moment();
    let a_res = alpha
        .iter()
        .zip(&moment)
        .zip(alignment.iter())
        .map(|((a, m), v)| ((1.0 + m / excess) * a - v).abs())
        .fold(0.0, f64::max);
    let quad: f64 = alpha.iter().zip(&moment).map(|(a, m)| m * a * a).sum();
    let g_res = (g0
        - (tp.sigma * tp.sigma + quad) / excess
        - (1.0 - 1.0 / tp.psi_d) * ((1.0 - tp.rho) * tp.r_s * tp.r_s + tp.r_ns * tp.r_ns))
        .abs();
    Some((a_res, g_res))
}

/// Largest squared SNR for which the look-alike model is guaranteed to win
/// when `psi_d > 1 > psi_d - psi_p`.
pub fn gain_threshold_case2(psi_d: f64, psi_p: f64) -> Result<f64> {
    if !(psi_d > 1.0) || !(psi_d - psi_p < 1.0) || psi_p > psi_d || psi_p < 0.0 {
        return Err(config_err(format!(
            "threshold defined for psi_d > 1 and 0 <= psi_d - psi_p < 1, got psi_d = {psi_d}, psi_p = {psi_p}"
        )));
    }
    let inv_gap = 1.0 / (1.0 - psi_d + psi_p);
    Ok((1.0 + 1.0 / (psi_d - 1.0) - inv_gap) / (inv_gap + 1.0 / psi_d - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainCase {
    /// Both estimators underparametrized.
    BothUnder,
    /// Look-alike underparametrized, min-norm overparametrized.
    Mixed,
    /// Both overparametrized.
    BothOver,
}

impl GainCase {
    pub fn number(self) -> u8 {
        match self {
            GainCase::BothUnder => 1,
            GainCase::Mixed => 2,
            GainCase::BothOver => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainPrediction {
    pub case: GainCase,
    pub delta: f64,
    pub risk_minnorm: f64,
    pub risk_lookalike: f64,
}

/// Predicted gain of the look-alike estimator over min-norm.
pub fn gain_theory(tp: &TheoryParams, alignment: &DVector<f64>) -> Result<GainPrediction> {
    let la = pole_guard("psi_d - psi_p", tp.gap(), tp.pole_margin)?;
    let mn = pole_guard("psi_d", tp.psi_d, tp.pole_margin)?;
    let case = match (la, mn) {
        (Regime::Under, Regime::Under) => GainCase::BothUnder,
        (Regime::Under, Regime::Over) => GainCase::Mixed,
        (Regime::Over, Regime::Over) => GainCase::BothOver,
        _ => {
            return Err(config_err(
                "look-alike overparametrized while min-norm is not: psi_p must be negative",
            ))
        }
    };
    let risk_lookalike = risk_lookalike(tp, alignment)?.risk;
    let risk_minnorm = risk_minnorm(tp, alignment)?.risk;
    Ok(GainPrediction {
        case,
        delta: crate::risk::gain(risk_minnorm, risk_lookalike)?,
        risk_minnorm,
        risk_lookalike,
    })
}

/// Explicit both-underparametrized gain as a function of the SNR.
pub fn case1_gain(psi_d: f64, psi_p: f64, snr: f64, rho: f64) -> f64 {
    let s2 = snr * snr;
    (1.0 / (1.0 - psi_d)) / ((1.0 + s2) / (1.0 - psi_d + psi_p) - rho * s2)
}

/// Gain as SNR -> 0 with both estimators underparametrized.
pub fn case1_low_snr_limit(psi_d: f64, psi_p: f64) -> f64 {
    (1.0 - psi_d + psi_p) / (1.0 - psi_d)
}

/// Gain as `r_ns -> infinity` with both estimators overparametrized.
pub fn case3_large_rns_limit(psi_d: f64, psi_p: f64) -> f64 {
    (1.0 - 1.0 / psi_d) / (1.0 - 1.0 / (psi_d - psi_p))
}
