//! Minimum-norm least squares on raw and anonymized designs.
//!
//! Designs follow the column-sample convention: a `d x n` matrix whose columns
//! are the feature vectors, so predictions are `design^T theta`.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::GroundTruth;
use crate::data::{anonymize, centers_for, CenterSource, Dataset};
use crate::error::{config_err, dim_err, Result};
use crate::linalg::{default_rcond, spectral_solve, Filter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    MinNorm,
    LookAlike,
    LookAlikeEstimated,
    Ridge,
    Glm,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::MinNorm => "min_norm",
            EstimatorKind::LookAlike => "look_alike",
            EstimatorKind::LookAlikeEstimated => "look_alike_estimated",
            EstimatorKind::Ridge => "ridge",
            EstimatorKind::Glm => "glm",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub theta: DVector<f64>,
    pub rank_used: usize,
    pub sigma_min_kept: f64,
    pub kind: EstimatorKind,
}

impl FittedModel {
    /// Write `index,coefficient` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "coefficient"])?;
        for (i, c) in self.theta.iter().enumerate() {
            w.write_record([i.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_design(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if design.ncols() != y.len() {
        return Err(dim_err(format!(
            "design has {} samples but y has {} entries",
            design.ncols(),
            y.len()
        )));
    }
    if design.ncols() == 0 {
        return Err(config_err("need at least one sample"));
    }
    Ok(())
}

/// `theta = (X X^T)^+ X y`, the least-squares solution of minimum norm.
///
/// Singular values of the design below `eps * max(n, d) * sigma_max` are
/// treated as zero.
pub fn min_norm_fit(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<FittedModel> {
    check_design(design, y)?;
    let (d, n) = design.shape();
    let sol = spectral_solve(
        &design.transpose(),
        y,
        Filter::Pinv {
            rcond: default_rcond(n, d),
        },
    )?;
    Ok(FittedModel {
        theta: sol.x,
        rank_used: sol.rank,
        sigma_min_kept: sol.sigma_min_kept,
        kind: EstimatorKind::MinNorm,
    })
}

/// Min-norm fit on the look-alike design built from `source` centers.
pub fn fit_look_alike(ds: &Dataset, gt: &GroundTruth, source: CenterSource) -> Result<FittedModel> {
    let centers = centers_for(source, ds, gt)?;
    fit_look_alike_with_centers(ds, &centers)
}

pub fn fit_look_alike_with_centers(ds: &Dataset, centers_s: &DMatrix<f64>) -> Result<FittedModel> {
    let anon = anonymize(ds, centers_s)?;
    let mut fit = min_norm_fit(&anon.x_l, &anon.y)?;
    fit.kind = EstimatorKind::LookAlike;
    Ok(fit)
}

/// Ridge estimate minimizing `(1/2n) |y - X^T theta|^2 + lambda |theta|^2`.
pub fn ridge_fit(design: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<FittedModel> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(config_err(format!("ridge penalty must be positive, got {lambda}")));
    }
    check_design(design, y)?;
    let n = design.ncols() as f64;
    let sol = spectral_solve(
        &design.transpose(),
        y,
        Filter::Shrink {
            shift: 2.0 * n * lambda,
        },
    )?;
    Ok(FittedModel {
        theta: sol.x,
        rank_used: sol.rank,
        sigma_min_kept: sol.sigma_min_kept,
        kind: EstimatorKind::Ridge,
    })
}
