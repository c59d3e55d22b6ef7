//! Mixture-model sampling and the look-alike anonymization transform.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{GroundTruth, ProblemConfig};
use crate::error::{config_err, dim_err, LabError, Result};

/// Training sample with features stored column-wise (d x n).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
    /// Number of leading sensitive feature rows.
    pub p: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    /// One-hot membership matrix (k x n).
    pub fn membership(&self) -> DMatrix<f64> {
        one_hot(&self.labels, self.k)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Sensitive rows of the features (p x n).
    pub fn x_s(&self) -> DMatrix<f64> {
        self.x.rows(0, self.p).into_owned()
    }

    /// Write one row per sample: `label,y,x1..xd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string(), "y".to_string()];
        header.extend((1..=self.d()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.labels[i].to_string(), self.y[i].to_string()];
            rec.extend(self.x.column(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut lam = DMatrix::zeros(k, labels.len());
    for (i, &l) in labels.iter().enumerate() {
        lam[(l, i)] = 1.0;
    }
    lam
}

/// Features after the sensitive block has been replaced by cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizedDataset {
    pub x_l: DMatrix<f64>,
    pub y: DVector<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
    pub p: usize,
}

impl AnonymizedDataset {
    pub fn into_dataset(self) -> Dataset {
        Dataset {
            x: self.x_l,
            y: self.y,
            labels: self.labels,
            k: self.k,
            p: self.p,
        }
    }
}

/// Which sensitive centers the anonymizer substitutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    #[default]
    TrueCenters,
    EmpiricalCenters,
}

fn check_consistent(cfg: &ProblemConfig, gt: &GroundTruth) -> Result<()> {
    if gt.d() != cfg.d || gt.p != cfg.p || gt.k() != cfg.k {
        return Err(dim_err(format!(
            "config (d={}, p={}, k={}) does not match ground truth (d={}, p={}, k={})",
            cfg.d,
            cfg.p,
            cfg.k,
            gt.d(),
            gt.p,
            gt.k()
        )));
    }
    Ok(())
}

pub(crate) fn label_sampler(priors: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(priors).map_err(|e| config_err(format!("bad priors: {e}")))
}

/// Draw `n` labels from the priors and features `x = M lambda + z`, `z ~ N(0, I)`.
pub(crate) fn sample_features<R: Rng + ?Sized>(
    n: usize,
    priors: &[f64],
    centers: &DMatrix<f64>,
    rng: &mut R,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let sampler = label_sampler(priors)?;
    let labels: Vec<usize> = (0..n).map(|_| sampler.sample(rng)).collect();
    let d = centers.nrows();
    let mut x = DMatrix::zeros(d, n);
    for (i, &l) in labels.iter().enumerate() {
        let mut col = x.column_mut(i);
        for j in 0..d {
            col[j] = centers[(j, l)] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((x, labels))
}

/// Sample `(X, y)` with `y = X^T theta0 + eps`, `eps ~ N(0, sigma^2)`.
pub fn sample_dataset<R: Rng + ?Sized>(
    cfg: &ProblemConfig,
    gt: &GroundTruth,
    rng: &mut R,
) -> Result<Dataset> {
    check_consistent(cfg, gt)?;
    let (x, labels) = sample_features(cfg.n, &cfg.priors(), &gt.centers, rng)?;
    let mut y = x.tr_mul(&gt.theta0);
    for yi in y.iter_mut() {
        *yi += cfg.sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(Dataset {
        x,
        y,
        labels,
        k: cfg.k,
        p: cfg.p,
    })
}

/// Replace each sample's sensitive block with its cluster's center.
pub fn anonymize(ds: &Dataset, centers_s: &DMatrix<f64>) -> Result<AnonymizedDataset> {
    anonymize_with_labels(ds, centers_s, &ds.labels)
}

/// Anonymize using an arbitrary (e.g. estimated) label assignment.
pub fn anonymize_with_labels(
    ds: &Dataset,
    centers_s: &DMatrix<f64>,
    labels: &[usize],
) -> Result<AnonymizedDataset> {
    if centers_s.nrows() != ds.p {
        return Err(dim_err(format!(
            "centers have {} rows but the dataset has p = {} sensitive features",
            centers_s.nrows(),
            ds.p
        )));
    }
    if labels.len() != ds.n() {
        return Err(dim_err(format!(
            "{} labels for {} samples",
            labels.len(),
            ds.n()
        )));
    }
    let k = centers_s.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(dim_err(format!("label {bad} out of range for {k} centers")));
    }
    let mut x_l = ds.x.clone();
    for (i, &l) in labels.iter().enumerate() {
        x_l.view_mut((0, i), (ds.p, 1)).copy_from(&centers_s.column(l));
    }
    Ok(AnonymizedDataset {
        x_l,
        y: ds.y.clone(),
        labels: labels.to_vec(),
        k,
        p: ds.p,
    })
}

/// Within-cluster means of the sensitive features (p x k).
pub fn empirical_centers(ds: &Dataset) -> Result<DMatrix<f64>> {
    let sizes = ds.cluster_sizes();
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(LabError::EmptyCluster(empty));
    }
    let mut centers = DMatrix::zeros(ds.p, ds.k);
    for (i, &l) in ds.labels.iter().enumerate() {
        let mut c = centers.column_mut(l);
        c += ds.x.view((0, i), (ds.p, 1));
    }
    for (l, &s) in sizes.iter().enumerate() {
        centers.column_mut(l).unscale_mut(s as f64);
    }
    Ok(centers)
}

/// Resolve the sensitive centers named by `source`.
pub fn centers_for(source: CenterSource, ds: &Dataset, gt: &GroundTruth) -> Result<DMatrix<f64>> {
    match source {
        CenterSource::TrueCenters => Ok(gt.centers_s()),
        CenterSource::EmpiricalCenters => empirical_centers(ds),
    }
}
