//! Experiment orchestration: single-config simulation, parameter sweeps with
//! theory columns, theory-only gain maps, CSV output and plotting scripts.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterExpSpec;
use crate::config::{build_ground_truth, GroundTruth, ProblemConfig};
use crate::data::{sample_dataset, CenterSource};
use crate::error::{config_err, LabError, Result};
use crate::estimators::{fit_look_alike, min_norm_fit, FittedModel};
use crate::exec::{derive_seed, map_indexed, rng_from_seed, Execution, LabRng};
use crate::glm::GlmExperimentSpec;
use crate::risk::{risk_closed_form, risk_monte_carlo};
use crate::stats::RunningStats;
use crate::theory::{gain_theory, risk_lookalike, risk_minnorm, TheoryParams};

/// Estimators a sweep can fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepEstimator {
    MinNorm,
    LookAlikeTrue,
    LookAlikeEstimated,
}

impl SweepEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepEstimator::MinNorm => "min_norm",
            SweepEstimator::LookAlikeTrue => "look_alike_true",
            SweepEstimator::LookAlikeEstimated => "look_alike_estimated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "min_norm" => Ok(SweepEstimator::MinNorm),
            "look_alike_true" => Ok(SweepEstimator::LookAlikeTrue),
            "look_alike_estimated" => Ok(SweepEstimator::LookAlikeEstimated),
            other => Err(config_err(format!("unknown estimator '{other}'"))),
        }
    }

    pub fn fit(self, ds: &crate::data::Dataset, gt: &GroundTruth) -> Result<FittedModel> {
        match self {
            SweepEstimator::MinNorm => min_norm_fit(&ds.x, &ds.y),
            SweepEstimator::LookAlikeTrue => fit_look_alike(ds, gt, CenterSource::TrueCenters),
            SweepEstimator::LookAlikeEstimated => fit_look_alike(ds, gt, CenterSource::EmpiricalCenters),
        }
    }
}

fn default_estimators() -> Vec<SweepEstimator> {
    vec![SweepEstimator::MinNorm, SweepEstimator::LookAlikeTrue]
}

fn default_replicates() -> usize {
    20
}

pub const CONFIG_AXES: [&str; 9] = ["n", "d", "p", "k", "mu", "sigma", "r_s", "r_ns", "rho"];

fn as_count(axis: &str, value: f64) -> Result<usize> {
    if value < 0.0 || value.fract() != 0.0 || !value.is_finite() {
        return Err(config_err(format!("axis {axis} needs a nonnegative integer, got {value}")));
    }
    Ok(value as usize)
}

/// Set the config field named `axis` to `value`.
pub fn apply_axis(cfg: &mut ProblemConfig, axis: &str, value: f64) -> Result<()> {
    match axis {
        "n" => cfg.n = as_count(axis, value)?,
        "d" => cfg.d = as_count(axis, value)?,
        "p" => cfg.p = as_count(axis, value)?,
        "k" => cfg.k = as_count(axis, value)?,
        "mu" => cfg.mu = value,
        "sigma" => cfg.sigma = value,
        "r_s" => cfg.r_s = value,
        "r_ns" => cfg.r_ns = value,
        "rho" => cfg.rho = value,
        other => {
            return Err(config_err(format!(
                "unknown sweep axis '{other}', expected one of {CONFIG_AXES:?}"
            )))
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ProblemConfig,
    pub axis: String,
    pub values: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<SweepEstimator>,
    /// Test-set size for Monte Carlo risk; 0 uses the exact closed form.
    #[serde(default)]
    pub mc_test: usize,
}

impl SweepSpec {
    /// Risk-versus-aspect-ratio sweep over `n` for the given noise and signal levels.
    pub fn sample_size_sweep(sigma: f64, r_s: f64, r_ns: f64, ns: Vec<usize>, replicates: usize) -> Self {
        let mut base = ProblemConfig::reference(ns.first().copied().unwrap_or(300));
        base.sigma = sigma;
        base.r_s = r_s;
        base.r_ns = r_ns;
        SweepSpec {
            base,
            axis: "n".into(),
            values: ns.into_iter().map(|n| n as f64).collect(),
            replicates,
            estimators: default_estimators(),
            mc_test: 0,
        }
    }

    pub fn grid_config(&self, g: usize) -> Result<ProblemConfig> {
        let mut cfg = self.base.clone();
        apply_axis(&mut cfg, &self.axis, self.values[g])?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(config_err("sweep grid must not be empty"));
        }
        if self.replicates == 0 {
            return Err(config_err("replicates must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(config_err("at least one estimator is required"));
        }
        if self.mc_test == 1 {
            return Err(config_err("mc_test must be 0 or at least 2"));
        }
        for g in 0..self.values.len() {
            self.grid_config(g)?.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub axis_value: f64,
    pub psi_d: f64,
    pub psi_p: f64,
    pub estimator: String,
    pub risk_mean: f64,
    pub risk_stderr: f64,
    pub risk_theory: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub warning: String,
}

impl SweepRow {
    pub fn gap(&self) -> f64 {
        self.psi_d - self.psi_p
    }
}

/// Reconstruct the configuration that produced `row` from the sweep's base config.
pub fn config_for_row(base: &ProblemConfig, row: &SweepRow) -> Result<ProblemConfig> {
    let mut cfg = base.clone();
    apply_axis(&mut cfg, &row.axis, row.axis_value)?;
    cfg.seed = row.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Theory prediction for one estimator, or the reason there is none.
pub fn theory_for(
    estimator: SweepEstimator,
    cfg: &ProblemConfig,
    gt: &GroundTruth,
) -> std::result::Result<f64, String> {
    if !matches!(gt.structure, crate::config::CenterStructure::Orthogonal { .. }) {
        return Err("no closed form for general center structure".into());
    }
    let tp = TheoryParams::from_config(cfg);
    let v = gt.alignment();
    let pred = match estimator {
        SweepEstimator::MinNorm => risk_minnorm(&tp, &v),
        SweepEstimator::LookAlikeTrue => risk_lookalike(&tp, &v),
        SweepEstimator::LookAlikeEstimated => {
            return Err("no closed form with estimated centers".into())
        }
    };
    match pred {
        Ok(p) => Ok(p.risk),
        Err(LabError::Pole { what, ratio, .. }) => Err(format!("pole: {what} = {ratio}")),
        Err(e) => Err(e.to_string()),
    }
}

fn evaluate(
    theta: &nalgebra::DVector<f64>,
    gt: &GroundTruth,
    cfg: &ProblemConfig,
    mc_test: usize,
    rng: &mut LabRng,
) -> Result<f64> {
    if mc_test == 0 {
        risk_closed_form(theta, gt, cfg)
    } else {
        Ok(risk_monte_carlo(theta, gt, cfg, mc_test, rng, Execution::Sequential)?.0)
    }
}

type TaskOut = Vec<(f64, std::result::Result<f64, String>)>;

fn sweep_task(spec: &SweepSpec, master: u64, g: usize, r: usize) -> Result<TaskOut> {
    let cfg = spec.grid_config(g)?;
    let mut rng = rng_from_seed(derive_seed(master, &[g as u64, r as u64]));
    let gt = build_ground_truth(&cfg, &mut rng)?;
    let ds = sample_dataset(&cfg, &gt, &mut rng)?;
    spec.estimators
        .iter()
        .map(|&e| {
            let fit = e.fit(&ds, &gt)?;
            let risk = evaluate(&fit.theta, &gt, &cfg, spec.mc_test, &mut rng)?;
            Ok((risk, theory_for(e, &cfg, &gt)))
        })
        .collect()
}

/// Fit every estimator on every grid point and replicate and aggregate risks.
///
/// Replicate `r` at grid point `g` draws its ground truth and data from
/// `derive_seed(master, [g, r])`, so extending the grid leaves existing
/// points unchanged. All estimators see the same data. The theory column
/// averages the per-replicate predictions; points without a prediction
/// carry the reason in `warning`.
pub fn run_sweep(spec: &SweepSpec, master: u64, exec: Execution) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let reps = spec.replicates;
    let outs = map_indexed(spec.values.len() * reps, exec, |t| sweep_task(spec, master, t / reps, t % reps));
    let mut rows = Vec::with_capacity(spec.values.len() * spec.estimators.len());
    let mut it = outs.into_iter();
    for g in 0..spec.values.len() {
        let cfg = spec.grid_config(g)?;
        let block: Vec<TaskOut> = it.by_ref().take(reps).collect::<Result<_>>()?;
        for (e, est) in spec.estimators.iter().enumerate() {
            let mut risk = RunningStats::default();
            let mut theory = RunningStats::default();
            let mut warning = String::new();
            for out in &block {
                risk.push(out[e].0);
                match &out[e].1 {
                    Ok(t) => theory.push(*t),
                    Err(w) if warning.is_empty() => warning = w.clone(),
                    Err(_) => {}
                }
            }
            rows.push(SweepRow {
                axis: spec.axis.clone(),
                axis_value: spec.values[g],
                psi_d: cfg.psi_d(),
                psi_p: cfg.psi_p(),
                estimator: est.as_str().into(),
                risk_mean: risk.mean(),
                risk_stderr: if reps > 1 { risk.std_error() } else { 0.0 },
                risk_theory: (theory.count() as usize == reps).then(|| theory.mean()),
                replicates: reps,
                seed: master,
                warning,
            });
        }
    }
    Ok(rows)
}

pub fn write_rows<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize().map(|r| r.map_err(LabError::from)).collect()
}

/// Axes of a theory-only gain map.
pub const THEORY_AXES: [&str; 9] = [
    "psi_d",
    "psi_p",
    "snr",
    "r_s",
    "r_ns",
    "mu",
    "mu2_over_k",
    "rho",
    "sigma",
];

pub fn apply_theory_axis(tp: &mut TheoryParams, axis: &str, value: f64) -> Result<()> {
    match axis {
        "psi_d" => tp.psi_d = value,
        "psi_p" => tp.psi_p = value,
        "snr" => tp.r_s = value * tp.sigma,
        "r_s" => tp.r_s = value,
        "r_ns" => tp.r_ns = value,
        "mu" => tp.mu = value,
        "mu2_over_k" => tp.mu = (value * tp.k() as f64).sqrt(),
        "rho" => tp.rho = value,
        "sigma" => tp.sigma = value,
        other => {
            return Err(config_err(format!(
                "unknown gain-map axis '{other}', expected one of {THEORY_AXES:?}"
            )))
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainMapSpec {
    pub base: TheoryParams,
    pub axis1: String,
    pub values1: Vec<f64>,
    pub axis2: String,
    pub values2: Vec<f64>,
}

impl GainMapSpec {
    /// Both estimators underparametrized: `psi_d = 0.9`, several `psi_p`, SNR axis.
    pub fn snr_by_psi_p() -> Self {
        let mut base = TheoryParams::balanced(0.9, 0.1, 3);
        base.rho = 0.3;
        base.mu = 5.0;
        GainMapSpec {
            base,
            axis1: "psi_p".into(),
            values1: vec![0.1, 0.3, 0.5, 0.7],
            axis2: "snr".into(),
            values2: (1..=60).map(|i| i as f64 * 0.1).collect(),
        }
    }

    /// Mixed regime at `psi_d = 2`, `psi_p = 1.7`, `k = 5`, `r_s = 0.5`: gain against `mu`
    /// for several `r_ns`. The `mu` grid starts above zero since vanishing
    /// centers change which part of the model is recoverable.
    pub fn mu_by_r_ns() -> Self {
        let mut base = TheoryParams::balanced(2.0, 1.7, 5);
        base.r_s = 0.5;
        base.rho = 0.3;
        GainMapSpec {
            base,
            axis1: "r_ns".into(),
            values1: vec![0.5, 1.0, 2.0, 4.0],
            axis2: "mu".into(),
            values2: (1..=40).map(|i| i as f64 * 0.25).collect(),
        }
    }

    /// Both estimators overparametrized: `psi_d = 4`, several `psi_p`, `r_ns` axis.
    pub fn r_ns_by_psi_p() -> Self {
        let mut base = TheoryParams::balanced(4.0, 1.0, 5);
        base.sigma = 0.1;
        base.r_s = 0.5;
        base.mu = 5.0;
        base.rho = 0.3;
        GainMapSpec {
            base,
            axis1: "psi_p".into(),
            values1: vec![0.5, 1.0, 1.5, 2.0],
            axis2: "r_ns".into(),
            values2: (0..=40).map(|i| i as f64 * 0.25).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values1.is_empty() || self.values2.is_empty() {
            return Err(config_err("gain-map grids must not be empty"));
        }
        let mut probe = self.base.clone();
        apply_theory_axis(&mut probe, &self.axis1, self.values1[0])?;
        apply_theory_axis(&mut probe, &self.axis2, self.values2[0])?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMapRow {
    pub axis1: String,
    pub axis1_value: f64,
    pub axis2: String,
    pub axis2_value: f64,
    pub case: Option<u8>,
    pub gain: Option<f64>,
    pub log_gain: Option<f64>,
    pub warning: String,
}

/// Predicted `log(Delta)` over a two-axis grid; no simulation involved.
pub fn run_gain_map(spec: &GainMapSpec) -> Result<Vec<GainMapRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values1.len() * spec.values2.len());
    for &a in &spec.values1 {
        for &b in &spec.values2 {
            let mut tp = spec.base.clone();
            apply_theory_axis(&mut tp, &spec.axis1, a)?;
            apply_theory_axis(&mut tp, &spec.axis2, b)?;
            let outcome = tp.validate().and_then(|_| gain_theory(&tp, &tp.balanced_alignment()));
            let (case, gain, warning) = match outcome {
                Ok(g) => (Some(g.case.number()), Some(g.delta), String::new()),
                Err(LabError::Pole { what, ratio, .. }) => (None, None, format!("pole: {what} = {ratio}")),
                Err(e @ LabError::Config(_)) => (None, None, e.to_string()),
                Err(e) => return Err(e),
            };
            rows.push(GainMapRow {
                axis1: spec.axis1.clone(),
                axis1_value: a,
                axis2: spec.axis2.clone(),
                axis2_value: b,
                case,
                gain,
                log_gain: gain.map(f64::ln),
                warning,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub estimator: String,
    pub risk_closed_form: f64,
    pub risk_monte_carlo: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub risk_theory: Option<f64>,
    /// `risk(min_norm) / risk(this)` when min-norm is among the estimators.
    pub gain_vs_min_norm: Option<f64>,
    pub rank: usize,
    pub warning: String,
}

pub struct Simulation {
    pub ground_truth: GroundTruth,
    pub dataset: crate::data::Dataset,
    pub fits: Vec<FittedModel>,
    pub rows: Vec<SimulationRow>,
}

/// One draw of ground truth and data, every requested estimator fitted on it.
pub fn simulate(
    cfg: &ProblemConfig,
    estimators: &[SweepEstimator],
    seed: u64,
    mc_test: usize,
    exec: Execution,
) -> Result<Simulation> {
    cfg.validate()?;
    if mc_test == 1 {
        return Err(config_err("mc_test must be 0 or at least 2"));
    }
    let mut rng = rng_from_seed(seed);
    let gt = build_ground_truth(cfg, &mut rng)?;
    let ds = sample_dataset(cfg, &gt, &mut rng)?;
    let mut fits = Vec::new();
    let mut rows = Vec::new();
    for &e in estimators {
        let fit = e.fit(&ds, &gt)?;
        let exact = risk_closed_form(&fit.theta, &gt, cfg)?;
        let mc = if mc_test > 0 {
            Some(risk_monte_carlo(&fit.theta, &gt, cfg, mc_test, &mut rng, exec)?)
        } else {
            None
        };
        let theory = theory_for(e, cfg, &gt);
        rows.push(SimulationRow {
            estimator: e.as_str().into(),
            risk_closed_form: exact,
            risk_monte_carlo: mc.map(|m| m.0),
            mc_stderr: mc.map(|m| m.1),
            risk_theory: theory.as_ref().ok().copied(),
            gain_vs_min_norm: None,
            rank: fit.rank_used,
            warning: theory.err().unwrap_or_default(),
        });
        fits.push(fit);
    }
    if let Some(i) = estimators.iter().position(|&e| e == SweepEstimator::MinNorm) {
        let reference = rows[i].risk_closed_form;
        for r in rows.iter_mut() {
            r.gain_vs_min_norm = Some(reference / r.risk_closed_form);
        }
    }
    Ok(Simulation {
        ground_truth: gt,
        dataset: ds,
        fits,
        rows,
    })
}

/// Closed-form summary of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub psi_d: f64,
    pub psi_p: f64,
    pub regime_lookalike: String,
    pub regime_minnorm: String,
    pub risk_minnorm: Option<f64>,
    pub risk_lookalike: Option<f64>,
    pub case: Option<u8>,
    pub gain: Option<f64>,
    pub log_gain: Option<f64>,
    /// Guaranteed-gain SNR^2 threshold, in the mixed regime.
    pub snr2_threshold: Option<f64>,
    pub warning: String,
}

pub fn theory_report(cfg: &ProblemConfig, seed: u64) -> Result<TheoryRow> {
    cfg.validate()?;
    let tp = TheoryParams::from_config(cfg);
    let gt = build_ground_truth(cfg, &mut rng_from_seed(seed))?;
    let v = gt.alignment();
    let mut warnings = Vec::new();
    let mut keep = |r: Result<f64>| match r {
        Ok(x) => Some(x),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    let risk_minnorm = keep(risk_minnorm(&tp, &v).map(|p| p.risk));
    let risk_lookalike = keep(risk_lookalike(&tp, &v).map(|p| p.risk));
    let gain = gain_theory(&tp, &v).ok();
    let snr2_threshold = crate::theory::gain_threshold_case2(tp.psi_d, tp.psi_p).ok();
    let regime = cfg.regime();
    Ok(TheoryRow {
        psi_d: tp.psi_d,
        psi_p: tp.psi_p,
        regime_lookalike: regime.regime_lookalike.to_string(),
        regime_minnorm: regime.regime_minnorm.to_string(),
        risk_minnorm,
        risk_lookalike,
        case: gain.as_ref().map(|g| g.case.number()),
        gain: gain.as_ref().map(|g| g.delta),
        log_gain: gain.as_ref().map(|g| g.delta.ln()),
        snr2_threshold,
        warning: warnings.join("; "),
    })
}

/// What a gnuplot script should draw from a CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Sweep,
    GainMap,
    Cluster,
    Glm,
}

/// Plain gnuplot script reading `csv_name` from the script's directory.
pub fn plot_script(csv_name: &str, kind: PlotKind) -> String {
    let head = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset grid\nfile = '{csv_name}'\n"
    );
    let body = match kind {
        PlotKind::Sweep => "\
set xlabel 'psi_d - psi_p'
set ylabel 'risk'
sel(e, c) = (strcol('estimator') eq e) ? column(c) : NaN
plot \\
  file using (column('psi_d')-column('psi_p')):(sel('min_norm','risk_mean')):'risk_stderr' with yerrorbars title 'min-norm (sim)', \\
  file using (column('psi_d')-column('psi_p')):(sel('min_norm','risk_theory')) with lines title 'min-norm (theory)', \\
  file using (column('psi_d')-column('psi_p')):(sel('look_alike_true','risk_mean')):'risk_stderr' with yerrorbars title 'look-alike (sim)', \\
  file using (column('psi_d')-column('psi_p')):(sel('look_alike_true','risk_theory')) with lines title 'look-alike (theory)'
"
        .to_string(),
        PlotKind::GainMap => "\
set xlabel 'axis2'
set ylabel 'log(gain)'
plot file using 'axis2_value':'log_gain':'axis1_value' with points palette pt 7 ps 0.6 notitle
"
        .to_string(),
        PlotKind::Cluster => "\
set xlabel 'delta_n'
set ylabel 'risk gap'
plot file using 'delta_n':(column('risk_lookalike_estimated')-column('risk_lookalike_true')) with points pt 7 title 'risk gap'
"
        .to_string(),
        PlotKind::Glm => "\
set xlabel 'r_s'
set ylabel 'mean log(gain)'
plot file using 'r_s':'mean_log_gain':'stderr' with yerrorlines title 'response MSE', \\
  file using 'r_s':'mean_log_gain_prob':'stderr_prob' with yerrorlines title 'probability MSE'
"
        .to_string(),
    };
    head + &body
}

/// Write `script` next to the CSV at `csv_path`, as `<stem>.gp`.
pub fn write_plot_script(csv_path: &Path, kind: PlotKind) -> Result<()> {
    let name = csv_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| config_err("output path has no file name"))?;
    std::fs::write(csv_path.with_extension("gp"), plot_script(name, kind))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<SweepEstimator>,
    #[serde(default)]
    pub mc_test: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub flip_rates: Vec<f64>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default)]
    pub include_kmeans: bool,
    #[serde(default)]
    pub kmeans_restarts: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlmSection {
    #[serde(default)]
    pub trials: Option<u64>,
    #[serde(default)]
    pub n_test: Option<usize>,
    #[serde(default)]
    pub r_s_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub replicates: Option<usize>,
}

/// A configuration file: model parameters at the top level plus optional
/// `[sweep]`, `[gain_map]`, `[cluster]` and `[glm]` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct LabFile {
    pub model: Option<ProblemConfig>,
    pub sweep: Option<SweepSection>,
    pub gain_map: Option<GainMapSpec>,
    pub cluster: Option<ClusterSection>,
    pub glm: Option<GlmSection>,
}

fn take_section<T: serde::de::DeserializeOwned>(table: &mut toml::Table, key: &str) -> Result<Option<T>> {
    match table.remove(key) {
        None => Ok(None),
        Some(v) => Ok(Some(v.try_into()?)),
    }
}

impl LabFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        let sweep = take_section(&mut table, "sweep")?;
        let gain_map = take_section(&mut table, "gain_map")?;
        let cluster = take_section(&mut table, "cluster")?;
        let glm = take_section(&mut table, "glm")?;
        let model = if table.is_empty() {
            None
        } else {
            let cfg: ProblemConfig = toml::Value::Table(table).try_into()?;
            cfg.validate()?;
            Some(cfg)
        };
        Ok(LabFile {
            model,
            sweep,
            gain_map,
            cluster,
            glm,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn require_model(&self) -> Result<&ProblemConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| config_err("configuration has no model parameters"))
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| config_err("configuration has no [sweep] table"))?;
        Ok(SweepSpec {
            base: self.require_model()?.clone(),
            axis: s.axis.clone(),
            values: s.values.clone(),
            replicates: s.replicates.unwrap_or_else(default_replicates),
            estimators: s.estimators.clone(),
            mc_test: s.mc_test,
        })
    }

    pub fn cluster_spec(&self) -> Result<ClusterExpSpec> {
        let mut spec = ClusterExpSpec::default_small_gap();
        if let Some(m) = &self.model {
            spec.base = m.clone();
        }
        if let Some(c) = &self.cluster {
            spec.flip_rates = c.flip_rates.clone();
            spec.replicates = c.replicates.unwrap_or(spec.replicates);
            spec.include_kmeans = c.include_kmeans;
            spec.kmeans_restarts = c.kmeans_restarts.unwrap_or(spec.kmeans_restarts);
        }
        Ok(spec)
    }

    pub fn glm_spec(&self) -> Result<GlmExperimentSpec> {
        let mut spec = GlmExperimentSpec::reference();
        if let Some(m) = &self.model {
            spec.glm.base = m.clone();
        }
        if let Some(g) = &self.glm {
            spec.glm.trials = g.trials.unwrap_or(spec.glm.trials);
            spec.glm.n_test = g.n_test.unwrap_or(spec.glm.n_test);
            if let Some(grid) = &g.r_s_grid {
                spec.r_s_grid = grid.clone();
            }
            spec.replicates = g.replicates.unwrap_or(spec.replicates);
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SweepSpec {
        let mut base = ProblemConfig::reference(60);
        base.d = 40;
        base.p = 16;
        SweepSpec {
            base,
            axis: "n".into(),
            values: vec![30.0, 60.0, 80.0],
            replicates: 3,
            estimators: vec![
                SweepEstimator::MinNorm,
                SweepEstimator::LookAlikeTrue,
                SweepEstimator::LookAlikeEstimated,
            ],
            mc_test: 0,
        }
    }

    #[test]
    fn sweep_shape_and_theory_columns() {
        let rows = run_sweep(&small_spec(), 5, Execution::Parallel).unwrap();
        assert_eq!(rows.len(), 9);
        let est = rows.iter().find(|r| r.estimator == "look_alike_estimated").unwrap();
        assert!(est.risk_theory.is_none() && !est.warning.is_empty());
        let mn = rows.iter().find(|r| r.estimator == "min_norm" && r.axis_value == 30.0).unwrap();
        assert!(mn.risk_theory.is_some());
    }

    #[test]
    fn pole_points_get_warnings_not_errors() {
        let mut spec = small_spec();
        spec.values = vec![40.0];
        spec.estimators = vec![SweepEstimator::MinNorm];
        let rows = run_sweep(&spec, 1, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].risk_theory.is_none());
        assert!(rows[0].warning.starts_with("pole"));
    }

    #[test]
    fn single_point_grid_gives_one_row_per_estimator() {
        let mut spec = small_spec();
        spec.values = vec![80.0];
        assert_eq!(run_sweep(&spec, 2, Execution::Parallel).unwrap().len(), 3);
    }

    #[test]
    fn sweep_is_deterministic_and_mode_independent() {
        let spec = small_spec();
        let a = run_sweep(&spec, 9, Execution::Parallel).unwrap();
        let b = run_sweep(&spec, 9, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extending_the_grid_keeps_existing_points() {
        let spec = small_spec();
        let mut longer = spec.clone();
        longer.values.push(120.0);
        let a = run_sweep(&spec, 4, Execution::Parallel).unwrap();
        let b = run_sweep(&longer, 4, Execution::Parallel).unwrap();
        assert_eq!(a[..], b[..a.len()]);
    }

    #[test]
    fn csv_rows_round_trip_to_configs() {
        let spec = small_spec();
        let rows = run_sweep(&spec, 11, Execution::Parallel).unwrap();
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        let back = read_sweep_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
        for (i, row) in back.iter().enumerate() {
            let cfg = config_for_row(&spec.base, row).unwrap();
            let mut expect = spec.grid_config(i / 3).unwrap();
            expect.seed = 11;
            assert_eq!(cfg, expect);
            assert_eq!(cfg.psi_d(), row.psi_d);
            assert_eq!(cfg.psi_p(), row.psi_p);
        }
    }

    #[test]
    fn monte_carlo_sweep_is_close_to_exact() {
        let mut spec = small_spec();
        spec.values = vec![80.0];
        spec.replicates = 1;
        spec.estimators = vec![SweepEstimator::LookAlikeTrue];
        let exact = run_sweep(&spec, 3, Execution::Parallel).unwrap();
        spec.mc_test = 50_000;
        let mc = run_sweep(&spec, 3, Execution::Parallel).unwrap();
        let rel = (mc[0].risk_mean - exact[0].risk_mean).abs() / exact[0].risk_mean;
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn invalid_axis_is_a_config_error() {
        let mut spec = small_spec();
        spec.axis = "lambda".into();
        assert!(matches!(run_sweep(&spec, 0, Execution::Parallel), Err(LabError::Config(_))));
        let mut spec = small_spec();
        spec.values = vec![30.5];
        assert!(matches!(run_sweep(&spec, 0, Execution::Parallel), Err(LabError::Config(_))));
    }

    #[test]
    fn snr_crossings_increase_with_psi_p() {
        let spec = GainMapSpec::snr_by_psi_p();
        let rows = run_gain_map(&spec).unwrap();
        let mut crossings = Vec::new();
        for &pp in &spec.values1 {
            let curve: Vec<&GainMapRow> = rows.iter().filter(|r| r.axis1_value == pp).collect();
            assert!(curve[0].log_gain.unwrap() > 0.0);
            let cross = curve
                .iter()
                .find(|r| r.log_gain.unwrap() < 0.0)
                .map(|r| r.axis2_value)
                .expect("gain turns negative");
            crossings.push(cross);
        }
        assert!(crossings.windows(2).all(|w| w[1] > w[0]), "{crossings:?}");
    }

    #[test]
    fn mu_map_positive_decreasing_in_mu_increasing_in_rns() {
        let spec = GainMapSpec::mu_by_r_ns();
        let rows = run_gain_map(&spec).unwrap();
        let n2 = spec.values2.len();
        for (i, chunk) in rows.chunks(n2).enumerate() {
            assert!(chunk.iter().all(|r| r.case == Some(2)));
            assert!(chunk.iter().all(|r| r.log_gain.unwrap() > 0.0));
            assert!(chunk.windows(2).all(|w| w[1].log_gain < w[0].log_gain));
            if i > 0 {
                let prev = &rows[(i - 1) * n2..i * n2];
                assert!(chunk.iter().zip(prev).all(|(a, b)| a.log_gain > b.log_gain));
            }
        }
    }

    #[test]
    fn degenerate_gain_map() {
        let mut spec = GainMapSpec::mu_by_r_ns();
        spec.values1 = vec![1.0];
        spec.values2 = vec![2.0];
        assert_eq!(run_gain_map(&spec).unwrap().len(), 1);
    }

    #[test]
    fn gain_map_pole_rows_are_flagged() {
        let mut spec = GainMapSpec::snr_by_psi_p();
        spec.axis1 = "psi_d".into();
        spec.values1 = vec![1.0];
        spec.values2 = vec![1.0];
        let rows = run_gain_map(&spec).unwrap();
        assert!(rows[0].log_gain.is_none() && rows[0].warning.starts_with("pole"));
    }

    #[test]
    fn simulate_reports_gain() {
        let cfg = small_spec().grid_config(2).unwrap();
        let sim = simulate(
            &cfg,
            &[SweepEstimator::MinNorm, SweepEstimator::LookAlikeTrue],
            1,
            0,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(sim.rows[0].gain_vs_min_norm, Some(1.0));
        let g = sim.rows[1].gain_vs_min_norm.unwrap();
        assert!((g - sim.rows[0].risk_closed_form / sim.rows[1].risk_closed_form).abs() < 1e-15);
    }

    #[test]
    fn lab_file_sections() {
        let text = r#"
n = 300
d = 500
p = 200
k = 3
mu = 5.0
sigma = 1.0
r_s = 1.0
r_ns = 2.0
rho = 0.3

[sweep]
axis = "n"
values = [300, 600]
replicates = 2
estimators = ["look_alike_true"]

[cluster]
flip_rates = [0.0, 0.1]
"#;
        let f = LabFile::parse(text).unwrap();
        let s = f.sweep_spec().unwrap();
        assert_eq!(s.values, vec![300.0, 600.0]);
        assert_eq!(s.estimators, vec![SweepEstimator::LookAlikeTrue]);
        assert_eq!(s.base.d, 500);
        assert_eq!(f.cluster_spec().unwrap().flip_rates, vec![0.0, 0.1]);
        assert!(f.glm.is_none());
        let bad = LabFile::parse("n = 3\nd = 2\n");
        assert!(bad.is_err());
    }

    #[test]
    fn theory_report_mixed_regime() {
        let mut cfg = ProblemConfig::reference(250);
        cfg.p = 425;
        let row = theory_report(&cfg, 0).unwrap();
        assert_eq!(row.case, Some(2));
        assert!((row.snr2_threshold.unwrap() - 0.615384615).abs() < 1e-6);
    }

    #[test]
    fn plot_script_mentions_file() {
        assert!(plot_script("out.csv", PlotKind::Sweep).contains("file = 'out.csv'"));
    }
}
