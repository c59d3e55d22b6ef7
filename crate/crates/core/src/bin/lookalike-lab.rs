use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lookalike_lab::cluster::{linear_envelope, run_cluster_experiment, write_cluster_csv};
use lookalike_lab::error::{LabError, Result};
use lookalike_lab::exec::Execution;
use lookalike_lab::glm::{glm_gain_experiment, write_glm_csv};
use lookalike_lab::sweep::{
    run_gain_map, run_sweep, simulate, theory_report, write_plot_script, write_rows, GainMapSpec, LabFile,
    PlotKind, SweepEstimator,
};

#[derive(Parser)]
#[command(name = "lookalike-lab", version, about = "Look-alike clustering experiments for high-dimensional regression")]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the `seed` entry of the configuration)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path; standard output when absent
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of replicates (overrides the configuration)
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Monte Carlo test-set size; 0 evaluates the exact risk
    #[arg(long, global = true)]
    mc_test: Option<usize>,
    /// Run on a single thread
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    SnrPsiP,
    MuRns,
    RnsPsiP,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a configuration file
    Validate,
    /// Closed-form risks and gain for one configuration
    Theory,
    /// Theory-only log-gain over a two-parameter grid
    GainMap {
        /// Built-in grid used when the configuration has no [gain_map] table
        #[arg(long, value_enum, default_value = "snr-psi-p")]
        preset: Preset,
    },
    /// Fit the estimators on one simulated dataset
    Simulate {
        /// Estimators to fit
        #[arg(long, value_delimiter = ',', default_value = "min_norm,look_alike_true")]
        estimators: Vec<String>,
        /// Write fitted coefficients, one file per estimator named `<stem>.<estimator>.csv`
        #[arg(long)]
        dump_model: Option<PathBuf>,
        /// Write the simulated training set
        #[arg(long)]
        dump_data: Option<PathBuf>,
    },
    /// Risk sweep described by the [sweep] table
    Sweep,
    /// Label-corruption experiment for the look-alike estimator
    ClusterExp {
        /// Add a k-means row per replicate
        #[arg(long)]
        kmeans: bool,
    },
    /// Binomial-logit gain experiment
    Glm,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load(cli: &Cli) -> Result<Option<LabFile>> {
    cli.config.as_deref().map(LabFile::load).transpose()
}

fn require(file: &Option<LabFile>) -> Result<&LabFile> {
    file.as_ref()
        .ok_or_else(|| LabError::Config("this command needs --config".into()))
}

fn with_suffix(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn plot_next_to(out: Option<&Path>, kind: PlotKind) -> Result<()> {
    match out {
        Some(p) => write_plot_script(p, kind),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let file = load(&cli)?;
    let out = cli.out.as_deref();
    let seed_from = |cfg_seed: u64| cli.seed.unwrap_or(cfg_seed);
    match &cli.command {
        Command::Validate => {
            let f = require(&file)?;
            let mut w = output(out)?;
            writeln!(w, "section,status")?;
            if let Some(m) = &f.model {
                m.validate()?;
                writeln!(w, "model,ok")?;
            }
            if f.sweep.is_some() {
                f.sweep_spec()?.validate()?;
                writeln!(w, "sweep,ok")?;
            }
            if let Some(g) = &f.gain_map {
                g.validate()?;
                writeln!(w, "gain_map,ok")?;
            }
            if f.cluster.is_some() {
                f.cluster_spec()?.validate()?;
                writeln!(w, "cluster,ok")?;
            }
            if f.glm.is_some() {
                f.glm_spec()?.validate()?;
                writeln!(w, "glm,ok")?;
            }
            w.flush()?;
        }
        Command::Theory => {
            let cfg = require(&file)?.require_model()?;
            let row = theory_report(cfg, seed_from(cfg.seed))?;
            write_rows(&[row], output(out)?)?;
        }
        Command::GainMap { preset } => {
            let spec = match file.as_ref().and_then(|f| f.gain_map.clone()) {
                Some(s) => s,
                None => match preset {
                    Preset::SnrPsiP => GainMapSpec::snr_by_psi_p(),
                    Preset::MuRns => GainMapSpec::mu_by_r_ns(),
                    Preset::RnsPsiP => GainMapSpec::r_ns_by_psi_p(),
                },
            };
            write_rows(&run_gain_map(&spec)?, output(out)?)?;
            plot_next_to(out, PlotKind::GainMap)?;
        }
        Command::Simulate {
            estimators,
            dump_model,
            dump_data,
        } => {
            let cfg = require(&file)?.require_model()?;
            let ests = estimators
                .iter()
                .map(|s| SweepEstimator::parse(s))
                .collect::<Result<Vec<_>>>()?;
            let sim = simulate(cfg, &ests, seed_from(cfg.seed), cli.mc_test.unwrap_or(0), exec)?;
            if let Some(path) = dump_model {
                for (e, fit) in ests.iter().zip(&sim.fits) {
                    fit.write_csv(BufWriter::new(File::create(with_suffix(path, e.as_str()))?))?;
                }
            }
            if let Some(path) = dump_data {
                sim.dataset.write_csv(BufWriter::new(File::create(path)?))?;
            }
            write_rows(&sim.rows, output(out)?)?;
        }
        Command::Sweep => {
            let f = require(&file)?;
            let mut spec = f.sweep_spec()?;
            if let Some(r) = cli.replicates {
                spec.replicates = r;
            }
            if let Some(m) = cli.mc_test {
                spec.mc_test = m;
            }
            let rows = run_sweep(&spec, seed_from(spec.base.seed), exec)?;
            write_rows(&rows, output(out)?)?;
            plot_next_to(out, PlotKind::Sweep)?;
        }
        Command::ClusterExp { kmeans } => {
            let mut spec = match &file {
                Some(f) => f.cluster_spec()?,
                None => LabFile::parse("")?.cluster_spec()?,
            };
            if let Some(r) = cli.replicates {
                spec.replicates = r;
            }
            spec.include_kmeans |= *kmeans;
            let rows = run_cluster_experiment(&spec, seed_from(spec.base.seed), exec)?;
            let flips: Vec<_> = rows.iter().filter(|r| r.method == "flip").cloned().collect();
            let (envelope, slope) = linear_envelope(&flips);
            eprintln!("linear envelope {envelope:.6}, least-squares slope {slope:.6}");
            write_cluster_csv(&rows, output(out)?)?;
            plot_next_to(out, PlotKind::Cluster)?;
        }
        Command::Glm => {
            let mut spec = match &file {
                Some(f) => f.glm_spec()?,
                None => LabFile::parse("")?.glm_spec()?,
            };
            if let Some(r) = cli.replicates {
                spec.replicates = r;
            }
            let rows = glm_gain_experiment(&spec, seed_from(spec.glm.base.seed), exec)?;
            write_glm_csv(&rows, output(out)?)?;
            plot_next_to(out, PlotKind::Glm)?;
        }
    }
    Ok(())
}

fn broken_pipe(e: &LabError) -> bool {
    match e {
        LabError::Io(io) => io.kind() == io::ErrorKind::BrokenPipe,
        LabError::Csv(c) => matches!(c.kind(), csv::ErrorKind::Io(io) if io.kind() == io::ErrorKind::BrokenPipe),
        _ => false,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
