use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ntk_spectrum::experiments::{
    presets, run_bounds_table, run_lemma_probes, run_lipschitz_sweep, run_memorization,
    run_ntk_scaling, run_oracle_check, CsvTable, ExperimentKind, SweepConfig,
};
use serde::Serialize;

mod manifest;

use manifest::Manifest;

/// Oracle tolerances for `ntk-check`.
const ASSEMBLY_TOLERANCE: f64 = 1e-10;
const FINITE_DIFFERENCE_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "ntk-spectrum",
    version,
    about = "Empirical NTK spectra of coordinate networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smallest kernel eigenvalue against width.
    NtkScaling(RunArgs),
    /// Empirical Lipschitz constant against width.
    Lipschitz(RunArgs),
    /// Layerwise Monte Carlo probes.
    LemmaProbe(RunArgs),
    /// Rank certificate, target fit and width-doubled realization.
    Memorize(RunArgs),
    /// Measured eigenvalue against the lower and upper bound expressions.
    Bounds(RunArgs),
    /// Layerwise kernel against the explicit Jacobian and finite differences.
    NtkCheck(RunArgs),
    /// List the built-in configurations, or print one as JSON.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config, or a manifest written by an earlier run.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration name (see `presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, env = "NTK_SPECTRUM_OUT", default_value = "results")]
    out: PathBuf,
    /// Base seed; trial `t` uses `seed + t`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<ntk_spectrum::Error> for Failure {
    fn from(e: ntk_spectrum::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.into())
        } else {
            Failure::Config(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    let (name, args, kind) = match command {
        Command::Presets { show: Some(name) } => {
            let cfg = presets::by_name(&name)
                .ok_or_else(|| anyhow::anyhow!("unknown preset `{name}`"))?;
            println!("{}", cfg.to_json());
            return Ok(());
        }
        Command::Presets { show: None } => {
            for name in presets::names() {
                println!("{name}");
            }
            return Ok(());
        }
        Command::NtkScaling(a) => ("ntk-scaling", a, Some(ExperimentKind::NtkScaling)),
        Command::Lipschitz(a) => ("lipschitz", a, Some(ExperimentKind::Lipschitz)),
        Command::LemmaProbe(a) => ("lemma-probe", a, Some(ExperimentKind::LemmaProbe)),
        Command::Memorize(a) => ("memorize", a, Some(ExperimentKind::Memorize)),
        Command::Bounds(a) => ("bounds", a, Some(ExperimentKind::BoundsTable)),
        Command::NtkCheck(a) => ("ntk-check", a, None),
    };
    let cfg = resolve_config(&args)?;
    if let Some(kind) = kind {
        if cfg.experiment != kind {
            return Err(Failure::Config(anyhow::anyhow!(
                "`{name}` needs a {} config, got {}",
                kind.name(),
                cfg.experiment.name()
            )));
        }
    }
    let workers = args.workers as usize;
    let mut tables = Vec::new();
    let mut summary = serde_json::Map::new();

    match name {
        "ntk-scaling" => {
            let report = run_ntk_scaling(&cfg, workers)?;
            for f in &report.fits {
                println!(
                    "{} n0={} slope={}",
                    f.activation.name(),
                    f.n0,
                    fmt_opt(f.slope())
                );
            }
            summary.insert("fits".into(), to_value(&report.fits));
            summary.insert(
                "monotone_fraction".into(),
                to_value(&report.monotone_fraction),
            );
            tables.push(report.table());
            tables.push(report.fit_table());
        }
        "lipschitz" => {
            let report = run_lipschitz_sweep(&cfg, workers)?;
            for f in &report.fits {
                println!(
                    "{} n0={} slope={}",
                    f.activation.name(),
                    f.n0,
                    fmt_opt(f.slope())
                );
            }
            summary.insert("fits".into(), to_value(&report.fits));
            tables.push(report.table());
            tables.push(report.fit_table());
        }
        "lemma-probe" => {
            let report = run_lemma_probes(&cfg)?;
            for (activation, spec, r) in &report.results {
                let slope = r.fitted_slope.map(|f| f.slope);
                println!(
                    "{} {} slope={}",
                    spec.name(),
                    activation.name(),
                    fmt_opt(slope)
                );
            }
            summary.insert("results".into(), to_value(&report.results));
            tables.extend(report.tables);
        }
        "memorize" => {
            let report = run_memorization(&cfg, workers)?;
            for r in &report.records {
                println!(
                    "seed {}: rank {}/{} certified={} residual={} (|Y|={}) h={} realization_error={}",
                    r.seed,
                    r.rank,
                    r.n_samples,
                    r.in_rank_set,
                    fmt_opt(r.residual),
                    r.target_norm,
                    fmt_opt(r.chosen_h),
                    fmt_opt(r.realization_error),
                );
            }
            println!(
                "certified {}/{}, fitted {}/{}",
                report.certified(),
                report.records.len(),
                report.fitted(),
                report.certified()
            );
            summary.insert("certified".into(), to_value(&report.certified()));
            summary.insert("fitted".into(), to_value(&report.fitted()));
            tables.push(report.table());
            tables.push(report.curve_table());
        }
        "bounds" => {
            let report = run_bounds_table(&cfg, workers)?;
            for s in &report.summaries {
                println!(
                    "{} n0={} slope_vs_lower={} lower_band={} upper_band={}",
                    s.activation.name(),
                    s.n0,
                    fmt_opt(s.slope_vs_lower),
                    fmt_opt(s.lower_ratio_band),
                    fmt_opt(s.upper_ratio_band)
                );
            }
            summary.insert("summaries".into(), to_value(&report.summaries));
            tables.push(report.table());
            tables.push(report.summary_table());
        }
        "ntk-check" => {
            let report = run_oracle_check(&cfg, workers)?;
            println!(
                "{} networks: max relative error {} (layerwise vs jacobian), {} (jacobian vs finite differences)",
                report.instances(),
                report.max_assembly_error,
                report.max_finite_difference_error
            );
            summary.insert("instances".into(), to_value(&report.instances()));
            summary.insert(
                "max_assembly_error".into(),
                to_value(&report.max_assembly_error),
            );
            summary.insert(
                "max_finite_difference_error".into(),
                to_value(&report.max_finite_difference_error),
            );
            tables.push(report.table());
            write_outputs(&args.out, name, &cfg, workers, &tables, summary)?;
            if report.max_assembly_error > ASSEMBLY_TOLERANCE
                || report.max_finite_difference_error > FINITE_DIFFERENCE_TOLERANCE
            {
                return Err(Failure::Numerical(anyhow::anyhow!(
                    "kernel paths disagree beyond tolerance"
                )));
            }
            return Ok(());
        }
        _ => unreachable!("subcommand table"),
    }
    write_outputs(&args.out, name, &cfg, workers, &tables, summary)
}

fn resolve_config(args: &RunArgs) -> Result<SweepConfig, Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => presets::by_name(name).ok_or_else(|| {
            anyhow::anyhow!(
                "unknown preset `{name}`; known presets: {}",
                presets::names().join(", ")
            )
        })?,
        (None, None) => unreachable!("clap requires one of --config and --preset"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file or the `config` member of a run manifest.
fn load_config(path: &Path) -> anyhow::Result<SweepConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))?;
    let body = match value.get("config") {
        Some(inner) if value.get("manifest_version").is_some() => inner.to_string(),
        _ => text,
    };
    SweepConfig::from_json(&body).with_context(|| format!("invalid config {}", path.display()))
}

fn write_outputs(
    out: &Path,
    subcommand: &str,
    cfg: &SweepConfig,
    workers: usize,
    tables: &[CsvTable],
    summary: serde_json::Map<String, serde_json::Value>,
) -> Result<(), Failure> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut files = Vec::new();
    for t in tables {
        let path = t.write_to(out).map_err(|e| Failure::Config(e.into()))?;
        files.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    let manifest = Manifest::new(subcommand, cfg, workers, files, summary.into());
    let path = out.join("manifest.json");
    fs::write(&path, manifest.to_json())
        .with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {} file(s) and {}", tables.len(), path.display());
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into())
}
