use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twinlev::experiment::{run, ExperimentSpec, OutputFormat};
use twinlev::Error;

/// Entanglement of two Coulomb-coupled levitated particles in a modulated
/// trap under continuous measurement and feedback.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Periodic steady state: entanglement and squeezing time series.
    Steady(Common),
    /// Dump seeded closed-loop trajectories.
    Trajectory(Common),
    /// Ensemble moments compared against the excess-noise flow.
    Ensemble(Common),
    /// 2-D parameter scan or 1-D squeezing sweep.
    Scan(Common),
    /// Run a figure preset (fig1a..fig1d, fig2a..fig2f, fig3, fig4a..fig4c).
    Reproduce {
        /// Preset name; may instead be given as `target` in the config.
        target: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment file (flat TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Integrator step in units of 1/omega_m; must divide the modulation period.
    #[arg(long, value_name = "X")]
    dt: Option<f64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Validation(_) | Error::GridMismatch(_) => 2,
        Error::Instability { .. }
        | Error::Uncontrollable(_)
        | Error::Unphysical { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::NonFinite { .. } => 3,
        Error::NonConvergence { .. } => 4,
        Error::Io { .. } => 5,
        Error::Trajectory { source, .. } => exit_code(source),
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Reads the config (or starts empty) and supplies `mode`/`target` from the
/// command line. Keys are appended so reported line numbers stay valid.
fn load(mode: &str, target: Option<&str>, path: Option<&PathBuf>) -> Result<ExperimentSpec, Error> {
    let mut text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })?,
        None => String::new(),
    };
    let table: toml::Table = text.parse().unwrap_or_default();
    let mut append = |key: &str, value: &str| -> Result<(), Error> {
        match table.get(key).and_then(|v| v.as_str()) {
            Some(existing) if existing != value => Err(Error::Config {
                line: None,
                key: key.into(),
                message: format!("config says `{existing}` but the command line says `{value}`"),
            }),
            Some(_) => Ok(()),
            None => {
                if !text.is_empty() && !text.ends_with('\n') {
                    text.push('\n');
                }
                text.push_str(&format!("{key} = {}\n", quoted(value)));
                Ok(())
            }
        }
    };
    append("mode", mode)?;
    if let Some(t) = target {
        append("target", t)?;
    }
    ExperimentSpec::from_toml_str(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, target, common) = match &cli.command {
        Command::Steady(c) => ("steady", None, c),
        Command::Trajectory(c) => ("trajectory", None, c),
        Command::Ensemble(c) => ("ensemble", None, c),
        Command::Scan(c) => ("scan", None, c),
        Command::Reproduce { target, common } => ("reproduce", target.as_deref(), common),
    };
    let result = load(mode, target, common.config.as_ref()).and_then(|mut spec| {
        if let Some(out) = &common.out {
            spec.out_dir = out.clone();
        }
        if let Some(seed) = common.seed {
            spec.seed = seed;
        }
        if let Some(threads) = common.threads {
            spec.threads = Some(threads);
        }
        if let Some(dt) = common.dt {
            spec.dt_times_omega_m = Some(dt);
        }
        if let Some(format) = common.format {
            spec.format = match format {
                Format::Csv => OutputFormat::Csv,
                Format::Json => OutputFormat::Json,
            };
        }
        spec.validate()?;
        run(&spec)
    });
    match result {
        Ok(report) => {
            let failed: usize = report.failures.values().sum();
            println!(
                "wrote {} files to {} in {:.2} s ({failed} failed points)",
                report.outputs.len() + 1,
                report.out_dir.display(),
                report.wall_time_s
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
