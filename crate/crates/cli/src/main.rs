//! `paircam`: simulate photon-pair frames, reconstruct the joint distribution
//! and query the exact moment formulas.

mod commands;
mod config;
mod error;
mod oracle;
mod selftest;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::commands::{ReconstructInputs, FRAMES_FILE, TRUTH_FILE};
use crate::config::LoadedConfig;
use crate::error::CliError;

const DEFAULT_OUT: &str = "paircam-out";

#[derive(Debug, Parser)]
#[command(name = "paircam", version, about = "Photon-pair detection with image sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Print machine-readable results on standard output.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a frame stack with its ground truth and manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "PAIRCAM_OUT")]
        out: Option<PathBuf>,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reconstruct the joint distribution from a frame stack.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "PAIRCAM_OUT")]
        out: Option<PathBuf>,
        /// Frame stack; defaults to the one in the output directory.
        #[arg(long)]
        stack: Option<PathBuf>,
        /// Ground-truth CSV to compare with; defaults to the one in the
        /// output directory when present.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Evaluate an exact oracle query given as JSON (argument, file or stdin).
    Oracle {
        /// File holding the query.
        #[arg(long)]
        config: Option<PathBuf>,
        /// The query itself; `-` reads standard input.
        query: Option<String>,
    },
    /// Fit the double-Gaussian model to a reconstructed Γ̂ CSV.
    Fit {
        /// Γ̂ CSV with its sidecar.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, env = "PAIRCAM_OUT")]
        out: Option<PathBuf>,
    },
    /// Run quick internal consistency checks.
    Selftest,
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&LoadedConfig>) -> PathBuf {
    flag.or_else(|| {
        cfg.and_then(|c| c.config.output_dir.as_ref().map(|p| c.resolve(p)))
    })
    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn emit(json: bool, value: &impl Serialize, human: impl FnOnce() -> String) -> Result<(), CliError> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::field("--threads", "must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Data(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("paircam: built without parallel support; running on one thread");
    }
    Ok(())
}

fn read_query(config: Option<&Path>, query: Option<String>) -> Result<String, CliError> {
    match (config, query) {
        (Some(path), None) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        (None, Some(q)) if q != "-" => Ok(q),
        (None, _) => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text)?;
            Ok(text)
        }
        (Some(_), Some(_)) => Err(CliError::Config("give the query either inline or with --config".into())),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg = config::load(&config)?;
            if let Some(seed) = seed {
                cfg.config.seed = seed;
            }
            let out = out_dir(out, Some(&cfg));
            let manifest = commands::simulate(&cfg, &out)?;
            emit(cli.json, &manifest, || {
                format!(
                    "wrote {} frames to {} (config sha256 {})",
                    cfg.config.n_frames,
                    out.join(FRAMES_FILE).display(),
                    manifest["config_sha256"].as_str().unwrap_or_default()
                )
            })
        }
        Command::Reconstruct { config, out, stack, truth } => {
            let cfg = config::load(&config)?;
            let out = out_dir(out, Some(&cfg));
            let default_truth = out.join(TRUTH_FILE);
            let inputs = ReconstructInputs {
                stack: stack.unwrap_or_else(|| out.join(FRAMES_FILE)),
                truth: truth.or_else(|| default_truth.exists().then_some(default_truth)),
            };
            let report = commands::reconstruct(&cfg, &inputs, &out)?;
            emit(cli.json, &report, || {
                let mut lines = vec![format!("reconstructed Γ̂ from {} frames ({})", report.n_frames, report.scale_note)];
                if let Some(tv) = report.tv_to_truth {
                    lines.push(format!("total-variation distance to truth {tv:.4}"));
                }
                if let Some(f) = &report.fit {
                    lines.push(format!(
                        "fit σ+ = {:.3} µm, σ− = {:.3} µm, rms residual {:.3e}",
                        f.sigma_plus_um, f.sigma_minus_um, f.rms_residual
                    ));
                }
                lines.join("\n")
            })
        }
        Command::Oracle { config, query } => {
            let text = read_query(config.as_deref(), query)?;
            let value = oracle::evaluate(&oracle::parse(&text)?)?;
            // Always machine-readable.
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::Fit { input, out } => {
            let out = out_dir(out, None);
            let fit = commands::fit(&input, &out)?;
            emit(cli.json, &fit, || {
                format!(
                    "a = {:.6e}, σ+ = {:.3} µm, σ− = {:.3} µm, rms residual {:.3e}",
                    fit.amplitude, fit.sigma_plus_um, fit.sigma_minus_um, fit.rms_residual
                )
            })
        }
        Command::Selftest => {
            let checks = selftest::run()?;
            emit(cli.json, &checks, || {
                checks
                    .iter()
                    .map(|c| format!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail))
                    .collect::<Vec<_>>()
                    .join("\n")
            })?;
            match checks.iter().find(|c| !c.pass) {
                Some(c) => Err(CliError::Numerical(format!("self-test failed: {}", c.name))),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("paircam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
