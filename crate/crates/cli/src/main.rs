//! `predprop` command-line runner.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error,
//! 3 numerical abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{check_cmd, eval_cmd, exit_code, gen_data_cmd, infer_cmd, train_run, train_seeds, GenParams};
use crate::config::{resolve, FlagOverrides, RunConfig};

#[derive(Parser)]
#[command(name = "predprop", version, about = "Train, run and check predictive-coding networks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON run config (a report.json from an earlier run also works).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (for `infer` and `eval`: output file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted config path assignment, e.g. `training.alpha_t=0`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, out_is_dir: bool) -> predprop::Result<RunConfig> {
        let flags = FlagOverrides {
            seed: self.seed,
            out: if out_is_dir { self.out.clone() } else { None },
            overrides: self.overrides.clone(),
        };
        resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network and write checkpoint, metrics CSV and report JSON.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run several seeds, each into `<out>/seed-<s>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Worker threads for `--seeds`.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Infer readout activities and per-datum energies with frozen weights.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// normalization.json written by `train`.
        #[arg(long)]
        normalization: Option<PathBuf>,
    },
    /// Accuracy (supervised) or reconstruction error (unsupervised).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV data; defaults to the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        normalization: Option<PathBuf>,
    },
    /// Finite-difference gradient oracle and backprop comparison.
    Check {
        #[command(flatten)]
        common: Common,
        /// Corrupt one analytic weight gradient by 10% (negative control).
        #[arg(long)]
        fault: bool,
    },
    /// Write a synthetic dataset as CSV.
    GenData {
        /// xor, gaussian_clusters or two_factor
        name: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        n_per_cluster: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> predprop::Result<i32> {
    match cli.command {
        Cmd::Train { common, seeds, jobs } => {
            let config = common.resolve(true)?;
            if seeds.is_empty() {
                train_run(&config)?;
                Ok(0)
            } else {
                Ok(train_seeds(&config, &seeds, jobs))
            }
        }
        Cmd::Infer {
            common,
            checkpoint,
            data,
            normalization,
        } => {
            let config = common.resolve(false)?;
            infer_cmd(&config, &checkpoint, &data, normalization.as_deref(), common.out.as_deref())?;
            Ok(0)
        }
        Cmd::Eval {
            common,
            checkpoint,
            data,
            normalization,
        } => {
            let config = common.resolve(false)?;
            eval_cmd(
                &config,
                &checkpoint,
                data.as_deref(),
                normalization.as_deref(),
                common.out.as_deref(),
            )?;
            Ok(0)
        }
        Cmd::Check { common, fault } => check_cmd(&common.resolve(true)?, fault),
        Cmd::GenData {
            name,
            n,
            noise,
            k,
            d,
            n_per_cluster,
            separation,
            sigma,
            seed,
            out,
        } => {
            let params = GenParams {
                n,
                noise,
                k,
                d,
                n_per_cluster,
                separation,
                sigma,
            };
            gen_data_cmd(&name, &params, seed, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
