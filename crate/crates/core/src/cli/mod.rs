//! Command-line surface: verbs, global flags, resolved configs and exit
//! codes.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

pub use commands::{OutDir, Status};
pub use config::{Precision, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GENERIC: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CHECK: i32 = 5;

/// Log verbosity, read like `RUST_LOG`.
pub const LOG_ENV: &str = "UNIDENOISE_LOG";

#[derive(Debug, Parser)]
#[command(name = "unidenoise", version, about = "Toy unified denoiser: training, distillation, sampling and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
    /// `key = value` file overlaid on the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Verb {
    /// Write the paired and pure-text corpora.
    GenData,
    /// Train the teacher on `paths.data`.
    TrainTeacher,
    /// Write the trajectory pool of stage `collect.stage` from `paths.teacher`.
    Collect,
    /// Run the distillation stages from `paths.teacher`.
    Distill,
    /// Sample one grid per line of `paths.prompts`.
    Sample,
    /// Jacobi-decode captions for `paths.grids` or held-out grids.
    DecodeText,
    /// Speed and agreement table over `paths.checkpoints`.
    Bench,
    /// Task scores of `paths.checkpoint` on the held-out corpus.
    Eval,
    /// Finite-difference check of every loss term.
    Gradcheck,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Plan(_) | Error::Schedule(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Path { .. } | Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_GENERIC,
    }
}

/// Defaults, then the config file, then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Path {
            path: p.clone(),
            reason: e.to_string(),
        })?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_kv(&text)?;
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_verb(verb: Verb, cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    out.write(commands::RESOLVED_FILE, &cfg.resolved())?;
    match verb {
        Verb::GenData => commands::gen_data(cfg, out),
        Verb::TrainTeacher => commands::cmd_train_teacher(cfg, out),
        Verb::Collect => commands::cmd_collect(cfg, out),
        Verb::Distill => commands::cmd_distill(cfg, out),
        Verb::Sample => commands::cmd_sample(cfg, out),
        Verb::DecodeText => commands::cmd_decode_text(cfg, out),
        Verb::Bench => commands::cmd_bench(cfg, out),
        Verb::Eval => commands::cmd_eval(cfg, out),
        Verb::Gradcheck => commands::cmd_gradcheck(cfg, out),
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let res = resolve_config(cli).and_then(|cfg| {
        let out = OutDir::new(&cli.out, cli.overwrite)?;
        run_verb(cli.verb, &cfg, &out)
    });
    match res {
        Ok(Status::Success) => EXIT_OK,
        Ok(Status::NumericAbort(why)) => {
            log::error!("numerical abort: {why}");
            EXIT_NUMERIC
        }
        Ok(Status::CheckFailed(why)) => {
            log::error!("{why}");
            EXIT_CHECK
        }
        Err(e) => {
            log::error!("{e}");
            exit_code(&e)
        }
    }
}
