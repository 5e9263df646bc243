//! Command-line front end for the `gradformer` binary.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::demo::run_demo;
use super::experiment::{run_experiment, ExperimentConfig};
use super::props::{run_props, Mutation};
use super::tasks::{gen_task, DatasetFile, TaskKind};
use crate::error::Error;
use crate::graded_transformer::GradedModel;
use crate::training::evaluate;

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "gradformer", version, about = "Graded transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the property suite.
    Props {
        /// Only run properties whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Inject a known defect to confirm the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject: Option<Mutation>,
    },
    /// Print worked numeric examples.
    Demo,
    /// Generate a synthetic dataset file.
    Gen {
        #[arg(long, value_enum)]
        task: TaskKind,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from an experiment config and write artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::DivergenceDetected { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

/// Runs one command, writing results to `out` and diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            code_for(&e)
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> crate::error::Result<u8> {
    match cli.command {
        Command::Props { filter, seed, inject } => {
            let report = run_props(filter.as_deref(), seed, inject);
            if report.results.is_empty() {
                return Err(Error::Config(format!("no property matches {:?}", filter.unwrap_or_default())));
            }
            write!(out, "{}", report.render())?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_PROPERTY_FAILURE })
        }
        Command::Demo => {
            let (text, ok) = run_demo()?;
            write!(out, "{text}")?;
            Ok(if ok { EXIT_OK } else { EXIT_PROPERTY_FAILURE })
        }
        Command::Gen {
            task,
            size,
            len,
            seed,
            out: path,
        } => {
            let data = gen_task(task, size, len, seed)?;
            DatasetFile::new(task, seed, len, &data).save(&path)?;
            writeln!(out, "wrote {} examples to {}", data.len(), path.display())?;
            Ok(EXIT_OK)
        }
        Command::Train { config, out: dir } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            match run_experiment(&cfg, Some(&dir)) {
                Ok(rep) => {
                    writeln!(out, "{}", serde_json::to_string_pretty(&rep.graded)?)?;
                    if let Some(b) = &rep.baseline {
                        writeln!(out, "{}", serde_json::to_string_pretty(b)?)?;
                    }
                    Ok(EXIT_OK)
                }
                Err(Error::DivergenceDetected { step, last_good }) => {
                    writeln!(out, "diverged at step {step}; last good model in {}", dir.display())?;
                    Err(Error::DivergenceDetected { step, last_good })
                }
                Err(e) => Err(e),
            }
        }
        Command::Eval { checkpoint, data } => {
            let model = GradedModel::load(&checkpoint)?;
            let examples = DatasetFile::load(&data)?.examples()?;
            let rep = evaluate(&model, &examples, &model.config.grading)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&rep)?)?;
            Ok(EXIT_OK)
        }
    }
}
