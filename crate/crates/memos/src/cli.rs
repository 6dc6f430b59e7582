//! Command-line surface: `memos <command> --config <path> [--seed N] [--out DIR]`.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::{Backbone, Lab, Method};

#[derive(Debug, Parser)]
#[command(name = "memos", version, about = "Maximum-entropy metacognitive OOD segmentation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Layered TOML run config.
    #[arg(long, global = true, default_value = "configs/toy.toml")]
    pub config: PathBuf,

    /// Restrict the per-seed stages to this one seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory, overriding `run_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy train / val / OOD test splits.
    GenData,
    /// Build the blurred synthetic-OOD set per seed.
    GenSynth,
    /// Train the base backbone (and ensemble members if configured).
    TrainSeg,
    /// Fine-tune the base backbone with the maximum-entropy objective.
    FinetuneMaxent,
    /// Train metacognitive networks on the configured backbones.
    TrainMetacog {
        /// Only this backbone; by default every one the configured methods need.
        #[arg(long, value_enum)]
        backbone: Option<Backbone>,
    },
    /// Score the OOD test split and write reports and figures.
    Evaluate {
        /// Methods to evaluate; by default `eval.methods` from the config.
        #[arg(long = "method", value_enum)]
        methods: Vec<Method>,
    },
    /// Write soft OOD masks for images with the MEMOS pipeline.
    Infer {
        /// PNG inputs; by default the first test images.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
    },
    /// Time the backbone and metacognitive stages.
    BenchTime,
    /// Run or reuse every stage of the ablation and write `ablation.csv`.
    RunAblation,
}

/// Resolves the config with the command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.run_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Executes one command; the returned JSON is printed on stdout.
pub fn run(cli: &Cli) -> Result<Value> {
    let lab = Lab::new(resolve_config(cli)?)?;
    let seeds = lab.seeds().to_vec();
    let done = |command: &str| json!({ "command": command, "run_dir": lab.root(), "config_hash": lab.config_hash(), "seeds": seeds });
    match &cli.command {
        Command::GenData => {
            lab.gen_data()?;
            Ok(done("gen-data"))
        }
        Command::GenSynth => {
            for &s in &seeds {
                lab.gen_synth(s)?;
            }
            Ok(done("gen-synth"))
        }
        Command::TrainSeg => {
            for &s in &seeds {
                lab.train_seg(s)?;
            }
            Ok(done("train-seg"))
        }
        Command::FinetuneMaxent => {
            let reports = seeds
                .iter()
                .map(|&s| {
                    lab.finetune_maxent(s)?;
                    lab.read_finetune_report(s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(json!({ "command": "finetune-maxent", "reports": reports }))
        }
        Command::TrainMetacog { backbone } => {
            let backbones = match backbone {
                Some(b) => vec![*b],
                None => lab.metacog_backbones(),
            };
            for &s in &seeds {
                for &b in &backbones {
                    lab.train_metacog(s, b)?;
                }
            }
            Ok(done("train-metacog"))
        }
        Command::Evaluate { methods } => {
            let methods = if methods.is_empty() { lab.config().eval.methods.clone() } else { methods.clone() };
            let reports = methods.iter().map(|&m| lab.evaluate(m)).collect::<Result<Vec<_>>>()?;
            Ok(json!({ "command": "evaluate", "reports": reports }))
        }
        Command::Infer { images } => {
            let files = lab.infer(seeds[0], images)?;
            Ok(json!({ "command": "infer", "files": files }))
        }
        Command::BenchTime => Ok(serde_json::to_value(lab.bench_time(seeds[0])?).expect("report serializes")),
        Command::RunAblation => {
            let reports = lab.run_ablation()?;
            Ok(json!({ "command": "run-ablation", "reports": reports }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_the_command() {
        let cli = Cli::try_parse_from(["memos", "evaluate", "--method", "memos", "--method", "metacog_only", "--seed", "3", "--config", "x.toml"])
            .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert_eq!(cli.config, PathBuf::from("x.toml"));
        let Command::Evaluate { methods } = cli.command else { panic!("wrong command") };
        assert_eq!(methods, vec![Method::Memos, Method::MetacogOnly]);
    }

    #[test]
    fn rejects_unknown_command() {
        assert!(Cli::try_parse_from(["memos", "train-everything"]).is_err());
    }
}
