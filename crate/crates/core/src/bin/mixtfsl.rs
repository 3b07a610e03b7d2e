//! `mixtfsl`: synthesize data, train, evaluate, and export embeddings.
//!
//! Exit status: 0 success, 2 config error, 3 data error, 4 numeric failure,
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixtfsl::run::{cmd_eval, cmd_export_embeddings, cmd_synth, cmd_train, exit_code, RunConfig};
use mixtfsl::Result;

#[derive(Parser)]
#[command(name = "mixtfsl", version, about = "Mixture-based feature space learning for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as base/val/novel CSV files.
    Synth(Common),
    /// Run both training stages and save the model and reports.
    Train(Common),
    /// Few-shot accuracy of a saved model on the novel split.
    Eval(WithModel),
    /// Base-sample embeddings and live components as CSV.
    ExportEmbeddings(WithModel),
}

#[derive(Args)]
struct Common {
    /// TOML run config; every key is optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.scorer.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Same as `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Same as `--set output_dir=DIR`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Same as `--set train.ablate_diversity=true`.
    #[arg(long)]
    ablate_diversity: bool,
    /// Same as `--set train.stage1_only=true`.
    #[arg(long)]
    stage1_only: bool,
}

#[derive(Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Model file; defaults to `<output_dir>/model.bin`.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.display().to_string()));
        }
        if self.ablate_diversity {
            overrides.push("train.ablate_diversity=true".into());
        }
        if self.stage1_only {
            overrides.push("train.stage1_only=true".into());
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.resolve()?;
            for p in cmd_synth(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let out = cmd_train(&cfg)?;
            let r = &out.report;
            println!(
                "epochs {}  best val acc {:.4}  live components per class {:?}",
                r.epochs.len(),
                r.best_val_accuracy,
                r.live_per_class
            );
            for e in &out.novel {
                println!(
                    "novel {}-way {}-shot: {:.2} ± {:.2}%",
                    e.shape.n_way,
                    e.shape.k_shot,
                    100.0 * e.mean,
                    100.0 * e.ci95
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Eval(m) => {
            let cfg = m.common.resolve()?;
            let model = m.model.unwrap_or_else(|| cfg.model_path());
            for e in cmd_eval(&cfg, &model)? {
                println!(
                    "{}-way {}-shot: {:.2} ± {:.2}% over {} episodes",
                    e.shape.n_way,
                    e.shape.k_shot,
                    100.0 * e.mean,
                    100.0 * e.ci95,
                    e.accuracies.len()
                );
            }
        }
        Command::ExportEmbeddings(m) => {
            let cfg = m.common.resolve()?;
            let model = m.model.unwrap_or_else(|| cfg.model_path());
            println!("wrote {}", cmd_export_embeddings(&cfg, &model)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mixtfsl: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
