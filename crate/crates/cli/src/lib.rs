//! Command-line driver: `rar <command> [--config PATH] [--section.key VALUE ...]`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rar_core::RarError;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RarError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rar", version, about = "Retrieval-augmented conversational recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Shorthand for --generator.kind.
    #[arg(long, value_parser = ["mock", "echo", "http"])]
    pub generator: Option<String>,
    /// Shorthand for --train.algorithm.
    #[arg(long, value_parser = ["dpo", "simpo", "grpo", "sft"])]
    pub algorithm: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key overrides, e.g. `--train.beta 0.1` or `--paths.root=out`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge metadata sources into a corpus.
    Ingest(Common),
    /// Embed every corpus entry.
    Embed(Common),
    /// Link conversations, cut examples, split, sessionize interactions.
    Preprocess(Common),
    /// Next-item pretraining of the retriever.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved pretraining checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop at this optimizer step, keeping the full schedule.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Preference-optimize the retriever against the generator.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Run the whole pipeline on a generated synthetic world.
    Simulate(Common),
    /// Print the resolved configuration.
    Config(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Ingest(c)
            | Command::Embed(c)
            | Command::Preprocess(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Simulate(c)
            | Command::Config(c) => c,
            Command::Pretrain { common, .. } => common,
        }
    }
}

fn expand_alias(key: &str) -> &str {
    match key {
        "generator" => "generator.kind",
        "algorithm" => "train.algorithm",
        other => other,
    }
}

/// Splits `--a.b value` / `--a.b=value` pairs. Shorthand flags that follow
/// an override land here too and are expanded.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument {a:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((expand_alias(k).to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
                out.push((expand_alias(key).to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = parse_overrides(&common.overrides)?;
    if let Some(g) = &common.generator {
        overrides.push(("generator.kind".into(), g.clone()));
    }
    if let Some(a) = &common.algorithm {
        overrides.push(("train.algorithm".into(), a.clone()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    base.with_overrides(&overrides)?.finalize()
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli.command.common())?;
    match &cli.command {
        Command::Ingest(_) => print_json(&commands::cmd_ingest(&cfg)?),
        Command::Embed(_) => {
            let t = commands::cmd_embed(&cfg)?;
            println!("{} vectors of dim {} ({})", t.len(), t.dim(), t.provider_tag());
        }
        Command::Preprocess(_) => print_json(&commands::cmd_preprocess(&cfg)?),
        Command::Pretrain { resume, until, .. } => {
            let r = commands::cmd_pretrain(&cfg, *resume, *until)?;
            println!("pretrained to step {}: loss {:?} -> {:?}", r.steps, r.first_loss, r.last_loss);
        }
        Command::Train(_) => {
            let o = commands::cmd_train(&cfg)?;
            println!(
                "{} steps, {} abstained, {} failed; best validation N@10 {:?} at step {}",
                o.log.len(),
                o.abstentions,
                o.failures,
                o.best_val_ndcg10,
                o.best_step
            );
        }
        Command::Eval(_) => {
            let ck = commands::default_eval_checkpoint(&cfg);
            let name = ck.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            let r = commands::cmd_eval(&cfg, &ck, &name)?;
            print!("{}", r.table(&cfg.eval.ks));
        }
        Command::Simulate(_) => {
            let o = commands::cmd_simulate(&cfg)?;
            println!("{}", cfg.train.algorithm);
            print!("{}", o.rl_report.table(&cfg.eval.ks));
            if let Some((_, sft)) = &o.baseline {
                println!("sft");
                print!("{}", sft.table(&cfg.eval.ks));
            }
        }
        Command::Config(_) => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
