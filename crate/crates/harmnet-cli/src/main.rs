//! Command-line harness: configuration, dataset ingestion, run
//! orchestration, resumability, and reporting.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use harmnet::config::RunConfig;
use harmnet::pipeline::{self, RunOptions, RunOutcome};
use harmnet::state::Phase;

const USE_NOTICE: &str = "\
NOTICE: live mode sends adversarial multi-turn prompts to real model endpoints.\n\
Run this only within an authorized red-team engagement or evaluation you are\n\
permitted to conduct, and handle transcripts as sensitive material.";

#[derive(Parser)]
#[command(
    name = "harmnet",
    version,
    about = "Multi-turn red-team evaluation engine for LLM endpoints",
    after_help = "The default development path is fully offline against scripted backends; \
                  live endpoints additionally require --i-am-authorized."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Behaviors file (CSV or JSONL); overrides the config.
    #[arg(long, global = true)]
    behaviors: Option<PathBuf>,

    /// Run output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base RNG seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Require every endpoint to be scripted (no network access).
    #[arg(long, global = true)]
    offline: bool,

    /// Concurrency bound; overrides the config.
    #[arg(long, global = true)]
    max_concurrency: Option<usize>,

    /// Confirm this invocation is an authorized evaluation (required for
    /// live endpoints).
    #[arg(long = "i-am-authorized", global = true)]
    i_am_authorized: bool,

    /// Include embedding vectors in thoughtnet.json.
    #[arg(long, global = true)]
    store_embeddings: bool,

    /// Stop cleanly after N phase completions (resumable; for incremental
    /// operation and interruption testing).
    #[arg(long, global = true, value_name = "N")]
    stop_after_phases: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Construct the adversarial search space for every behavior.
    Build,
    /// Build (if needed) and simulate candidate chains with refine-and-prune.
    Simulate,
    /// Execute the best retained chains against the victim (runs any earlier
    /// phases that are still pending).
    Attack,
    /// Run all phases end to end and emit the report.
    Run,
    /// Re-enter an existing run directory at each behavior's recorded phase.
    Resume,
    /// Rebuild report.json and diversity.csv from persisted results.
    Report,
    /// Compute diversity over labeled result sets: --set LABEL=RESULTS_PATH.
    Diversity {
        #[arg(long = "set", value_name = "LABEL=PATH", required = true)]
        sets: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .context("--config <path> is required for this command")?;
    let mut config = RunConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    // Flag overrides resolve against the invoking directory, not the config
    // file location.
    let cwd = std::env::current_dir()?;
    if let Some(behaviors) = &cli.behaviors {
        config.paths.behaviors = cwd.join(behaviors);
    }
    if let Some(out) = &cli.out {
        config.paths.out = cwd.join(out);
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mc) = cli.max_concurrency {
        config.max_concurrency = mc;
    }
    config.validate().context("invalid configuration")?;
    Ok(config)
}

fn options(cli: &Cli, until: Phase) -> RunOptions {
    RunOptions {
        offline: cli.offline,
        authorized: cli.i_am_authorized,
        store_embeddings: cli.store_embeddings,
        until,
        stop_after_phases: cli.stop_after_phases,
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    if let Some(path) = cli.config.as_deref() {
        return Ok(RunConfig::load(path)?.out_dir());
    }
    bail!("--out <dir> (or --config) is required for this command");
}

fn maybe_print_notice(config: &RunConfig, cli: &Cli) {
    if !config.all_scripted() && cli.i_am_authorized {
        eprintln!("{USE_NOTICE}");
    }
}

fn finish(outcome: &RunOutcome, until: Phase) -> ExitCode {
    println!("run id: {}", outcome.run_id);
    println!("run directory: {}", outcome.dir.display());
    if outcome.completed {
        if until == Phase::Executed {
            print_report_summary(&outcome.dir);
        }
        println!("status: complete");
    } else {
        println!("status: stopped early (resumable with `harmnet resume`)");
    }
    ExitCode::SUCCESS
}

fn print_report_summary(dir: &std::path::Path) {
    let path = dir.join("report.json");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return;
    };
    let Ok(report): std::result::Result<serde_json::Value, _> = serde_json::from_str(&text)
    else {
        return;
    };
    if let (Some(mean), Some(n)) = (
        report.pointer("/asr/mean").and_then(|v| v.as_f64()),
        report.get("n_behaviors").and_then(|v| v.as_u64()),
    ) {
        println!("asr mean over runs: {mean:.1}% ({n} behaviors)");
    }
    if let Some(div) = report.pointer("/diversity/paper_literal").and_then(|v| v.as_f64()) {
        println!("diversity (literal normalization): {div:.4}");
    }
}

fn run_phase(cli: &Cli, until: Phase) -> Result<ExitCode> {
    let config = load_config(cli)?;
    maybe_print_notice(&config, cli);
    let outcome = pipeline::run_pipeline(&config, &options(cli, until))?;
    Ok(finish(&outcome, until))
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Build => run_phase(cli, Phase::Built),
        Command::Simulate => run_phase(cli, Phase::Simulated),
        Command::Attack | Command::Run => run_phase(cli, Phase::Executed),
        Command::Resume => {
            let dir = out_dir(cli)?;
            let config = match &cli.config {
                Some(_) => Some(load_config(cli)?),
                None => None,
            };
            if let Some(c) = &config {
                maybe_print_notice(c, cli);
            }
            let outcome =
                pipeline::resume_pipeline(&dir, config.as_ref(), &options(cli, Phase::Executed))?;
            Ok(finish(&outcome, Phase::Executed))
        }
        Command::Report => {
            let dir = out_dir(cli)?;
            let outcome = pipeline::regenerate_report(&dir)?;
            print_report_summary(&outcome.dir);
            Ok(ExitCode::SUCCESS)
        }
        Command::Diversity { sets } => {
            let config = load_config(cli)?;
            let parsed: Vec<(String, PathBuf)> = sets
                .iter()
                .map(|s| {
                    s.split_once('=')
                        .map(|(label, path)| (label.to_string(), PathBuf::from(path)))
                        .with_context(|| format!("--set must be LABEL=PATH, got '{s}'"))
                })
                .collect::<Result<_>>()?;
            let out = out_dir(cli)?;
            let rows = pipeline::compare_diversity(&config, &parsed, &out)?;
            println!("label,n,paper_literal,mean_pairwise");
            for row in &rows {
                println!(
                    "{},{},{},{}",
                    row.label,
                    row.report.n_dialogues,
                    row.report.score_literal,
                    row.report
                        .score_mean_pairwise
                        .map(|m| m.to_string())
                        .unwrap_or_default()
                );
            }
            println!("wrote {}", out.join("diversity.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
