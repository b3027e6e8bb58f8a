use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use seqdistill::distill::Variant;
use seqdistill::toy::{self, ToyConfig};
use seqdistill_experiment::error::{CliError, Result};
use seqdistill_experiment::{
    cmd_ablate, cmd_evaluate, cmd_ingest, cmd_profile, cmd_select, cmd_train, cmd_verify, Workspace,
};

/// Distill LLM-generated user profiles into sequential recommenders.
#[derive(Debug, Parser)]
#[command(name = "seqdistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict train/evaluate to one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict train/evaluate to one variant.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Use the offline mock LLM and encoder.
    #[arg(long = "mock-llm", global = true)]
    mock_llm: bool,
    /// Output directory (overrides `experiment.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, k-core filter and split the interaction log.
    Ingest,
    /// Generate, encode and project user profiles into frozen targets.
    Profile,
    /// Train baseline and/or distilled models.
    Train {
        /// Train every point of the `[grid]` section.
        #[arg(long)]
        grid: bool,
    },
    /// Score trained runs and write the results table.
    Evaluate,
    /// Run the alpha x dynamic-beta ablation.
    Ablate,
    /// Score the `[grid]` points on a validation period held out of the
    /// training split.
    Select,
    /// ingest, profile, train and evaluate.
    All,
    /// Retrain completed runs from their manifests and compare digests.
    Verify {
        /// Run directories; all completed runs when omitted.
        runs: Vec<PathBuf>,
    },
    /// Write the synthetic toy dataset (to --out, default data/toy).
    ToyData,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse()
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    Workspace::open(path, cli.out.clone(), cli.mock_llm)
}

fn selection(cli: &Cli, ws: &Workspace) -> (Vec<Variant>, Vec<u64>) {
    let variants = match cli.variant {
        Some(v) => vec![v],
        None => vec![Variant::Baseline, Variant::Distilled],
    };
    let seeds = match cli.seed {
        Some(s) => vec![s],
        None => ws.config.experiment.seeds.clone(),
    };
    (variants, seeds)
}

fn ingest(ws: &Workspace) -> Result<()> {
    let o = cmd_ingest(ws)?;
    if o.up_to_date {
        println!("ingest: up-to-date");
    } else {
        let s = &o.stats;
        println!(
            "ingest: {} rows ({} malformed), {} after k-core; train {} / test {} interactions, {} users",
            s.total_rows, s.malformed_rows, s.filtered.num_interactions, s.train.num_interactions,
            s.test.num_interactions, s.sequences
        );
    }
    Ok(())
}

fn profile(ws: &Workspace) -> Result<()> {
    let o = cmd_profile(ws)?;
    if o.up_to_date {
        println!("profile: up-to-date ({})", o.store_digest);
    } else {
        println!(
            "profile: {} targets, {} generated, {} from cache, digest {}",
            o.num_targets, o.generated, o.cache_hits, o.store_digest
        );
    }
    Ok(())
}

fn train(ws: &Workspace, cli: &Cli, grid: bool) -> Result<()> {
    let (variants, seeds) = selection(cli, ws);
    for r in cmd_train(ws, &variants, &seeds, grid)? {
        let state = if r.reused { "up-to-date" } else { "trained" };
        println!("train: {state} {}", r.dir.display());
    }
    Ok(())
}

fn evaluate(ws: &Workspace, cli: &Cli) -> Result<()> {
    let (variants, seeds) = selection(cli, ws);
    let o = cmd_evaluate(ws, &variants, &seeds)?;
    print!("{}", o.table);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::ToyData = cli.command {
        let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data/toy"));
        let cfg = ToyConfig::default();
        toy::generate(&cfg).write(&dir)?;
        println!("toy dataset written to {}", dir.display());
        return Ok(());
    }
    let ws = workspace(cli)?;
    match &cli.command {
        Command::Ingest => ingest(&ws),
        Command::Profile => profile(&ws),
        Command::Train { grid } => train(&ws, cli, *grid),
        Command::Evaluate => evaluate(&ws, cli),
        Command::Ablate => {
            let o = cmd_ablate(&ws)?;
            println!("ablation: {} runs trained, {} reused", o.executed, o.reused);
            print!("{}", o.table);
            Ok(())
        }
        Command::Select => {
            let (variants, seeds) = selection(cli, &ws);
            let o = cmd_select(&ws, &variants, &seeds)?;
            print!("{}", o.table);
            Ok(())
        }
        Command::All => {
            ingest(&ws)?;
            profile(&ws)?;
            train(&ws, cli, false)?;
            evaluate(&ws, cli)
        }
        Command::Verify { runs } => {
            let results = cmd_verify(&ws, runs)?;
            let mut failed = 0;
            for r in &results {
                if r.matches() {
                    println!("verify: ok {}", r.run.display());
                } else {
                    failed += 1;
                    println!(
                        "verify: MISMATCH {} ({})",
                        r.run.display(),
                        r.mismatched.join(", ")
                    );
                }
            }
            if failed > 0 {
                return Err(CliError::Other(format!(
                    "{failed} of {} runs did not reproduce",
                    results.len()
                )));
            }
            Ok(())
        }
        Command::ToyData => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
