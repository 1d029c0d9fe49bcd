//! Runs the experiment matrix from a JSON config, with flag overrides.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use fedbert::runner::{export_corpus, RunConfig, Runner, ATTENTION_FILE, RESULTS_FILE};

#[derive(Debug, Parser)]
#[command(name = "fedbert", version, about)]
struct Args {
    /// JSON run configuration; unspecified fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single experiment (1-6) instead of the whole matrix.
    #[arg(long)]
    experiment: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep existing results and skip experiments already recorded.
    #[arg(long)]
    resume: bool,
    /// Number of silos.
    #[arg(long)]
    silos: Option<usize>,
    #[arg(long)]
    cycles_pretrain: Option<usize>,
    #[arg(long)]
    cycles_finetune: Option<usize>,
    /// Run matrix cells concurrently (silos within a cycle always may).
    #[arg(long)]
    parallel: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Write the configured synthetic corpus as JSONL files into this
    /// directory and exit.
    #[arg(long, value_name = "DIR")]
    export_corpus: Option<PathBuf>,
}

fn resolve(args: &Args) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(k) = args.silos {
        config.silos = k;
    }
    if let Some(t) = args.cycles_pretrain {
        config.cycles_pretrain = t;
    }
    if let Some(t) = args.cycles_finetune {
        config.cycles_finetune = t;
    }
    if args.parallel {
        config.parallel_cells = true;
        config.parallel_silos = true;
    }
    config.validate()?;
    Ok(config)
}

fn run(args: Args) -> Result<bool> {
    let config = resolve(&args)?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(true);
    }
    if let Some(dir) = &args.export_corpus {
        let files = export_corpus(&config.corpus, dir)?;
        println!("corpus written to {}", dir.display());
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({ "corpus_files": files }))?
        );
        return Ok(true);
    }
    let out = config.out_dir.clone();
    let mut runner = Runner::new(config, args.resume).context("preparing the run")?;
    let only = args.experiment.map(|e| vec![e]);
    let outcome = runner.run_matrix(only.as_deref())?;

    for row in &outcome.rows {
        println!(
            "experiment {}: {} + {} fine-tuning  P={:.4} R={:.4} F1={:.4}",
            row.experiment_id(),
            row.pretraining.label(),
            row.finetuning.label(),
            row.precision,
            row.recall,
            row.f1
        );
    }
    println!("results written to {}", out.join(RESULTS_FILE).display());
    if outcome.report.is_some() {
        println!(
            "attention report written to {}",
            out.join(ATTENTION_FILE).display()
        );
    }
    for (what, err) in &outcome.failures {
        eprintln!("{what} failed: {err}");
    }
    Ok(outcome.failures.is_empty())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
