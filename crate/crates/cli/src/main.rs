use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use kvroute::{run_propositions, run_sweep, CliError, LabConfig, Overrides};

/// Compression sweep driver: presses KV caches over an alpha grid, measures
/// routing and grading metrics, and checks the routing propositions.
#[derive(Debug, Parser)]
#[command(name = "kvroute", version)]
struct Args {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory for all artifacts (created if missing).
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Comma-separated compression ratios in [0,1], replacing the config
    /// grid (example: 0.0,0.5,0.9).
    #[arg(long, value_name = "LIST")]
    alpha_grid: Option<String>,

    /// Press selection: chunk, adaptive, or both.
    #[arg(long, value_name = "KIND")]
    press: Option<String>,

    /// Scoring regime: agnostic, aware, or both.
    #[arg(long, value_name = "KIND")]
    regime: Option<String>,

    /// Sweep seed override.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Comma-separated task names (knowledge, coreference).
    #[arg(long, value_name = "LIST")]
    tasks: Option<String>,

    /// Also write surviving-attention heatmap CSVs.
    #[arg(long)]
    emit_heatmaps: bool,

    /// Run only the proposition suites, skipping the sweep.
    #[arg(long)]
    propositions_only: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(args: &Args) -> Result<(), CliError> {
    let mut cfg = LabConfig::load(args.config.as_deref())?;
    cfg.apply(&Overrides {
        alpha_grid: args.alpha_grid.clone(),
        press: args.press.clone(),
        regime: args.regime.clone(),
        seed: args.seed,
        tasks: args.tasks.clone(),
        emit_heatmaps: args.emit_heatmaps,
    })?;
    cfg.validate()?;

    std::fs::create_dir_all(&args.out)?;
    let mut resolved = toml::to_string_pretty(&cfg)?;
    if !resolved.ends_with('\n') {
        resolved.push('\n');
    }
    std::fs::write(args.out.join("resolved_config.toml"), resolved)?;

    let props = run_propositions(&cfg, &args.out)?;
    println!(
        "propositions: {}",
        if props.all_pass { "all pass" } else { "FAILED (see propositions.json)" }
    );

    if !args.propositions_only {
        let summary = run_sweep(&cfg, &args.out)?;
        println!(
            "sweep: {} records from {} examples ({} failed), {} reports -> {}",
            summary.records,
            summary.examples,
            summary.failed_examples,
            summary.reports,
            args.out.display()
        );
    }
    Ok(())
}
