use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nowcast_cli::config::parse_switches;
use nowcast_cli::error::Result;
use nowcast_cli::{cmd_ablate, cmd_mosaic_plan, cmd_run, init_threads, load_config, plan_json, RunOptions};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "Satellite-driven precipitation nowcasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive mosaics from a band catalog and print the plan as JSON.
    MosaicPlan {
        catalog: PathBuf,
        /// Also write `<out>/plans/mosaic_plan.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run pipeline stages for a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// gen|preprocess|train|calibrate|evaluate|all
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rerun from scratch in a scratch directory and compare checksums.
        #[arg(long)]
        verify_repro: bool,
        /// Comma-separated switches applied to this run.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Retrain with inputs zeroed and report CSI deltas against the full run.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated switches; defaults to the config's list.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::MosaicPlan { catalog, out } => {
            let plan = cmd_mosaic_plan(&catalog, out.as_deref())?;
            print!("{}", plan_json(&plan)?);
        }
        Command::Run { config, stage, seed, out, verify_repro, ablate } => {
            let cfg = load_config(&config, &RunOptions { seed, out })?;
            let switches = match ablate {
                Some(list) => parse_switches(&list)?,
                None => cfg.ablation.switches.clone(),
            };
            let summary = cmd_run(&cfg, &stage, &switches, verify_repro)?;
            for o in &summary.outcomes {
                let state = if o.cached { "cached" } else { "done" };
                eprintln!("{:<10} {state:<6} {:8.1}s", o.stage.name(), o.seconds);
            }
            if let Some(r) = &summary.repro {
                eprintln!("verify-repro: {} artifacts bit-identical", r.files_compared);
            }
            println!("{}", summary.out.display());
        }
        Command::Ablate { config, ablate, seed, out } => {
            let cfg = load_config(&config, &RunOptions { seed, out })?;
            let switches = match ablate {
                Some(list) => parse_switches(&list)?,
                None => cfg.ablation.switches.clone(),
            };
            let rows = cmd_ablate(&cfg, &switches)?;
            eprintln!("ablation report: {} rows", rows.len());
            println!("{}", nowcast_cli::ablation_path(&cfg.paths.out).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
