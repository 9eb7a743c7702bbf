use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blockkd::config::ExperimentConfig;
use blockkd::train::TrainMode;
use blockkd::Result;
use blockkd_cli::compare::{format_summary, grid_variants, run_compare};
use blockkd_cli::{apply_overrides, exit_code, parse_stones, run_teach, run_theory, run_train, TheoryCheck, TrainOverrides};

#[derive(Parser)]
#[command(name = "blockkd", version, about = "Block-wise logit distillation with stepping-stone models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student; distillation modes train or load a teacher first.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated stone indices; empty or "none" for no stones.
        #[arg(long, allow_hyphen_values = true)]
        stones: Option<String>,
        /// scratch, kd or blockkd
        #[arg(long)]
        mode: Option<String>,
    },
    /// Train the teacher with the task loss and save its checkpoint.
    Teach {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Numerical checks of the gradient analysis.
    Theory {
        /// hightemp, taylor or pull
        #[arg(long)]
        check: String,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value = "runs/theory")]
        out: PathBuf,
    },
    /// Run an ablation grid over several seeds and summarize.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated grid names (objectives, stones, trend) or variants.
        #[arg(long, default_value = "objectives,stones")]
        grid: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, stones, mode } => {
            let overrides = TrainOverrides {
                seed,
                stones: stones.as_deref().map(parse_stones).transpose()?,
                mode: mode.as_deref().map(str::parse::<TrainMode>).transpose()?,
            };
            let cfg = apply_overrides(&ExperimentConfig::load(&config)?, &overrides)?;
            let out = run_train(&cfg)?;
            let last = out.report.rows.last().expect("initial row");
            println!(
                "{} run, seed {}: test acc {:.4}, {:.2} ms/batch -> {}",
                cfg.run.mode,
                cfg.run.seed,
                last.test_acc,
                out.report.mean_ms_per_batch(),
                out.dir.display()
            );
            Ok(true)
        }
        Command::Teach { config, seed } => {
            let cfg = apply_overrides(&ExperimentConfig::load(&config)?, &TrainOverrides { seed, ..Default::default() })?;
            let out = run_teach(&cfg)?;
            let acc = out.rows.last().expect("initial row").test_acc;
            println!("teacher test acc {acc:.4} -> {}", out.checkpoint.display());
            Ok(true)
        }
        Command::Theory { check, seeds, out } => {
            let check: TheoryCheck = check.parse()?;
            let (outcome, path) = run_theory(check, seeds, &out)?;
            println!("{}", outcome.summary);
            println!("report -> {}", path.display());
            for f in &outcome.failures {
                eprintln!("FAIL {f}");
            }
            Ok(outcome.passed())
        }
        Command::Compare { config, grid, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let variants = grid_variants(&grid, cfg.spec()?.blocks())?;
            let out = run_compare(&cfg, &variants, seeds, |line| eprintln!("{line}"))?;
            print!("{}", format_summary(&out.summary));
            println!("summary -> {}", out.dir.join("summary.csv").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
