use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ntkrl_cli::commands;
use ntkrl_cli::config::{self, RunConfig};

/// Policy-gradient RL on a toy language model, with empirical NTK diagnostics.
#[derive(Parser)]
#[command(name = "ntkrl", version)]
struct Cli {
    /// JSON config file; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output run directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pretraining of the reference policy.
    Pretrain,
    /// KL-regularized RL from a pretrained reference.
    Rl {
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Classifier-first RL from a pretrained reference.
    Cfrl {
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Gradient, kernel and first-order checks; exits 1 if any fails.
    Verify,
    /// Analyzer suite over one or more run directories.
    Analyze {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Bundles a run's CSV outputs into report.json.
    Report { run: PathBuf },
}

fn load(cli: &Cli) -> ntkrl::Result<RunConfig> {
    let mut cfg = config::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> ntkrl::Result<ExitCode> {
    let cfg = load(&cli)?;
    let out = || commands::resolve_out(&cfg, cli.out.as_deref());
    let written = match &cli.command {
        Command::Pretrain => commands::cmd_pretrain(&cfg, &out()?)?,
        Command::Rl { reference } => commands::cmd_rl(&cfg, reference, &out()?)?,
        Command::Cfrl { reference } => commands::cmd_cfrl(&cfg, reference, &out()?)?,
        Command::Verify => {
            let outcomes = commands::cmd_verify(&cfg, cli.out.as_deref().or(cfg.out_dir.as_deref()))?;
            print!("{}", commands::format_table(&outcomes));
            let ok = outcomes.iter().all(|o| o.passed);
            println!("{}", if ok { "all checks passed" } else { "some checks FAILED" });
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Analyze { runs } => commands::cmd_analyze(&cfg, runs, &out()?)?,
        Command::Report { run } => {
            let dest = cli.out.clone().unwrap_or_else(|| run.join("report"));
            commands::cmd_report(&cfg, run, &dest)?
        }
    };
    println!("{}", written.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
