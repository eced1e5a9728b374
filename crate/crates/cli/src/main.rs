use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hardy_hinf::experiment::{ExitStatus, Experiment, RunReport, Task};

#[derive(Parser)]
#[command(name = "hardy-hinf", version, about = "H-infinity synthesis and verification for the Hardy-potential heat equation on a ball")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV artifacts and summaries.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the tasks listed in the config.
    Run { config: PathBuf },
    /// Bisects for the smallest feasible attenuation level.
    GammaOpt { config: PathBuf },
    /// Solves the regularized critical problems for a list of epsilons.
    SweepCritical {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        eps_list: Option<Vec<f64>>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<Experiment, hardy_hinf::Error> {
    let exp = Experiment::load(path)?;
    Ok(match seed {
        Some(s) => exp.with_seed(s),
        None => exp,
    })
}

fn finish(report: RunReport, out: &Path) -> ExitCode {
    for line in report.lines() {
        println!("{line}");
    }
    if let Err(e) = report.write(out) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(report.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let prepared = match &cli.command {
        Command::Run { config } => load(config, cli.seed).map(|e| (e, false)),
        Command::GammaOpt { config } => load(config, cli.seed).map(|e| (e, true)),
        Command::SweepCritical { config, eps_list } => load(config, cli.seed).and_then(|e| {
            let e = e.with_tasks(vec![Task::CriticalSweep])?;
            match eps_list {
                Some(eps) => e.with_eps_list(eps.clone()),
                None => Ok(e),
            }
            .map(|e| (e, false))
        }),
    };
    match prepared {
        Ok((exp, false)) => finish(exp.run(), &cli.out),
        Ok((exp, true)) => finish(exp.gamma_opt(), &cli.out),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(ExitStatus::ConfigInvalid.code() as u8)
        }
    }
}
