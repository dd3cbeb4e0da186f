//! `mfglab`: configuration-driven runs of the mean-field and finite-N solvers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use mfglab::experiment::{
    cmd_classify, cmd_converge, cmd_finmarket, cmd_simulate_micro, cmd_solve_mfg, ExperimentConfig,
    RunReport, RunSection,
};
use mfglab::Error;

#[derive(Parser)]
#[command(
    name = "mfglab",
    version,
    about = "Finite-population games and their mean-field limits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the scaling regime of the configured exponents as JSON.
    Classify(Common),
    /// Solve the mean-field system and write the value, density and residual history.
    SolveMfg(Common),
    /// Simulate the N-agent closed-loop system for every configured N.
    SimulateMicro(Common),
    /// Compare terminal particle ensembles with the mean-field density.
    Converge(Common),
    /// Run the investor market, optionally next to its mean-field limit.
    Finmarket(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON experiment file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `run.output`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Only report errors.
    #[arg(long)]
    quiet: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.get_or_insert_with(RunSection::default).seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| {
                cfg.run
                    .as_ref()
                    .and_then(|r| r.output.clone())
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn run(
    common: &Common,
    f: fn(&ExperimentConfig, &Path) -> mfglab::Result<RunReport>,
) -> Result<i32, Error> {
    let cfg = common.load()?;
    let out = common.out_dir(&cfg);
    let report = f(&cfg, &out)?;
    info!("wrote {} files to {}", report.files.len(), out.display());
    if !report.converged {
        error!(
            "fixed-point iteration did not converge; see {}",
            out.join("manifest.json").display()
        );
    }
    Ok(report.exit_code())
}

fn classify(common: &Common) -> Result<i32, Error> {
    let flags = cmd_classify(&common.load()?)?;
    println!(
        "{}",
        serde_json::to_string(&flags).expect("regime flags serialize")
    );
    Ok(if flags.valid { 0 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Classify(c)
        | Command::SolveMfg(c)
        | Command::SimulateMicro(c)
        | Command::Converge(c)
        | Command::Finmarket(c) => c,
    };
    let level = if common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Classify(c) => classify(c),
        Command::SolveMfg(c) => run(c, cmd_solve_mfg),
        Command::SimulateMicro(c) => run(c, cmd_simulate_micro),
        Command::Converge(c) => run(c, cmd_converge),
        Command::Finmarket(c) => run(c, cmd_finmarket),
    };
    let code = result.unwrap_or_else(|e| {
        error!("{e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
