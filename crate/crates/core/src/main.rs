use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use optexec::experiments::{
    run_ablation, run_baselines, run_convergence, run_eval, run_online, run_oracle,
    ExperimentConfig, Mode, Preset,
};
use optexec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "optexec",
    version,
    about = "Optimal execution with transient impact: oracle and DDPG agent"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults to the selected preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: exp, powerlaw, linres-005, linres-05.
    #[arg(long, default_value = "exp")]
    preset: String,
    /// Override a config key, e.g. `--set H=10000 --set online.H=20000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form optimal schedule and baseline profits.
    Oracle(Common),
    /// Profits of optimal, TWAP and immediate schedules.
    Baselines(Common),
    /// Train agents from scratch, one per seed.
    Train(Common),
    /// Paired auxiliary vs standard critic training.
    Ablation(Common),
    /// Online adaptation under a drifting decay rate.
    Online {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory from a `train` run.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Greedy evaluation of a checkpoint against the oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the resolved config as TOML.
    ShowConfig(Common),
}

fn resolve(common: &Common, mode: Mode) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => common.preset.parse::<Preset>()?.config(),
    };
    config.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.experiment.seeds = vec![seed];
        config.trainer.seed = seed;
    }
    if let Some(out) = &common.out {
        config.experiment.out_dir = out.clone();
    }
    config.experiment.mode = mode;
    let out = config.experiment.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    Ok((config, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Oracle(c) => {
            let (config, out) = resolve(&c, Mode::Oracle)?;
            let s = run_oracle(&config, &out)?;
            println!(
                "optimal {:.6}  twap {:.6}  immediate {:.6}",
                s.optimal_profit, s.twap_profit, s.immediate_profit
            );
        }
        Command::Baselines(c) => {
            let (config, out) = resolve(&c, Mode::Baselines)?;
            let s = run_baselines(&config, &out)?;
            println!(
                "optimal {:.6}  twap {:.6}  immediate {:.6}",
                s.optimal_profit, s.twap_profit, s.immediate_profit
            );
        }
        Command::Train(c) => {
            let (config, out) = resolve(&c, Mode::Train)?;
            let s = run_convergence(&config, &out)?;
            for r in &s.runs {
                println!(
                    "seed {}: final gap {:.3} bps (best {:.3})",
                    r.seed, r.final_gap_bps, r.best_gap_bps
                );
            }
            println!("median final gap {:.3} bps", s.median_final_gap_bps);
        }
        Command::Ablation(c) => {
            let (config, out) = resolve(&c, Mode::Ablation)?;
            let s = run_ablation(&config, &out)?;
            println!(
                "median final gap: auxiliary {:.3} bps, standard {:.3} bps",
                s.auxiliary.median_final_gap_bps, s.standard.median_final_gap_bps
            );
        }
        Command::Online { common, checkpoint } => {
            let (config, out) = resolve(&common, Mode::Online)?;
            let s = run_online(&config, &checkpoint, &out)?;
            println!(
                "{:.1}% of episodes within {} bps (median {:.3} bps)",
                100.0 * s.within_threshold,
                s.gap_threshold_bps,
                s.median_gap_bps
            );
        }
        Command::Eval { common, checkpoint } => {
            let (config, out) = resolve(&common, Mode::Eval)?;
            let r = run_eval(&checkpoint, &config, &out)?;
            println!(
                "agent {:.6}  oracle {:.6}  gap {:.3} bps",
                r.agent_reward, r.oracle_reward, r.gap_bps
            );
        }
        Command::ShowConfig(c) => {
            let mut config = match &c.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => c.preset.parse::<Preset>()?.config(),
            };
            config.apply_overrides(&c.overrides)?;
            print!("{}", config.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
