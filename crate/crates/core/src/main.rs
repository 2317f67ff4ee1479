use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaptmpc::experiments::{self, ExperimentConfig, ResultsTable};

#[derive(Parser)]
#[command(name = "adaptmpc", version, about = "Desk-scale experiments for adaptive model-based control")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in reference config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dot-path override such as `mpc.horizon=15`; repeatable.
    #[arg(long = "set", value_name = "KEY=VAL", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Results directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect every configured dataset.
    CollectData,
    /// Train hold-one-out priors for every task and family.
    TrainPrior,
    /// Run the task × family × adaptation matrix.
    RunMatrix,
    /// Run the target-offset sweep.
    Robustness,
    /// Re-run one logged trial and compare trajectories.
    Replay {
        #[arg(long)]
        trial: usize,
    },
    /// Print the resolved config.
    ShowConfig,
}

fn resolve(common: &Common) -> adaptmpc::Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.sets)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_table(t: &ResultsTable) {
    for c in &t.cells {
        println!(
            "{:<12} {:<9} adapt={:<5} offset={:.4} {}/{} [{:.2}, {:.2}]",
            c.task,
            c.family.name(),
            c.adapt,
            c.offset,
            c.successes,
            c.trials,
            c.ci_low,
            c.ci_high
        );
    }
}

fn run(cli: Cli) -> adaptmpc::Result<()> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| adaptmpc::Error::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Replay { trial } = cli.command {
        let dir = cli.common.out.clone().unwrap_or_else(|| ExperimentConfig::default().paths.out_dir);
        let r = experiments::cmd_replay(&dir, trial)?;
        println!("{}", serde_json::to_string_pretty(&r)?);
        if !r.identical {
            return Err(adaptmpc::Error::Evaluation(format!("trial {trial} did not replay identically")));
        }
        return Ok(());
    }
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::CollectData => {
            for p in experiments::cmd_collect_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::TrainPrior => {
            for r in experiments::cmd_train_prior(&cfg)? {
                let val = r.network.as_ref().map(|n| format!(" val_mse={:.3e}", n.val_loss)).unwrap_or_default();
                println!("{:<12} {:<9} rows={}/{}{val}", r.task, r.family.name(), r.train_size, r.full_size);
            }
        }
        Command::RunMatrix => print_table(&experiments::cmd_run_matrix(&cfg)?),
        Command::Robustness => print_table(&experiments::cmd_robustness(&cfg)?),
        Command::ShowConfig => println!("{}", cfg.to_json_pretty()?),
        Command::Replay { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
