use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use csaclb_core::algos::AlgoKind;
use csaclb_core::envs::{rollout, write_trajectory, EnvKind};
use csaclb_core::harness::{
    evaluate_checkpoint, read_config, train, write_run, Checkpoint, RunStatus, TrainConfig,
};
use csaclb_core::optbench::{run_bench, write_bench, ProblemSelection, BENCH_MUS};
use csaclb_core::rng::{substream, Stream};

#[derive(Parser)]
#[command(name = "csaclb", version, about = "Constrained SAC training, evaluation and barrier bound bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write log.csv, config.json and checkpoint.json.
    Train {
        #[arg(long)]
        algo: AlgoKind,
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        cost_limit: Option<f64>,
        /// JSON config; command-line values override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the first episode as a CSV trajectory.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Solve the bundled convex problems and check the gap bound.
    BenchBound {
        #[arg(long)]
        mu: Vec<f64>,
        #[arg(long, default_value = "all")]
        problem: ProblemSelection,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            algo,
            env,
            seed,
            steps,
            mu,
            cost_limit,
            config,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => read_config(&p).with_context(|| format!("reading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            cfg.algo = algo;
            cfg.env = env;
            cfg.seed = seed;
            cfg.total_steps = steps;
            if let Some(mu) = mu {
                cfg.mu = mu;
            }
            if let Some(d) = cost_limit {
                cfg.cost_limit = d;
            }
            cfg.validate()?;
            let log = train(&cfg)?;
            write_run(&out, &log)?;
            if let RunStatus::Aborted { step, reason } = &log.status {
                bail!("run aborted at step {step}: {reason}");
            }
            if let Some((ret, cost)) = log.final_means(1) {
                println!("step {} return {ret} cost {cost}", log.env_steps);
            }
        }
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            trajectory,
        } => {
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            let text = std::fs::read_to_string(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let ck = Checkpoint::from_json(&text)?;
            let stats = evaluate_checkpoint(&ck, env, episodes, seed)?;
            println!("{}", serde_json::to_string(&stats)?);
            if let Some(path) = trajectory {
                dump_trajectory(&ck, env, seed, &path)?;
            }
        }
        Command::BenchBound { mu, problem, out } => {
            let mus = if mu.is_empty() { BENCH_MUS.to_vec() } else { mu };
            let rows = run_bench(&problem.problems(), &mus)?;
            write_bench(std::fs::File::create(&out)?, &rows)?;
            let failed = rows.iter().filter(|r| !r.ok).count();
            if failed > 0 {
                bail!("{failed} of {} cells violate the bound", rows.len());
            }
        }
    }
    Ok(())
}

fn dump_trajectory(ck: &Checkpoint, env: EnvKind, seed: u64, path: &PathBuf) -> Result<()> {
    let agent = csaclb_core::algos::Agent::from_document(&ck.agent)?;
    let flags = ck.flags();
    let mut e = env.make();
    let mut rng = substream(seed, Stream::Evaluation);
    let native = !ck.normalize_action;
    let records = if native {
        // native actions bypass the rescaling in Env::step
        let scale = e.action_scale();
        rollout(e.as_mut(), &mut rng, |_, obs| {
            let a = agent
                .policy
                .mean_action(&ck.normalizers.obs(obs, &flags))
                .expect("checkpoint shapes match the environment");
            a.into_iter().map(|v| v / scale).collect()
        })?
    } else {
        rollout(e.as_mut(), &mut rng, |_, obs| {
            agent
                .policy
                .mean_action(&ck.normalizers.obs(obs, &flags))
                .expect("checkpoint shapes match the environment")
        })?
    };
    write_trajectory(std::fs::File::create(path)?, &records)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
