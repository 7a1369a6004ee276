//! Argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 when everything passed, 1 when a check failed or training
//! diverged, 2 for usage, file or parse errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use opolo_core::envs::{gen_gridworld, gen_random_injective_mdp, gen_random_mdp, make_counterexample_mdp, GridStart, GridTopology, GridworldSpec};
use opolo_core::mdp::FiniteMdp;
use opolo_core::opolo::TrainedAgent;

use crate::error::HarnessError;
use crate::eval::evaluate_checkpoint;
use crate::experiment::{load_mdp, run_experiment, ExperimentSpec, ExpertSource};
use crate::output::{read_json, resolve_output, to_json, write_json, write_text};
use crate::verify::{broken_kl, run_verify, VerifyOptions};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "opolo", version, about = "Tabular state-only imitation learning: verification and experiments")]
#[command(after_help = "Relative output paths are placed under $OPOLO_OUTPUT_ROOT (default ./runs).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every identity, bound and gradient check on a seeded corpus.
    Verify {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; defaults to verify/seed-<S>-count-<N>.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Train every algorithm and seed of an experiment file.
    Train {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Exact return and divergences of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: PathBuf,
        /// Expert policy JSON; defaults to the optimal policy of the env.
        #[arg(long)]
        expert: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an environment as MDP JSON (stdout without --out).
    GenEnv(GenEnvArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    BrokenKl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EnvKind {
    Gridworld,
    Random,
    Injective,
    Counterexample,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StartKind {
    Cell,
    Uniform,
    Random,
}

#[derive(Debug, clap::Args)]
struct GenEnvArgs {
    #[arg(long, value_enum)]
    kind: EnvKind,
    #[arg(long, default_value_t = 5)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    height: usize,
    /// Goal column; defaults to the last one.
    #[arg(long)]
    goal_x: Option<usize>,
    #[arg(long)]
    goal_y: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    slip: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    torus: bool,
    #[arg(long)]
    no_absorbing: bool,
    #[arg(long, value_enum, default_value = "cell")]
    start: StartKind,
    #[arg(long, default_value_t = 10)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    /// One-hot transition rows for `--kind random`.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_env(args: &GenEnvArgs) -> Result<FiniteMdp, HarnessError> {
    Ok(match args.kind {
        EnvKind::Gridworld => {
            let spec = GridworldSpec {
                start: match args.start {
                    StartKind::Cell => GridStart::Cell { x: 0, y: 0 },
                    StartKind::Uniform => GridStart::Uniform,
                    StartKind::Random => GridStart::Random,
                },
                topology: if args.torus { GridTopology::Torus } else { GridTopology::Bounded },
                absorbing_goal: !args.no_absorbing,
                ..GridworldSpec::new(
                    args.width,
                    args.height,
                    (args.goal_x.unwrap_or(args.width.saturating_sub(1)), args.goal_y.unwrap_or(args.height.saturating_sub(1))),
                    args.slip,
                    args.gamma,
                    args.seed,
                )
            };
            gen_gridworld(&spec)?
        }
        EnvKind::Random => gen_random_mdp(args.states, args.actions, args.gamma, args.seed, args.deterministic)?,
        EnvKind::Injective => gen_random_injective_mdp(args.states, args.actions, args.gamma, args.seed)?,
        EnvKind::Counterexample => make_counterexample_mdp().mdp,
    })
}

fn verify(count: usize, seed: u64, out: Option<PathBuf>, fault: Option<Fault>) -> Result<i32, HarnessError> {
    let mut options = VerifyOptions::new(count, seed);
    if let Some(Fault::BrokenKl) = fault {
        options.kl_under_test = broken_kl;
    }
    let bundle = run_verify(&options)?;
    let path = resolve_output(&out.unwrap_or_else(|| PathBuf::from(format!("verify/seed-{seed}-count-{count}.json"))));
    write_json(&path, &bundle)?;
    for (name, fam) in &bundle.families {
        let status = if fam.failures == 0 { "ok  " } else { "FAIL" };
        println!("{status} {name:<42} {:>5} checks  {:>3} failed  worst {:.3e}", fam.checks, fam.failures, fam.worst);
    }
    println!("{} -> {}", if bundle.passed { "PASS" } else { "FAIL" }, path.display());
    Ok(if bundle.passed { EXIT_PASS } else { EXIT_FAIL })
}

fn train(spec_path: &Path) -> Result<i32, HarnessError> {
    let spec = ExperimentSpec::load(spec_path)?;
    let (summary, dir) = run_experiment(&spec)?;
    println!("expert return {:.4}", summary.expert_return);
    for row in &summary.rows {
        println!("{}", row.table_row);
    }
    println!("outputs in {}", dir.display());
    Ok(EXIT_PASS)
}

fn eval(checkpoint: &Path, env: &Path, expert: Option<PathBuf>, out: Option<PathBuf>) -> Result<i32, HarnessError> {
    let agent: TrainedAgent = read_json(checkpoint)?;
    let mdp = load_mdp(env)?;
    let source = expert.map_or(ExpertSource::Optimal, |path| ExpertSource::Policy { path });
    let expert = source.resolve(&mdp)?;
    let report = evaluate_checkpoint(&agent, &mdp, &expert)?;
    match out {
        Some(p) => write_json(&resolve_output(&p), &report)?,
        None => print!("{}", to_json(&report)),
    }
    Ok(EXIT_PASS)
}

fn dispatch(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Verify { count, seed, out, inject_fault } => verify(count, seed, out, inject_fault),
        Command::Train { spec } => train(&spec),
        Command::Eval { checkpoint, env, expert, out } => eval(&checkpoint, &env, expert, out),
        Command::GenEnv(args) => {
            let mdp = gen_env(&args)?;
            match &args.out {
                Some(p) => write_text(&resolve_output(p), &to_json(&mdp))?,
                None => print!("{}", to_json(&mdp)),
            }
            Ok(EXIT_PASS)
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand, returning
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
