use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rnpc_core::attacks::{AttackConfig, Norm};
use rnpc_core::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "rnpc",
    version,
    about = "Robust neural probabilistic circuits: data, training, attacks and bound checks"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Generator preset; overrides the config.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the train and test splits.
    GenData,
    /// Train the attribute recognizer.
    Train,
    /// Learn the circuit structure and fit its parameters.
    LearnCircuit,
    /// Build the high-probability set and class partition.
    Partition,
    /// Attack the test split and save the adversarial pairs.
    Attack(AttackArgs),
    /// Benign and adversarial evaluation over the configured grid.
    Eval,
    /// Verify the bounds on saved adversarial pairs.
    Bounds,
    /// Render report.md, charts and attack counts from results.csv.
    Report,
    /// Every stage in order.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linf,
    L2,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum, default_value = "linf")]
    norm: NormArg,
    #[arg(long, default_value_t = 0.11)]
    bound: f64,
    /// 1-based attacked attributes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    attacked: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    step_size: Option<f64>,
    /// Carlini-Wagner L2 instead of PGD.
    #[arg(long)]
    cw: bool,
    #[arg(long, default_value_t = 10)]
    cw_binary_steps: usize,
}

fn config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(o) = &g.out {
        c.out = o.clone();
    }
    if let Some(p) = &g.preset {
        c.preset = p.clone();
        c.spec = None;
        c.spec_path = None;
    }
    Ok(c)
}

fn artifact_dir(g: &Global) -> Result<PathBuf> {
    Ok(match &g.out {
        Some(o) => o.clone(),
        None => config(g)?.out,
    })
}

fn verdict(ok: bool, dir: &Path) -> ExitCode {
    println!(
        "bounds: {} ({})",
        if ok { "pass" } else { "FAIL" },
        dir.display()
    );
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match cli.command {
        Command::GenData => {
            let c = config(g)?;
            let (n_train, n_test) = harness::gen_data_stage(&c, &c.out)?;
            println!(
                "wrote {n_train} train and {n_test} test samples to {}",
                c.out.display()
            );
        }
        Command::Train => {
            let o = harness::train_stage(&artifact_dir(g)?)?;
            println!(
                "final epoch loss {:.6}",
                o.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::LearnCircuit => {
            let trace = harness::learn_circuit_stage(&artifact_dir(g)?)?;
            println!(
                "training log-likelihood {:.4} -> {:.4}",
                trace[0],
                trace[trace.len() - 1]
            );
        }
        Command::Partition => {
            let p = harness::partition_stage(&artifact_dir(g)?)?;
            println!(
                "|V| = {}, d_min = {}, r = {}",
                p.num_nodes(),
                p.d_min,
                p.radius
            );
        }
        Command::Attack(a) => {
            let cfg = AttackConfig {
                norm: match a.norm {
                    NormArg::Linf => Norm::Linf,
                    NormArg::L2 => Norm::L2,
                },
                bound: a.bound,
                steps: a.steps,
                step_size: a.step_size,
                attacked: a.attacked,
                cw_binary_steps: a.cw_binary_steps,
                ..AttackConfig::default()
            };
            let pairs = harness::attack_stage(&artifact_dir(g)?, &cfg, a.cw)?;
            let hits = pairs.iter().filter(|p| p.success).count();
            println!(
                "{} pairs, {hits} flipped every attacked attribute",
                pairs.len()
            );
        }
        Command::Eval => {
            let dir = artifact_dir(g)?;
            let o = harness::eval_stage(&dir)?;
            print!("{}", o.bounds);
            return Ok(verdict(o.bounds_ok(), &dir));
        }
        Command::Bounds => {
            let dir = artifact_dir(g)?;
            let b = harness::bounds_stage(&dir)?;
            print!("{}", b.summary);
            return Ok(verdict(b.holds(), &dir));
        }
        Command::Report => {
            let r = harness::report(&artifact_dir(g)?)?;
            println!("wrote {}", r.markdown.display());
        }
        Command::Run => {
            let c = config(g)?;
            let o = harness::run(&c)?;
            print!("{}", o.bounds);
            return Ok(verdict(o.bounds_ok(), &o.out_dir));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
