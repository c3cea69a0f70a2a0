use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calvnet::checks::run_invariant_suite;
use calvnet::config::{parse_config, RunConfig};
use calvnet::experiment::{evaluate_checkpoint, run_experiment, run_oracle, Check, MetricsReport};
use calvnet::Error;
use clap::{Args, Parser, Subcommand};

/// Train neural solvers for optimal-control and geodesic problems and
/// compare them with classical oracles.
#[derive(Parser)]
#[command(name = "calvnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a config and evaluate against the oracle.
    Train {
        config: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Compute the oracle solution only.
    Oracle {
        config: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run the invariant suite.
    Check,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also write the oracle trajectory next to the learned one.
    #[arg(long)]
    dump_oracle: bool,
    /// Exit with status 1 when an acceptance threshold is missed.
    #[arg(long)]
    strict: bool,
}

const EXIT_THRESHOLD: u8 = 1;

fn load(path: &Path, flags: &RunFlags) -> calvnet::Result<RunConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(dir) = &flags.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
    cfg.evaluation.dump_oracle |= flags.dump_oracle;
    cfg.resolve()?;
    Ok(cfg)
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        let value = c.value.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark} {} = {value} (threshold {:e})", c.name, c.threshold);
    }
}

fn report(r: &MetricsReport, out: &Path, strict: bool) -> ExitCode {
    println!(
        "{}: {} learned {:.6} oracle {:.6} relative error {:.3e}",
        r.problem, r.headline.name, r.headline.learned, r.headline.oracle, r.headline.relative_error
    );
    print_checks(&r.checks);
    println!("results in {}", out.display());
    if r.passed || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_THRESHOLD)
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, run } => match load(&config, &run).and_then(|c| run_experiment(&c).map(|r| (c, r))) {
            Ok((cfg, r)) => report(&r, &cfg.output_dir(), run.strict),
            Err(e) => fail(e),
        },
        Command::Eval { config, checkpoint, run } => {
            match load(&config, &run).and_then(|c| evaluate_checkpoint(&c, &checkpoint).map(|r| (c, r))) {
                Ok((cfg, r)) => report(&r, &cfg.output_dir(), run.strict),
                Err(e) => fail(e),
            }
        }
        Command::Oracle { config, run } => match load(&config, &run).and_then(|c| run_oracle(&c).map(|m| (c, m))) {
            Ok((cfg, m)) => {
                for (k, v) in &m {
                    println!("{k} = {v:.12}");
                }
                println!("results in {}", cfg.output_dir().display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Check => match run_invariant_suite() {
            Ok(checks) => {
                print_checks(&checks);
                if checks.iter().all(|c| c.passed) {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(EXIT_THRESHOLD)
                }
            }
            Err(e) => fail(e),
        },
    }
}
