use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use brokerfee::experiment::{run, ExperimentConfig, Mode, Overrides};

/// Broker fee contract experiments.
#[derive(Debug, Parser)]
#[command(name = "brokerfee", version)]
struct Cli {
    /// simulate, agent, oracle, optimize, verify or report; must match run.mode.
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; 1 gives a single-threaded run.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides model.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the simulated paths in binary form.
    #[arg(long)]
    dump_paths: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(passed) => {
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: &Cli) -> brokerfee::Result<bool> {
    let config = ExperimentConfig::load(&cli.config)?;
    if config.run.mode != cli.mode {
        return Err(brokerfee::Error::Config(format!(
            "command line asks for `{}` but {} has run.mode = \"{}\"",
            cli.mode.name(),
            cli.config.display(),
            config.run.mode.name()
        )));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| brokerfee::Error::Config(format!("thread pool: {e}")))?;
    let overrides = Overrides { seed: cli.seed, output: cli.out.clone(), dump_paths: cli.dump_paths, threads: cli.threads };
    let outcome = pool.install(|| run(&config, &overrides))?;
    if config.run.mode == Mode::Verify {
        for c in &outcome.checks {
            println!(
                "{} {} (statistic {:.3e}, threshold {:.3e})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.statistic,
                c.threshold
            );
        }
    } else {
        print!("{}", outcome.summary);
    }
    println!("outputs written to {}", outcome.directory.display());
    Ok(outcome.passed())
}
