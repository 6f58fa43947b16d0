//! `fedstil` command-line driver.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedstil_core::runner::{build_report, resume_experiment, run_experiment, run_sweep};
use fedstil_core::{Error, ExperimentConfig, Strategy};

#[derive(Parser, Debug)]
#[command(name = "fedstil", version, about = "Federated lifelong person re-identification simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.strategy`.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Overrides both the run and stream seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<strategy>/seed_<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue an interrupted run from its saved state.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every strategy/seed pair into <out>/<strategy>/seed_<n>.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<Strategy>,
        /// Inclusive range `a..b` or a comma-separated list.
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedList,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Summarize every run found below a directory.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
        /// Print JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Check a config file without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let seeds = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|e| format!("bad range start {lo:?}: {e}"))?;
        let hi: u64 = hi.trim().parse().map_err(|e| format!("bad range end {hi:?}: {e}"))?;
        if lo > hi {
            return Err(format!("empty seed range {s}"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed {p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(SeedList(seeds))
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

/// Config problems surfacing at run time still count as config errors.
fn runtime(e: Error) -> Failure {
    match e.root() {
        Error::Config(_) => Failure::Config(e),
        _ => Failure::Runtime(e),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let cfg = ExperimentConfig::load(path).map_err(Failure::Config)?;
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            strategy,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = strategy {
                cfg.run.strategy = s;
            }
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let dir = out.unwrap_or_else(|| {
                PathBuf::from("runs")
                    .join(cfg.run.strategy.as_str())
                    .join(format!("seed_{}", cfg.run.seed))
            });
            let output = run_experiment(&cfg, &dir).map_err(runtime)?;
            print_run(&output.dir, &output.summary, &output.round_seconds);
        }
        Command::Resume { out } => {
            let output = resume_experiment(&out).map_err(runtime)?;
            print_run(&output.dir, &output.summary, &output.round_seconds);
        }
        Command::Sweep {
            config,
            strategies,
            seeds,
            out,
        } => {
            let cfg = load_config(&config)?;
            let outputs = run_sweep(&cfg, &strategies, &seeds.0, &out).map_err(runtime)?;
            for o in &outputs {
                println!("{}: mAP {}", o.dir.display(), fmt_opt(o.summary.final_avg_map));
            }
            let report = build_report(&out).map_err(runtime)?;
            println!();
            print!("{}", report.render());
        }
        Command::Report { dir, json } => {
            let report = build_report(&dir).map_err(runtime)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", report.render());
            }
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "{}: ok ({} clients, {} rounds, strategy {})",
                config.display(),
                cfg.stream.num_clients,
                cfg.stream.num_rounds,
                cfg.run.strategy
            );
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml_string()),
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_run(dir: &Path, s: &fedstil_core::RunSummary, seconds: &[f64]) {
    let total: f64 = seconds.iter().sum();
    println!("wrote {}", dir.display());
    println!("strategy      {}", s.strategy);
    println!("final mAP     {}", fmt_opt(s.final_avg_map));
    println!("rank-1        {}", fmt_opt(s.final_rank1));
    println!("forgetting    {}", fmt_opt(s.final_forgetting));
    println!("S2C bytes     {}", s.total_s2c_bytes);
    println!("C2S bytes     {}", s.total_c2s_bytes);
    println!("wall clock    {total:.2}s over {} rounds", seconds.len());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error());
            ExitCode::from(f.code())
        }
    }
}
