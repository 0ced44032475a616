use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedep::config::{parse_config, ExperimentConfig};
use fedep::federation::{run_experiment, write_outputs, Aggregator, ExperimentOutcome};
use log::{error, info};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Decentralized federated learning simulator.
///
/// Set FEDEP_LOG (error, warn, info, debug, trace) to control log output.
#[derive(Debug, Parser)]
#[command(name = "fedep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured aggregator (fedavg, fedprox, fedep).
        #[arg(long)]
        aggregator: Option<Aggregator>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, instead of the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every aggregator against every seed and tabulate final F1.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        aggregators: Vec<Aggregator>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FEDEP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            aggregator,
            seed,
            out,
        } => cmd_run(&config, aggregator, seed, out),
        Command::Compare {
            config,
            aggregators,
            seeds,
            out,
        } => cmd_compare(&config, &aggregators, &seeds, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    parse_config(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn cmd_run(
    path: &Path,
    aggregator: Option<Aggregator>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut config = load(path)?;
    if let Some(a) = aggregator {
        config.aggregator = a;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(dir) = out {
        config.output_dir = dir;
    }
    info!("running {} with seed {}", config.aggregator, config.seed);
    let outcome = run_experiment(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_outputs(&config.output_dir, &config, &outcome).map_err(|e| Failure::Runtime(e.to_string()))?;
    print_rounds(&config, &outcome);
    println!("results written to {}", config.output_dir.display());
    Ok(())
}

fn print_rounds(config: &ExperimentConfig, outcome: &ExperimentOutcome) {
    println!(
        "{} | seed {} | {} nodes",
        config.aggregator, config.seed, config.n_nodes
    );
    println!("{:>5}  {:>8}  {:>8}  {:>9}", "round", "mean F1", "std F1", "mean loss");
    for r in &outcome.records {
        let loss = r.reports.iter().map(|x| x.loss).sum::<f64>() / r.reports.len() as f64;
        println!(
            "{:>5}  {:>8.4}  {:>8.4}  {:>9.4}",
            r.round,
            r.mean_f1(),
            r.std_f1(),
            loss
        );
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_compare(path: &Path, aggregators: &[Aggregator], seeds: &[u64], out: Option<PathBuf>) -> Result<(), Failure> {
    let base = load(path)?;
    let dir = out.unwrap_or_else(|| base.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    let csv_path = dir.join("compare.csv");
    let mut csv = File::create(&csv_path).map_err(|e| Failure::Runtime(format!("{}: {e}", csv_path.display())))?;
    let io_err = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", csv_path.display()));
    writeln!(csv, "aggregator,seed,final_f1,status").map_err(io_err)?;

    // one row per listed aggregator; each cell is a final F1 or a failure
    let mut rows: Vec<(Aggregator, Vec<Option<f64>>)> = Vec::new();
    for &aggregator in aggregators {
        let mut cells = Vec::new();
        for &seed in seeds {
            let mut config = base.clone();
            config.aggregator = aggregator;
            config.seed = seed;
            match run_experiment(&config) {
                Ok(outcome) => {
                    let f1 = outcome.final_mean_f1().unwrap_or(f64::NAN);
                    info!("{aggregator} seed {seed}: final F1 {f1:.4}");
                    writeln!(csv, "{aggregator},{seed},{f1},ok").map_err(io_err)?;
                    cells.push(Some(f1));
                }
                Err(e) => {
                    error!("{aggregator} seed {seed} failed: {e}");
                    writeln!(csv, "{aggregator},{seed},,failed").map_err(io_err)?;
                    cells.push(None);
                }
            }
            csv.flush().map_err(io_err)?;
        }
        rows.push((aggregator, cells));
    }

    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    println!("final mean F1 over seeds {seed_list}");
    println!("{:<10} {:>18}  per seed", "aggregator", "F1");
    let mut failed = 0;
    for (aggregator, cells) in &rows {
        let ok: Vec<f64> = cells.iter().flatten().copied().collect();
        failed += cells.len() - ok.len();
        let summary = if ok.is_empty() {
            "n/a".to_string()
        } else {
            let (m, s) = mean_std(&ok);
            format!("{m:.3} ± {s:.3}")
        };
        let per_seed = cells
            .iter()
            .map(|c| c.map_or("FAILED".to_string(), |v| format!("{v:.3}")))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{:<10} {:>18}  {per_seed}", aggregator.name(), summary);
    }
    println!("runs written to {}", csv_path.display());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} run(s) failed")));
    }
    Ok(())
}
