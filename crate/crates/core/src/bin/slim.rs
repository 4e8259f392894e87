use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slim::critvals::{
    simulate_rs_critical_values, write_critical_values, TABLE_ALPHAS, TABLE_PATH_LENGTH, TABLE_SEED,
};
use slim::harness::{estimate_on, run_experiment, Design, ExperimentConfig};
use slim::model::Dataset;
use slim::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "slim", version, about = "Stochastic-approximation GMM with online inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment and write summary.csv, reps.csv and timing.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Simulate random-scaling critical values (Wald form).
    Critvals {
        /// Number of restrictions.
        #[arg(long)]
        ell: usize,
        /// Simulate every ell from --ell up to this value.
        #[arg(long)]
        ell_max: Option<usize>,
        #[arg(long, default_value_t = 200_000)]
        reps: usize,
        #[arg(long, default_value_t = TABLE_PATH_LENGTH)]
        path_length: usize,
        #[arg(long, default_value_t = TABLE_SEED)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate on one dataset: replication 0 of the config's design, or a CSV file.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset with the design's columns, in place of simulated data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the invariant checks.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> slim::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, workers } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(w) = workers {
                cfg.parallel_workers = w;
            }
            let report = run_experiment(&cfg, Some(&out))?;
            println!(
                "{} replications in {:.1}s; results in {}",
                report.records.len(),
                report.wall_clock,
                out.display()
            );
        }
        Command::Critvals {
            ell,
            ell_max,
            reps,
            path_length,
            seed,
            alpha,
            out,
        } => {
            let alphas = alpha.unwrap_or_else(|| TABLE_ALPHAS.to_vec());
            let mut rows = Vec::new();
            for k in ell..=ell_max.unwrap_or(ell).max(ell) {
                log::info!("simulating ell = {k}");
                rows.extend(simulate_rs_critical_values(k, &alphas, path_length, reps, seed)?);
            }
            match out {
                Some(path) => write_critical_values(path, &rows)?,
                None => {
                    println!("ell,alpha,cv");
                    for r in &rows {
                        println!("{},{},{}", r.ell, r.alpha, r.cv);
                    }
                }
            }
        }
        Command::Estimate { config, data } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let design = Design::new(&cfg.dgp)?;
            let data = match data {
                Some(path) => Dataset::read_csv(path)?,
                None => {
                    let mut one = cfg.clone();
                    one.reps = 1;
                    one.compare_first_order = false;
                    let report = run_experiment(&one, None)?;
                    return print_estimate(&report.records[0]).map(|_| ExitCode::SUCCESS);
                }
            };
            let rec = estimate_on(&cfg, &design, &data, 0, None)?;
            print_estimate(&rec)?;
        }
        Command::Selftest => {
            let checks = run_selftest();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                println!("{failed} of {} checks failed", checks.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_estimate(rec: &slim::harness::RepRecord) -> slim::Result<()> {
    if rec.diverged {
        return Err(slim::SlimError::Experiment("the recursion diverged".into()));
    }
    println!("gamma0,{}", rec.gamma0);
    for (k, v) in rec.estimate.iter().enumerate() {
        println!("theta_{},{v}", k + 1);
    }
    for t in &rec.tests {
        let (lo, hi) = t.ci.map_or((String::new(), String::new()), |c| (c.0.to_string(), c.1.to_string()));
        println!(
            "{}_{},statistic={},cv={},reject={},ci=[{lo},{hi}]",
            t.method, t.hypothesis, t.statistic, t.critical_value, t.reject
        );
    }
    for j in &rec.jtests {
        println!(
            "j_{},statistic={},df={},p_value={}",
            j.variant.name(),
            j.statistic,
            j.df,
            j.p_value
        );
    }
    Ok(())
}
