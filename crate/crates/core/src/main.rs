use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use calrank::data::RecencyWeighting;
use calrank::distribution::{Divergence, RankWeighting};
use calrank::experiment::{
    evaluate_solution_files, prepare, run_experiment, sweep_csv, sweep_engine, ExperimentConfig, ScorerSpec,
};
use calrank::rerank::Engine;
use calrank::synthetic::{generate, SyntheticConfig};
use calrank::Error;

/// Confidence-aware calibrated re-ranking experiments.
#[derive(Parser)]
#[command(name = "calrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: every engine, evaluation, artifacts.
    Run(Common),
    /// Lambda sweep; the confidence-aware engine unless `--engines` names others.
    Sweep(Common),
    /// Per-group miscalibration of the test set treated as a perfect list.
    Oracle(Common),
    /// Evaluate previously exported solution files.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// A `solutions/<engine>.csv` export; repeat for several engines.
        #[arg(long = "solutions", required = true)]
        solutions: Vec<PathBuf>,
    },
    /// Write a seeded MovieLens-format fixture.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 600)]
        items: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Flags mirror the config file keys and override them.
#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Candidate pool size N.
    #[arg(long)]
    n_candidates: Option<usize>,
    /// List length K.
    #[arg(short, long)]
    k: Option<usize>,
    /// popularity | item-knn[:k] | import:<path>
    #[arg(long)]
    scorer: Option<ScorerSpec>,
    #[arg(long, value_delimiter = ',')]
    engines: Option<Vec<Engine>>,
    /// uniform | exponential:<half_life>
    #[arg(long)]
    recency: Option<RecencyWeighting>,
    /// uniform | logarithmic
    #[arg(long)]
    rank_weighting: Option<RankWeighting>,
    /// Comma-separated lambda grid.
    #[arg(long = "lambda", value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// js | hellinger
    #[arg(long)]
    divergence: Option<Divergence>,
    #[arg(long)]
    max_nodes: Option<u64>,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 3 when any solve stops on the budget.
    #[arg(long)]
    strict: bool,
}

impl Common {
    fn resolve(self) -> calrank::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_toml_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { c.$field = v; } )* };
        }
        set!(
            ratings,
            items,
            train_fraction,
            n_candidates,
            k,
            scorer,
            engines,
            recency,
            rank_weighting,
            lambda_grid,
            divergence,
            max_nodes,
            max_seconds,
            output_dir,
            seed
        );
        c.strict |= self.strict;
        Ok(c)
    }
}

fn write(path: PathBuf, text: &str) -> calrank::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn run(cmd: Command) -> calrank::Result<()> {
    match cmd {
        Command::Run(common) => {
            let config = common.resolve()?;
            let outcome = match run_experiment(&config) {
                Err(Error::BudgetExhausted { users }) => {
                    eprintln!("strict mode: {users} solve(s) stopped on the budget; see solver_gaps.csv");
                    return Err(Error::BudgetExhausted { users });
                }
                other => other?,
            };
            let report = &outcome.report;
            println!("users {} (skipped {})", report.n_users, report.skipped_users);
            for (engine, lambda) in &report.chosen_lambda {
                println!("{engine}: lambda {lambda}");
            }
            println!("engine,precision,recall,ndcg,catalog_coverage,diversity,js,hellinger");
            for e in &report.evaluation.engines {
                if let Some(g) = e.group("all") {
                    println!(
                        "{},{:.4},{:.4},{:.4},{:.2},{:.4},{:.4},{:.4}",
                        e.engine, g.precision, g.recall, g.ndcg, g.catalog_coverage, g.diversity, g.js, g.hellinger
                    );
                }
            }
            for s in &report.solver {
                if s.budget_exhausted_users > 0 {
                    println!(
                        "{}: {} user(s) stopped on the budget, max bound gap {}",
                        s.engine, s.budget_exhausted_users, s.max_bound_gap
                    );
                }
            }
            println!("artifacts in {}", config.output_dir.display());
        }
        Command::Sweep(common) => {
            let engines = common.engines.clone().unwrap_or_else(|| vec![Engine::Ccl]);
            let config = common.resolve()?;
            let prepared = prepare(&config)?;
            let mut sweeps = Vec::new();
            for engine in engines.into_iter().filter(|e| *e != Engine::None) {
                sweeps.push(sweep_engine(&prepared, engine, &config.lambda_grid)?);
            }
            let csv = sweep_csv(&sweeps);
            write(config.output_dir.join("sweep.csv"), &csv)?;
            print!("{csv}");
            for s in &sweeps {
                println!("{}: chosen lambda {}", s.engine, s.chosen);
            }
            let exhausted: usize = sweeps
                .iter()
                .flat_map(|s| &s.rows)
                .map(|r| r.budget_exhausted_users)
                .sum();
            if config.strict && exhausted > 0 {
                return Err(Error::BudgetExhausted { users: exhausted });
            }
        }
        Command::Oracle(common) => {
            let config = common.resolve()?;
            let prepared = prepare(&config)?;
            let csv = calrank::confidence::oracle_csv(&prepared.oracle());
            write(config.output_dir.join("figures").join("fig1b_oracle.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Metrics { common, solutions } => {
            let config = common.resolve()?;
            let report = evaluate_solution_files(&config, &solutions)?;
            let csv = report.to_csv();
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write(config.output_dir.join("metrics.json"), &json)?;
            write(config.output_dir.join("metrics.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Synth {
            output_dir,
            users,
            items,
            seed,
        } => {
            let cfg = SyntheticConfig {
                n_users: users,
                n_items: items,
                seed,
                ..SyntheticConfig::default()
            };
            let (ratings, movies) = generate(&cfg)?.write(&output_dir)?;
            println!("{}\n{}", ratings.display(), movies.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::BudgetExhausted { .. } => 3,
                e if e.is_usage() => 1,
                _ => 2,
            })
        }
    }
}
