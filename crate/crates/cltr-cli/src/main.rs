//! `cltr`: counterfactual LTR experiments from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cltr_cli::config::{ExperimentConfig, MethodSpec};
use cltr_cli::experiment::{
    build_env, load_datasets, merge_outputs, run_experiment, train_logging_policy,
};
use cltr_core::data::save_ltr_dataset;
use cltr_core::evaluate::{ndcg_at_k, EvalMode};
use cltr_core::policy::{load_policy, save_policy};
use cltr_core::simulate::ClickLog;
use cltr_core::Result;

#[derive(Parser)]
#[command(
    name = "cltr",
    version,
    about = "Counterfactual learning-to-rank: click simulation, safe off-policy training, sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (flat key = value text); defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for policies, logs, rows and CSV tables.
    #[arg(long, default_value = "runs/out")]
    output: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset splits as SVMLight-with-qid files.
    GenerateData(CommonArgs),
    /// Train the production (logging) ranker on the label fraction.
    TrainLogging(CommonArgs),
    /// Simulate click logs under the logging policy.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Training-session count; defaults to the largest n_grid entry.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one method on previously simulated logs.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Method spec (e.g. `dr`, `safe_dr:0.95`, `prpo:inv_n:100`);
        /// defaults to the first configured method.
        #[arg(long)]
        method: Option<String>,
    },
    /// NDCG of a saved policy on the test split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy file; defaults to <output>/logging_policy.txt.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run the full (method, N, run) sweep and write CSV tables.
    Experiment(CommonArgs),
    /// Rebuild results.csv and summary.csv from the per-cell row files.
    Summarize(CommonArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(common) => {
            let config = common.load()?;
            let (train, validation, test) = load_datasets(&config)?;
            std::fs::create_dir_all(&common.output)?;
            for (ds, name) in
                [(&train, "train"), (&validation, "validation"), (&test, "test")]
            {
                let path = common.output.join(format!("{name}.svmlight"));
                save_ltr_dataset(ds, &path)?;
                println!("wrote {} ({} queries)", path.display(), ds.n_queries());
            }
        }
        Command::TrainLogging(common) => {
            let config = common.load()?;
            let (train, validation, test) = load_datasets(&config)?;
            std::fs::create_dir_all(&common.output)?;
            let policy = train_logging_policy(&config, &train, &validation)?;
            let path = common.output.join("logging_policy.txt");
            save_policy(&policy, &path)?;
            let ndcg = ndcg_at_k(
                &policy,
                &test,
                config.eval_k,
                EvalMode::Expected,
                config.eval_mc_samples,
                config.seed,
            )?;
            println!("wrote {} (test NDCG@{} = {:.4})", path.display(), config.eval_k, ndcg.ndcg_at_k);
        }
        Command::Simulate { common, n } => {
            let config = common.load()?;
            let env = build_env(&config, &common.output)?;
            let n = n.unwrap_or_else(|| *config.n_grid.last().expect("validated non-empty"));
            let (train_log, validation_log) = env.simulate_cell_logs(n, 0)?;
            let train_path = common.output.join("train_log.txt");
            let validation_path = common.output.join("validation_log.txt");
            train_log.save(&train_path)?;
            validation_log.save(&validation_path)?;
            println!(
                "wrote {} ({} sessions) and {} ({} sessions)",
                train_path.display(),
                train_log.n,
                validation_path.display(),
                validation_log.n
            );
        }
        Command::Train { common, method } => {
            let config = common.load()?;
            let env = build_env(&config, &common.output)?;
            let method = match method {
                Some(spec) => MethodSpec::parse(&spec)?,
                None => config.methods[0].clone(),
            };
            let train_path = common.output.join("train_log.txt");
            let validation_path = common.output.join("validation_log.txt");
            let (train_log, validation_log) = if train_path.exists() && validation_path.exists()
            {
                (
                    ClickLog::load(&train_path, &env.train)?,
                    ClickLog::load(&validation_path, &env.validation)?,
                )
            } else {
                let n = *config.n_grid.last().expect("validated non-empty");
                env.simulate_cell_logs(n, 0)?
            };
            let (row, report) =
                env.run_cell(&method, train_log.n, 0, &train_log, &validation_log)?;
            let policy_path = common.output.join(format!("policy_{}.txt", method.name));
            save_policy(&report.final_policy, &policy_path)?;
            let report_path = common.output.join(format!("train_report_{}.json", method.name));
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "{}: NDCG@{} expected {:.4} greedy {:.4} (logging {:.4}, skyline {:.4})",
                method.name,
                config.eval_k,
                row.ndcg_expected,
                row.ndcg_greedy,
                row.logging_ndcg,
                row.skyline_ndcg
            );
            println!("wrote {} and {}", policy_path.display(), report_path.display());
        }
        Command::Evaluate { common, policy } => {
            let config = common.load()?;
            let (_, _, test) = load_datasets(&config)?;
            let path = policy.unwrap_or_else(|| common.output.join("logging_policy.txt"));
            let policy = load_policy(&path)?;
            let expected = ndcg_at_k(
                &policy,
                &test,
                config.eval_k,
                EvalMode::Expected,
                config.eval_mc_samples,
                config.seed,
            )?;
            let greedy =
                ndcg_at_k(&policy, &test, config.eval_k, EvalMode::Greedy, 0, config.seed)?;
            std::fs::create_dir_all(&common.output)?;
            let out = common.output.join("eval.json");
            std::fs::write(&out, serde_json::to_string_pretty(&expected)?)?;
            println!(
                "{}: NDCG@{} expected {:.4} greedy {:.4}",
                path.display(),
                config.eval_k,
                expected.ndcg_at_k,
                greedy.ndcg_at_k
            );
        }
        Command::Experiment(common) => {
            let config = common.load()?;
            let rows = run_experiment(&config, &common.output)?;
            println!(
                "{} rows -> {} and {}",
                rows.len(),
                common.output.join("results.csv").display(),
                common.output.join("summary.csv").display()
            );
        }
        Command::Summarize(common) => {
            let config = common.load()?;
            let rows = merge_outputs(&config, &common.output)?;
            println!("summarized {} rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
