//! Sweep orchestration: build the logging and skyline references, simulate
//! logs over the N grid, train every method per run, and emit CSV tables.
//!
//! Each (method, n, run) cell is deterministic from seeds derived off the
//! master seed and the cell coordinates, writes its own row file under
//! `rows/`, and is skipped when that file already exists, so interrupted
//! sweeps resume where they stopped. Cells sharing (n, run) reuse one
//! simulated log. `results.csv` and `summary.csv` are rebuilt from the row
//! files, so they reproduce bit-exactly after deletion.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use cltr_core::data::{
    apply_minmax, generate_synthetic, load_ltr_dataset, minmax_bounds, subsample_queries,
    Dataset, Split,
};
use cltr_core::evaluate::{ndcg_at_k, EvalMode};
use cltr_core::policy::{load_policy, save_policy, RankingPolicy, Scorer, ScorerKind};
use cltr_core::rng::substream_seed;
use cltr_core::safety::SafetyConfig;
use cltr_core::simulate::{simulate_sessions, ClickLog};
use cltr_core::train::{train_policy, train_skyline, ObjectiveKind, TrainConfig, TrainReport};
use cltr_core::{CltrError, Result};

use crate::config::{DataSource, ExperimentConfig, InitPolicy, LoggingSource, MethodKind, MethodSpec};
use crate::report::{
    sort_rows, summarize, write_results_csv, write_summary_csv, ResultRow, RESULTS_HEADER,
};

// Stream labels of the experiment layer (the core reserves 0x01..0x07).
const LBL_LOGGING_SUBSET: u64 = 0x20;
const LBL_LOGGING_TRAIN: u64 = 0x21;
const LBL_SKYLINE_TRAIN: u64 = 0x22;
const LBL_SIM_TRAIN: u64 = 0x23;
const LBL_SIM_VALIDATION: u64 = 0x24;
const LBL_CELL_TRAIN: u64 = 0x25;
const LBL_EVAL: u64 = 0x26;

fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

fn cell_index(n: usize, run: usize) -> u64 {
    ((n as u64) << 24) | run as u64
}

/// Everything shared across sweep cells.
pub struct ExperimentEnv {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub logging: RankingPolicy,
    pub skyline: RankingPolicy,
    pub logging_ndcg_expected: f64,
    pub logging_ndcg_greedy: f64,
    pub skyline_ndcg_expected: f64,
    pub skyline_ndcg_greedy: f64,
}

/// Load or generate the configured dataset splits.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let (mut train, mut validation, mut test) = match &config.source {
        DataSource::Synthetic(spec) => {
            let synth = generate_synthetic(spec)?;
            (synth.train, synth.validation, synth.test)
        }
        DataSource::Files { train, validation, test } => (
            load_ltr_dataset(train, Split::Train)?,
            load_ltr_dataset(validation, Split::Validation)?,
            load_ltr_dataset(test, Split::Test)?,
        ),
    };
    if config.normalize {
        let bounds = minmax_bounds(&train);
        apply_minmax(&mut train, &bounds);
        apply_minmax(&mut validation, &bounds);
        apply_minmax(&mut test, &bounds);
    }
    Ok((train, validation, test))
}

fn reference_train_config(config: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveKind::Dr,
        learning_rate: config.logging_learning_rate,
        max_epochs: config.logging_epochs,
        patience: (config.logging_epochs / 5).max(10),
        batch_queries: config.train.batch_queries,
        mc_samples_per_query: config.train.mc_samples,
        seed,
        momentum: 0.0,
        detached_penalty: false,
    }
}

fn zero_policy(config: &ExperimentConfig, feature_dim: usize) -> Result<RankingPolicy> {
    let scorer = match config.scorer_kind {
        ScorerKind::Linear => Scorer::linear(feature_dim),
        ScorerKind::TwoLayer => Scorer::two_layer(feature_dim, config.hidden_dim),
    };
    RankingPolicy::new(scorer, config.top_k, config.temperature)
}

/// Train the production ranker on a label fraction of the train queries.
pub fn train_logging_policy(
    config: &ExperimentConfig,
    train: &Dataset,
    validation: &Dataset,
) -> Result<RankingPolicy> {
    match &config.logging {
        LoggingSource::Load(path) => load_policy(path),
        LoggingSource::TrainFraction(fraction) => {
            let subset_seed = substream_seed(config.seed, LBL_LOGGING_SUBSET, 0);
            let subset = subsample_queries(train, *fraction, subset_seed)?;
            let init = zero_policy(config, train.feature_dim)?;
            let tc = reference_train_config(
                config,
                substream_seed(config.seed, LBL_LOGGING_TRAIN, 0),
            );
            let report = train_skyline(&init, &subset, validation, &config.bias, &tc)?;
            Ok(report.final_policy)
        }
    }
}

/// Build the shared experiment state; logging and skyline policies are
/// cached in `output_dir` and reloaded on resume.
pub fn build_env(config: &ExperimentConfig, output_dir: &Path) -> Result<ExperimentEnv> {
    std::fs::create_dir_all(output_dir)?;
    let (train, validation, test) = load_datasets(config)?;

    let logging_path = output_dir.join("logging_policy.txt");
    let logging = if logging_path.exists() {
        load_policy(&logging_path)?
    } else {
        let policy = train_logging_policy(config, &train, &validation)?;
        save_policy(&policy, &logging_path)?;
        policy
    };

    let skyline_path = output_dir.join("skyline_policy.txt");
    let skyline = if skyline_path.exists() {
        load_policy(&skyline_path)?
    } else {
        let init = zero_policy(config, train.feature_dim)?;
        let tc = reference_train_config(
            config,
            substream_seed(config.seed, LBL_SKYLINE_TRAIN, 0),
        );
        let report = train_skyline(&init, &train, &validation, &config.bias, &tc)?;
        save_policy(&report.final_policy, &skyline_path)?;
        report.final_policy
    };

    let eval_seed = substream_seed(config.seed, LBL_EVAL, 0);
    let eval = |policy: &RankingPolicy, mode: EvalMode| -> Result<f64> {
        Ok(ndcg_at_k(policy, &test, config.eval_k, mode, config.eval_mc_samples, eval_seed)?
            .ndcg_at_k)
    };
    let logging_ndcg_expected = eval(&logging, EvalMode::Expected)?;
    let logging_ndcg_greedy = eval(&logging, EvalMode::Greedy)?;
    let skyline_ndcg_expected = eval(&skyline, EvalMode::Expected)?;
    let skyline_ndcg_greedy = eval(&skyline, EvalMode::Greedy)?;

    Ok(ExperimentEnv {
        config: config.clone(),
        train,
        validation,
        test,
        logging,
        skyline,
        logging_ndcg_expected,
        logging_ndcg_greedy,
        skyline_ndcg_expected,
        skyline_ndcg_greedy,
    })
}

impl ExperimentEnv {
    /// Resolve a method at log size `n` into a concrete training objective;
    /// safety parameters are validated through [`SafetyConfig`].
    pub fn resolve_objective(&self, method: &MethodSpec, n: usize) -> Result<ObjectiveKind> {
        Ok(match &method.kind {
            MethodKind::Ips => ObjectiveKind::Ips,
            MethodKind::Dr => ObjectiveKind::Dr,
            MethodKind::SafeIps { delta } => {
                ObjectiveKind::SafeIps { delta: SafetyConfig::safe_ips(*delta)?.delta }
            }
            MethodKind::SafeDr { delta } => {
                ObjectiveKind::SafeDr { delta: SafetyConfig::safe_dr(*delta)?.delta }
            }
            MethodKind::Prpo { schedule } => {
                let safety = SafetyConfig::prpo(*schedule, n)?;
                ObjectiveKind::Prpo {
                    eps_minus: safety.epsilon_minus,
                    eps_plus: safety.epsilon_plus,
                }
            }
        })
    }

    /// Simulate the shared training and validation logs of a (n, run) cell.
    pub fn simulate_cell_logs(&self, n: usize, run: usize) -> Result<(ClickLog, ClickLog)> {
        let idx = cell_index(n, run);
        let train_log = simulate_sessions(
            &self.logging,
            &self.train,
            &self.config.bias,
            n,
            self.config.adversarial,
            substream_seed(self.config.seed, LBL_SIM_TRAIN, idx),
        )?;
        let n_validation = ((self.config.validation_fraction * n as f64).ceil() as usize).max(1);
        let validation_log = simulate_sessions(
            &self.logging,
            &self.validation,
            &self.config.bias,
            n_validation,
            self.config.adversarial,
            substream_seed(self.config.seed, LBL_SIM_VALIDATION, idx),
        )?;
        Ok((train_log, validation_log))
    }

    /// Train one method on a simulated cell and evaluate it on the test split.
    pub fn run_cell(
        &self,
        method: &MethodSpec,
        n: usize,
        run: usize,
        train_log: &ClickLog,
        validation_log: &ClickLog,
    ) -> Result<(ResultRow, TrainReport)> {
        let started = Instant::now();
        let objective = self.resolve_objective(method, n)?;
        let warm_start = match self.config.train.init {
            InitPolicy::Logging => true,
            InitPolicy::Zeros => false,
            // The safe objectives are anchored to the production policy and
            // deploy as updates of it; the unconstrained baselines follow
            // the from-scratch protocol.
            InitPolicy::Auto => !matches!(method.kind, MethodKind::Ips | MethodKind::Dr),
        };
        let init = if warm_start {
            self.logging.clone()
        } else {
            zero_policy(&self.config, self.train.feature_dim)?
        };
        let tc = TrainConfig {
            objective,
            learning_rate: self.config.train.learning_rate,
            max_epochs: self.config.train.max_epochs,
            patience: self.config.train.patience,
            batch_queries: self.config.train.batch_queries,
            mc_samples_per_query: self.config.train.mc_samples,
            seed: substream_seed(
                self.config.seed ^ fnv1a(&method.name),
                LBL_CELL_TRAIN,
                cell_index(n, run),
            ),
            momentum: self.config.train.momentum,
            detached_penalty: self.config.train.detached_penalty,
        };
        let report = train_policy(
            &init,
            train_log,
            validation_log,
            &self.train,
            &self.validation,
            &tc,
        )?;
        let eval_seed = substream_seed(self.config.seed, LBL_EVAL, 0);
        let expected = ndcg_at_k(
            &report.final_policy,
            &self.test,
            self.config.eval_k,
            EvalMode::Expected,
            self.config.eval_mc_samples,
            eval_seed,
        )?;
        let greedy = ndcg_at_k(
            &report.final_policy,
            &self.test,
            self.config.eval_k,
            EvalMode::Greedy,
            0,
            eval_seed,
        )?;
        let row = ResultRow {
            method: method.name.clone(),
            n,
            run,
            ndcg_expected: expected.ndcg_at_k,
            ndcg_greedy: greedy.ndcg_at_k,
            logging_ndcg: self.logging_ndcg_expected,
            skyline_ndcg: self.skyline_ndcg_expected,
            objective_final: report.best_validation_value,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        Ok((row, report))
    }

    fn reference_row(&self, name: &str, expected: f64, greedy: f64) -> ResultRow {
        ResultRow {
            method: name.into(),
            n: 0,
            run: 0,
            ndcg_expected: expected,
            ndcg_greedy: greedy,
            logging_ndcg: self.logging_ndcg_expected,
            skyline_ndcg: self.skyline_ndcg_expected,
            objective_final: 0.0,
            wall_time_seconds: 0.0,
        }
    }
}

fn rows_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("rows")
}

fn cell_file(output_dir: &Path, method: &str, n: usize, run: usize) -> PathBuf {
    rows_dir(output_dir).join(format!("{method}__{n}__{run}.csv"))
}

fn write_row_file(path: &Path, row: &ResultRow) -> Result<()> {
    let text = format!("{RESULTS_HEADER}\n{}\n", row.to_csv_line());
    std::fs::write(path, text)?;
    Ok(())
}

fn read_row_file(path: &Path) -> Result<ResultRow> {
    let text = std::fs::read_to_string(path)?;
    let rows = crate::report::parse_results_csv(&text)?;
    rows.into_iter().next().ok_or_else(|| CltrError::Parse {
        line: 0,
        message: format!("empty row file {}", path.display()),
    })
}

/// Run the full sweep. Existing row files are kept; missing cells are
/// computed (in parallel when `config.workers > 1`) and the merged
/// `results.csv` / `summary.csv` are rewritten from the row files.
pub fn run_experiment(config: &ExperimentConfig, output_dir: &Path) -> Result<Vec<ResultRow>> {
    let env = build_env(config, output_dir)?;
    std::fs::create_dir_all(rows_dir(output_dir))?;

    // Reference rows for the logging and skyline policies.
    for (name, expected, greedy) in [
        ("logging", env.logging_ndcg_expected, env.logging_ndcg_greedy),
        ("skyline", env.skyline_ndcg_expected, env.skyline_ndcg_greedy),
    ] {
        let path = cell_file(output_dir, name, 0, 0);
        if !path.exists() {
            write_row_file(&path, &env.reference_row(name, expected, greedy))?;
        }
    }

    // (n, run) groups whose cells share a simulated log.
    let groups: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.n_runs).map(move |run| (n, run)))
        .collect();

    let process_group = |&(n, run): &(usize, usize)| -> Result<()> {
        let pending: Vec<&MethodSpec> = config
            .methods
            .iter()
            .filter(|m| !cell_file(output_dir, &m.name, n, run).exists())
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let (train_log, validation_log) = env.simulate_cell_logs(n, run)?;
        for method in pending {
            let cell = cell_file(output_dir, &method.name, n, run);
            match env.run_cell(method, n, run, &train_log, &validation_log) {
                Ok((row, _)) => write_row_file(&cell, &row)?,
                Err(e) => {
                    // A failed cell is recorded and the sweep continues.
                    eprintln!("cell {method} n={n} run={run} failed: {e}");
                    std::fs::write(cell.with_extension("err"), e.to_string())?;
                }
            }
        }
        Ok(())
    };

    if config.workers <= 1 {
        for group in &groups {
            process_group(group)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for _ in 0..config.workers.min(groups.len()) {
                handles.push(scope.spawn(|| -> Result<()> {
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(group) = groups.get(i) else { return Ok(()) };
                        process_group(group)?;
                    }
                }));
            }
            for handle in handles {
                handle.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
    }

    merge_outputs(config, output_dir)
}

/// Rebuild `results.csv` and `summary.csv` from the row files.
pub fn merge_outputs(config: &ExperimentConfig, output_dir: &Path) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for name in ["logging", "skyline"] {
        let path = cell_file(output_dir, name, 0, 0);
        if path.exists() {
            rows.push(read_row_file(&path)?);
        }
    }
    for method in &config.methods {
        for &n in &config.n_grid {
            for run in 0..config.n_runs {
                let path = cell_file(output_dir, &method.name, n, run);
                if path.exists() {
                    rows.push(read_row_file(&path)?);
                }
            }
        }
    }
    sort_rows(&mut rows);

    // Consistency: one logging policy per config, so one logging NDCG.
    if let Some(first) = rows.first() {
        let reference = first.logging_ndcg;
        for row in &rows {
            if row.logging_ndcg != reference {
                return Err(CltrError::Contract(format!(
                    "row {}/{}/{} carries logging_ndcg {} != {}",
                    row.method, row.n, row.run, row.logging_ndcg, reference
                )));
            }
        }
    }

    std::fs::write(output_dir.join("results.csv"), write_results_csv(&rows))?;
    let summary = summarize(&rows);
    std::fs::write(output_dir.join("summary.csv"), write_summary_csv(&summary))?;
    Ok(rows)
}
