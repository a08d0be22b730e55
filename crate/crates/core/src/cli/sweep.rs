//! Sweep execution and `results.csv` emission.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cli::checkpoint::save_checkpoint;
use crate::cli::config::{ExperimentConfig, RunSpec};
use crate::error::{Error, Result};
use crate::matlib::derive_seed;
use crate::merge::memory_footprint;
use crate::metrics::{average_accuracy, backward_transfer, forgetting_error, intransigence_error, RunReport};
use crate::train::{continual_run, generate_task_suite, TrainConfig};

/// Environment variable overriding the sweep worker count.
pub const WORKERS_ENV: &str = "SLAO_WORKERS";

/// Stream separating the SGD seed from the task-suite seed.
const TRAIN_STREAM: u64 = 1 << 32;

pub const RESULTS_FILE: &str = "results.csv";

/// One line of `results.csv`. Floats are written with 17 significant digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub schedule: String,
    pub init: String,
    pub order_id: usize,
    pub seed: u64,
    pub after_task: usize,
    /// Suite task id for evaluation rows, or a metric name for summary rows.
    pub eval_task: String,
    pub score: String,
    pub loss: String,
    pub status: String,
}

/// Summary-row labels.
pub const METRIC_AA: &str = "AA";
pub const METRIC_BWT: &str = "BWT";
pub const METRIC_FORGETTING: &str = "FORGETTING";
pub const METRIC_INTRANSIGENCE: &str = "INTRANSIGENCE";
pub const METRIC_MEMORY: &str = "MEMORY";
/// Label of the single row written for a failed run.
pub const RUN_FAILED: &str = "RUN";

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub results: PathBuf,
    pub runs: usize,
    pub failed: usize,
}

fn worker_count(cfg: &ExperimentConfig) -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Validation(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cfg.workers),
    }
}

pub fn run_dir_name(index: usize) -> String {
    format!("run_{index:04}")
}

/// Executes one grid cell. Checkpoints are written under `out`.
pub fn execute_run(cfg: &ExperimentConfig, spec: &RunSpec, out: &Path) -> Result<RunReport> {
    let suite = generate_task_suite(
        cfg.num_tasks,
        cfg.dims.m,
        cfg.dims.n,
        cfg.dims.rank,
        cfg.samples_per_task,
        cfg.noise_sigma,
        spec.seed,
    )?;
    let tasks: Vec<_> = spec.order.iter().map(|&k| suite[k].clone()).collect();
    let train = TrainConfig {
        eta: cfg.train.eta,
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        seed: derive_seed(spec.seed, TRAIN_STREAM),
        init_sigma: cfg.train.init_sigma,
        ..TrainConfig::default()
    };
    let mut report = continual_run(&suite[0].w0, &tasks, spec.init, spec.strategy, spec.schedule, &train)?;
    report.meta.order_id = spec.order_id;
    report.meta.seed = spec.seed;

    let name = run_dir_name(spec.index);
    if let Some(state) = &report.final_state {
        save_checkpoint(&out.join("checkpoints").join(format!("{name}.ckpt")), &state.named_tensors())?;
    }
    let adapter_dir = out.join("adapters").join(&name);
    fs::create_dir_all(&adapter_dir).map_err(|e| Error::io(&adapter_dir, e))?;
    for (pos, pair) in report.fine_tuned.iter().enumerate() {
        save_checkpoint(
            &adapter_dir.join(format!("task_{:02}.ckpt", report.meta.order[pos])),
            &[("A".to_string(), pair.a.clone()), ("B".to_string(), pair.b.clone())],
        )?;
    }
    Ok(report)
}

/// Rows for one finished or failed run.
pub fn rows_for_run(cfg: &ExperimentConfig, spec: &RunSpec, outcome: &Result<RunReport>) -> Vec<ResultRow> {
    let row = |after_task: usize, eval_task: String, score: String, loss: String, status: &str| ResultRow {
        strategy: spec.strategy.name().to_string(),
        schedule: spec.schedule.name(),
        init: spec.init.name(),
        order_id: spec.order_id,
        seed: spec.seed,
        after_task,
        eval_task,
        score,
        loss,
        status: status.to_string(),
    };
    let report = match outcome {
        Ok(r) => r,
        Err(e) => {
            return vec![row(0, RUN_FAILED.into(), String::new(), String::new(), &format!("error: {e}"))];
        }
    };
    let t = report.num_tasks();
    let mut rows = Vec::new();
    for (k, (scores, losses)) in report.scores.iter().zip(&report.losses).enumerate() {
        for (pos, (s, l)) in scores.iter().zip(losses).enumerate() {
            rows.push(row(k + 1, spec.order[pos].to_string(), format_float(*s), format_float(*l), "ok"));
        }
    }
    let metric = |name: &str, value: Result<f64>| match value {
        Ok(v) => row(t, name.into(), format_float(v), String::new(), "ok"),
        Err(_) => row(t, name.into(), String::new(), String::new(), "undefined"),
    };
    rows.push(metric(METRIC_AA, average_accuracy(report)));
    rows.push(metric(METRIC_BWT, backward_transfer(report)));
    rows.push(metric(METRIC_FORGETTING, forgetting_error(report, t)));
    rows.push(metric(METRIC_INTRANSIGENCE, intransigence_error(report, t)));
    rows.push(metric(
        METRIC_MEMORY,
        Ok(memory_footprint(spec.strategy, t, cfg.dims.m, cfg.dims.n, cfg.dims.rank)),
    ));
    rows
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Runs every grid cell and writes `results.csv` plus checkpoints under the
/// configured output directory. A failed run is recorded, not fatal.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    for sub in [out.clone(), out.join("checkpoints"), out.join("adapters")] {
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let runs = cfg.runs()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count(cfg)? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<RunReport>> =
        pool.install(|| runs.par_iter().map(|spec| execute_run(cfg, spec, &out)).collect());

    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    let rows: Vec<ResultRow> = runs
        .iter()
        .zip(&outcomes)
        .flat_map(|(spec, outcome)| rows_for_run(cfg, spec, outcome))
        .collect();
    let results = out.join(RESULTS_FILE);
    write_rows(&results, &rows)?;
    Ok(SweepOutcome {
        results,
        runs: runs.len(),
        failed,
    })
}

/// Parameter counts per strategy for `T = 1..=num_tasks`, as CSV.
pub fn mem_table(cfg: &ExperimentConfig) -> Result<String> {
    let mut out = String::from("strategy,num_tasks,floats\n");
    for s in cfg.parsed_strategies()? {
        for t in 1..=cfg.num_tasks {
            let floats = memory_footprint(s, t, cfg.dims.m, cfg.dims.n, cfg.dims.rank);
            out.push_str(&format!("{},{t},{floats}\n", s.name()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, extra: &str) -> ExperimentConfig {
        let json = format!(
            r#"{{"dims": {{"m": 6, "n": 5, "rank": 2}}, "num_tasks": 2, "samples_per_task": 20,
                "train": {{"eta": 0.01, "steps": 10, "batch_size": 4}},
                "output_dir": {:?} {extra}}}"#,
            dir.display().to_string()
        );
        ExperimentConfig::from_json(&json, "t").unwrap()
    }

    #[test]
    fn row_count_contract() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), "");
        let out = run_sweep(&c).unwrap();
        assert_eq!((out.runs, out.failed), (1, 0));
        let text = fs::read_to_string(&out.results).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "strategy,schedule,init,order_id,seed,after_task,eval_task,score,loss,status");
        let eval_rows = lines[1..].iter().filter(|l| l.split(',').nth(6).unwrap().parse::<usize>().is_ok()).count();
        assert_eq!(eval_rows, 3);
        assert_eq!(lines.len(), 1 + 3 + 5);
        assert!(dir.path().join("checkpoints/run_0000.ckpt").exists());
        assert!(dir.path().join("adapters/run_0000/task_01.ckpt").exists());
    }

    #[test]
    fn cartesian_count() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), r#", "orders": [[0, 1], [1, 0]], "seeds": [1, 2, 3]"#);
        assert_eq!(run_sweep(&c).unwrap().runs, 6);
    }

    #[test]
    fn failed_run_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(dir.path(), "");
        c.train.eta = 50.0;
        c.train.steps = 200;
        let out = run_sweep(&c).unwrap();
        assert_eq!(out.failed, 1);
        let text = fs::read_to_string(&out.results).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("error: training diverged"));
    }

    #[test]
    fn mem_table_rows() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), r#", "strategies": ["SLAO", "IncLoRA"]"#);
        let t = mem_table(&c).unwrap();
        assert_eq!(t.lines().count(), 1 + 4);
        assert!(t.contains("SLAO,2,44\n"));
        assert!(t.contains("IncLoRA,2,66\n"));
    }
}
