//! Aggregation of `results.csv` into per-configuration metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cli::sweep::{format_float, ResultRow, METRIC_MEMORY};
use crate::error::{Error, Result};
use crate::metrics::opd;

/// Aggregate over all seeds and orders of one (strategy, schedule, init).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub schedule: String,
    pub init: String,
    pub runs: usize,
    pub failed: usize,
    pub aa: Option<f64>,
    pub bwt: Option<f64>,
    pub mopd: Option<f64>,
    pub aopd: Option<f64>,
    pub memory: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryOutput {
    pub rows: Vec<SummaryRow>,
    pub csv_path: PathBuf,
    pub table: String,
}

#[derive(Default)]
struct RunData {
    /// (after_task, task id, score)
    evals: Vec<(usize, usize, f64)>,
    memory: Option<f64>,
    failed: bool,
}

impl RunData {
    fn final_and_first(&self) -> Option<(usize, BTreeMap<usize, f64>, BTreeMap<usize, (usize, f64)>)> {
        let t = self.evals.iter().map(|e| e.0).max()?;
        let mut last = BTreeMap::new();
        let mut first: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(after, task, score) in &self.evals {
            if after == t {
                last.insert(task, score);
            }
            let entry = first.entry(task).or_insert((after, score));
            if after < entry.0 {
                *entry = (after, score);
            }
        }
        Some((t, last, first))
    }
}

type GroupKey = (String, String, String);
type RunKey = (usize, u64);

fn parse_float(s: &str, line: u64, field: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse {
        context: format!("results line {line}"),
        message: format!("{field} {s:?} is not a number"),
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn read_results(path: &Path) -> Result<Vec<(u64, ResultRow)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            context: path.display().to_string(),
            message: format!("{other:?}"),
        },
    })?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ResultRow>() {
        let row = rec.map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: match e.position() {
                Some(p) => format!("line {}: {e}", p.line()),
                None => e.to_string(),
            },
        })?;
        rows.push((rows.len() as u64 + 2, row));
    }
    Ok(rows)
}

/// Aggregates results rows. Groups are sorted lexicographically by
/// (strategy, schedule, init).
pub fn summarize(rows: &[(u64, ResultRow)]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<RunKey, RunData>> = BTreeMap::new();
    for (line, r) in rows {
        let run = groups
            .entry((r.strategy.clone(), r.schedule.clone(), r.init.clone()))
            .or_default()
            .entry((r.order_id, r.seed))
            .or_default();
        if r.status.starts_with("error") {
            run.failed = true;
            continue;
        }
        if r.status != "ok" {
            continue;
        }
        if let Ok(task) = r.eval_task.parse::<usize>() {
            run.evals.push((r.after_task, task, parse_float(&r.score, *line, "score")?));
        } else if r.eval_task == METRIC_MEMORY {
            run.memory = Some(parse_float(&r.score, *line, "memory")?);
        }
    }

    let mut out = Vec::new();
    for ((strategy, schedule, init), runs) in groups {
        let mut aa = Vec::new();
        let mut bwt = Vec::new();
        let mut memory = None;
        let mut failed = 0;
        // order_id -> task -> final scores over seeds
        let mut by_order: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for ((order_id, _seed), data) in &runs {
            if data.failed {
                failed += 1;
                continue;
            }
            let Some((t, last, first)) = data.final_and_first() else {
                continue;
            };
            let finals: Vec<f64> = last.values().copied().collect();
            aa.extend(mean(&finals));
            if t >= 2 {
                let diffs: Vec<f64> = first
                    .iter()
                    .filter(|(_, (after, _))| *after < t)
                    .filter_map(|(task, (_, s))| last.get(task).map(|f| f - s))
                    .collect();
                if !diffs.is_empty() {
                    bwt.push(diffs.iter().sum::<f64>() / (t - 1) as f64);
                }
            }
            memory = memory.or(data.memory);
            let order = by_order.entry(*order_id).or_default();
            for (task, s) in last {
                order.entry(task).or_default().push(s);
            }
        }
        let perf: Vec<Vec<f64>> = by_order
            .values()
            .map(|tasks| tasks.values().map(|v| mean(v).expect("non-empty")).collect())
            .collect();
        let disparity = opd(&perf).ok();
        out.push(SummaryRow {
            strategy,
            schedule,
            init,
            runs: runs.len(),
            failed,
            aa: mean(&aa),
            bwt: mean(&bwt),
            mopd: disparity.as_ref().map(|d| d.mopd),
            aopd: disparity.as_ref().map(|d| d.aopd),
            memory,
        });
    }
    Ok(out)
}

fn opt_csv(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn opt_table(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

pub fn render_table(rows: &[SummaryRow]) -> String {
    let header = ["strategy", "schedule", "init", "runs", "failed", "AA", "BWT", "MOPD", "AOPD", "memory"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.clone(),
                r.schedule.clone(),
                r.init.clone(),
                r.runs.to_string(),
                r.failed.to_string(),
                opt_table(r.aa),
                opt_table(r.bwt),
                opt_table(r.mopd),
                opt_table(r.aopd),
                r.memory.map(|m| format!("{m}")).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let fmt_line = |items: Vec<&str>| {
        items
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_line(header.to_vec());
    out.push('\n');
    for row in &cells {
        out.push_str(&fmt_line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Writes `summary.csv` and `summary.txt` next to the results file.
pub fn emit_summary(results_csv: &Path) -> Result<SummaryOutput> {
    let rows = summarize(&read_results(results_csv)?)?;
    let dir = results_csv.parent().unwrap_or(Path::new("."));
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", csv_path.display()));
    w.write_record(["strategy", "schedule", "init", "runs", "failed", "aa", "bwt", "mopd", "aopd", "memory"])
        .map_err(io)?;
    for r in &rows {
        w.write_record([
            r.strategy.clone(),
            r.schedule.clone(),
            r.init.clone(),
            r.runs.to_string(),
            r.failed.to_string(),
            opt_csv(r.aa),
            opt_csv(r.bwt),
            opt_csv(r.mopd),
            opt_csv(r.aopd),
            r.memory.map(|m| format!("{m}")).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let table = render_table(&rows);
    let txt = dir.join("summary.txt");
    fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    Ok(SummaryOutput { rows, csv_path, table })
}
