//! Result tables: one table per source domain with three metric columns per
//! task, or a single table of per-method averages over tasks.
//!
//! Repeated runs of the same method on the same task (different seeds) are
//! averaged into one cell. The best value in each column is marked with `*`;
//! ties are all marked.

use std::fmt::Write;

use gradsep_core::metrics::MetricTriple;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run::ExperimentResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BestMarks {
    pub ccr_at_fpr10: bool,
    pub fpr95: bool,
    pub auroc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub metrics: MetricTriple,
    /// Number of ledger records averaged into this cell.
    pub runs: usize,
    pub best: BestMarks,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub method: String,
    /// Aligned with the table's task list.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainTable {
    pub source: String,
    pub tasks: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AverageTable {
    pub tasks: Vec<String>,
    /// Each cell averages the per-task means, so every task counts once.
    pub rows: Vec<Row>,
}

/// Source-domain part of a task name such as `Pr→Rw` or `Pr->Rw`.
pub fn source_domain(task: &str) -> &str {
    task.split_once('→')
        .or_else(|| task.split_once("->"))
        .map_or(task, |(s, _)| s.trim())
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

fn mean(triples: &[MetricTriple]) -> MetricTriple {
    let n = triples.len() as f64;
    MetricTriple {
        ccr_at_fpr10: triples.iter().map(|m| m.ccr_at_fpr10).sum::<f64>() / n,
        fpr95: triples.iter().map(|m| m.fpr95).sum::<f64>() / n,
        auroc: triples.iter().map(|m| m.auroc).sum::<f64>() / n,
    }
}

/// Per (method, task) mean over seeds, in first-appearance order.
struct Grid {
    methods: Vec<String>,
    tasks: Vec<String>,
    cells: Vec<Vec<Option<(MetricTriple, usize)>>>,
}

fn grid(results: &[ExperimentResult]) -> CliResult<Grid> {
    if results.is_empty() {
        return Err(CliError::Data("ledger is empty".into()));
    }
    let mut methods = Vec::new();
    let mut tasks = Vec::new();
    for r in results {
        push_unique(&mut methods, &r.variant());
        push_unique(&mut tasks, &r.task);
    }
    let cells = methods
        .iter()
        .map(|m| {
            tasks
                .iter()
                .map(|t| {
                    let runs: Vec<MetricTriple> = results
                        .iter()
                        .filter(|r| &r.variant() == m && &r.task == t)
                        .map(|r| r.metrics)
                        .collect();
                    (!runs.is_empty()).then(|| (mean(&runs), runs.len()))
                })
                .collect()
        })
        .collect();
    Ok(Grid {
        methods,
        tasks,
        cells,
    })
}

/// Marks the best entry of each metric column among the given cells.
fn mark_best(column: &mut [Option<&mut Cell>]) {
    let present = || column.iter().flatten().map(|c| c.metrics);
    let best_ccr = present()
        .map(|m| m.ccr_at_fpr10)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_fpr = present().map(|m| m.fpr95).fold(f64::INFINITY, f64::min);
    let best_auroc = present().map(|m| m.auroc).fold(f64::NEG_INFINITY, f64::max);
    for cell in column.iter_mut().flatten() {
        cell.best = BestMarks {
            ccr_at_fpr10: cell.metrics.ccr_at_fpr10 == best_ccr,
            fpr95: cell.metrics.fpr95 == best_fpr,
            auroc: cell.metrics.auroc == best_auroc,
        };
    }
}

fn mark_columns(rows: &mut [Row], num_tasks: usize) {
    for j in 0..num_tasks {
        let mut column: Vec<Option<&mut Cell>> =
            rows.iter_mut().map(|r| r.cells[j].as_mut()).collect();
        mark_best(&mut column);
    }
}

pub fn domain_tables(results: &[ExperimentResult]) -> CliResult<Vec<DomainTable>> {
    let g = grid(results)?;
    let mut sources = Vec::new();
    for t in &g.tasks {
        push_unique(&mut sources, source_domain(t));
    }
    Ok(sources
        .into_iter()
        .map(|source| {
            let cols: Vec<usize> = (0..g.tasks.len())
                .filter(|&j| source_domain(&g.tasks[j]) == source)
                .collect();
            let mut rows: Vec<Row> = g
                .methods
                .iter()
                .zip(&g.cells)
                .filter(|(_, cells)| cols.iter().any(|&j| cells[j].is_some()))
                .map(|(m, cells)| Row {
                    method: m.clone(),
                    cells: cols
                        .iter()
                        .map(|&j| {
                            cells[j].map(|(metrics, runs)| Cell {
                                metrics,
                                runs,
                                best: BestMarks::default(),
                            })
                        })
                        .collect(),
                })
                .collect();
            mark_columns(&mut rows, cols.len());
            DomainTable {
                tasks: cols.iter().map(|&j| g.tasks[j].clone()).collect(),
                source,
                rows,
            }
        })
        .collect())
}

/// Averages each method over its tasks. Every method must cover the same
/// task set, otherwise the averages would not be comparable.
pub fn average_table(results: &[ExperimentResult]) -> CliResult<AverageTable> {
    let g = grid(results)?;
    for (m, cells) in g.methods.iter().zip(&g.cells) {
        let missing: Vec<&str> = g
            .tasks
            .iter()
            .zip(cells)
            .filter(|(_, c)| c.is_none())
            .map(|(t, _)| t.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Data(format!(
                "method {m} has no results for task(s) {}; averages would cover different tasks",
                missing.join(", ")
            )));
        }
    }
    let mut rows: Vec<Row> = g
        .methods
        .iter()
        .zip(&g.cells)
        .map(|(m, cells)| {
            let per_task: Vec<MetricTriple> = cells.iter().flatten().map(|(t, _)| *t).collect();
            Row {
                method: m.clone(),
                cells: vec![Some(Cell {
                    metrics: mean(&per_task),
                    runs: cells.iter().flatten().map(|(_, n)| n).sum(),
                    best: BestMarks::default(),
                })],
            }
        })
        .collect();
    mark_columns(&mut rows, 1);
    Ok(AverageTable {
        tasks: g.tasks,
        rows,
    })
}

const METHOD_WIDTH: usize = 18;
const CELL_WIDTH: usize = 26;

fn fmt_value(out: &mut String, v: f64, best: bool) {
    let _ = write!(out, "{v:>7.2}{}", if best { '*' } else { ' ' });
}

fn render_rows(out: &mut String, headers: &[String], rows: &[Row]) {
    let _ = write!(out, "{:<METHOD_WIDTH$}", "method");
    for h in headers {
        let _ = write!(out, "| {h:<w$}", w = CELL_WIDTH - 2);
    }
    out.push('\n');
    let _ = write!(out, "{:<METHOD_WIDTH$}", "");
    for _ in headers {
        let _ = write!(out, "|{:>7} {:>7} {:>7}  ", "CCR10", "FPR95", "AUROC");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:<METHOD_WIDTH$}", row.method);
        for cell in &row.cells {
            out.push('|');
            match cell {
                Some(c) => {
                    fmt_value(out, c.metrics.ccr_at_fpr10, c.best.ccr_at_fpr10);
                    fmt_value(out, c.metrics.fpr95, c.best.fpr95);
                    fmt_value(out, c.metrics.auroc, c.best.auroc);
                    out.push(' ');
                }
                None => {
                    let _ = write!(out, "{:>7} {:>7} {:>7}  ", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
}

pub fn render_domain_tables(tables: &[DomainTable]) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "Source domain: {}", t.source);
        render_rows(&mut out, &t.tasks, &t.rows);
    }
    out
}

pub fn render_average_table(table: &AverageTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Average over {} task(s)", table.tasks.len());
    render_rows(&mut out, &[String::from("average")], &table.rows);
    out
}
