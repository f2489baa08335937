//! Run reports: per-iteration CSV files and JSON summaries. Every file
//! carries the hash of the configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::oracles::{PropertyCheck, RankStats};
use crate::pruner::IterRow;

/// Bumped whenever a column or field changes.
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    iteration: usize,
    loss: f64,
    sparsity: f64,
    lr: f64,
    config_hash: &'a str,
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new()
        .delimiter(b',')
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

pub fn write_rows_csv(path: &Path, rows: &[IterRow], config_hash: &str) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(CsvRow {
            iteration: r.iteration,
            loss: r.loss,
            sparsity: r.sparsity,
            lr: r.lr,
            config_hash,
        })?;
    }
    if rows.is_empty() {
        w.write_record(["iteration", "loss", "sparsity", "lr", "config_hash"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<IterRow>> {
    #[derive(Deserialize)]
    struct Row {
        iteration: usize,
        loss: f64,
        sparsity: f64,
        lr: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        out.push(IterRow {
            iteration: row.iteration,
            loss: row.loss,
            sparsity: row.sparsity,
            lr: row.lr,
        });
    }
    Ok(out)
}

/// Summary of one training or pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub criterion: Option<String>,
    pub tuning: Option<String>,
    pub strategy: Option<String>,
    pub seed: u64,
    pub iterations: usize,
    pub target_sparsity: f64,
    pub final_sparsity: f64,
    pub final_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub trainable_params: usize,
    pub rank_stats: Option<RankStats>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<IterRow>,
    pub summary: RunSummary,
}

/// One cell of a comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub criterion: String,
    pub tuning: String,
    pub strategy: String,
    pub sparsity: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub final_sparsity: f64,
    pub final_loss: f64,
    pub spearman_vs_exact: Option<f64>,
    pub top50_overlap_vs_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub criterion: String,
    pub strategy: String,
    pub sparsity: f64,
    pub seeds: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub format_version: u32,
    pub config_hash: String,
    pub cells: Vec<CellResult>,
    pub groups: Vec<GroupStats>,
    pub wall_time_s: f64,
}

impl CompareReport {
    pub fn new(config_hash: String, cells: Vec<CellResult>, wall_time_s: f64) -> Self {
        let groups = group_stats(&cells);
        Self {
            format_version: REPORT_VERSION,
            config_hash,
            cells,
            groups,
            wall_time_s,
        }
    }

    pub fn group(&self, criterion: &str, strategy: &str, sparsity: f64) -> Option<&GroupStats> {
        self.groups
            .iter()
            .find(|g| g.criterion == criterion && g.strategy == strategy && g.sparsity == sparsity)
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per (criterion, strategy, sparsity) aggregates, in first-appearance order.
pub fn group_stats(cells: &[CellResult]) -> Vec<GroupStats> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for c in cells {
        let k = (c.criterion.clone(), c.strategy.clone(), c.sparsity);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(criterion, strategy, sparsity)| {
            let acc: Vec<f64> = cells
                .iter()
                .filter(|c| c.criterion == criterion && c.strategy == strategy && c.sparsity == sparsity)
                .map(|c| c.test_accuracy)
                .collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            GroupStats {
                criterion,
                strategy,
                sparsity,
                seeds: acc.len(),
                mean_accuracy,
                std_accuracy,
            }
        })
        .collect()
}

pub fn write_cells_csv(path: &Path, cells: &[CellResult], config_hash: &str) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "criterion",
        "tuning",
        "strategy",
        "sparsity",
        "seed",
        "test_accuracy",
        "final_sparsity",
        "final_loss",
        "spearman_vs_exact",
        "top50_overlap_vs_exact",
        "config_hash",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        w.write_record([
            c.criterion.clone(),
            c.tuning.clone(),
            c.strategy.clone(),
            c.sparsity.to_string(),
            c.seed.to_string(),
            c.test_accuracy.to_string(),
            c.final_sparsity.to_string(),
            c.final_loss.to_string(),
            opt(c.spearman_vs_exact),
            opt(c.top50_overlap_vs_exact),
            config_hash.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of the oracle suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub format_version: u32,
    pub config_hash: String,
    pub checks: Vec<PropertyCheck>,
    pub passed: bool,
    pub wall_time_s: f64,
}

impl OracleReport {
    pub fn new(config_hash: String, checks: Vec<PropertyCheck>, wall_time_s: f64) -> Self {
        let passed = checks.iter().all(PropertyCheck::passed);
        Self {
            format_version: REPORT_VERSION,
            config_hash,
            checks,
            passed,
            wall_time_s,
        }
    }

    /// One `PASS`/`FAIL` line per property.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<34} measured {:.3e} {} {:.3e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    if c.upper_bound { "<=" } else { ">=" },
                    c.threshold
                )
            })
            .collect()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(criterion: &str, seed: u64, acc: f64) -> CellResult {
        CellResult {
            criterion: criterion.into(),
            tuning: "lora".into(),
            strategy: "joint".into(),
            sparsity: 0.5,
            seed,
            test_accuracy: acc,
            final_sparsity: 0.5,
            final_loss: 0.1,
            spearman_vs_exact: None,
            top50_overlap_vs_exact: Some(0.75),
        }
    }

    #[test]
    fn rows_csv_round_trip_with_lf() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![
            IterRow { iteration: 1, loss: 0.1 + 0.2, sparsity: 0.0, lr: 0.05 },
            IterRow { iteration: 2, loss: 1e-300, sparsity: 0.4375, lr: 0.05 },
        ];
        write_rows_csv(&p, &rows, "abc").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iteration,loss,sparsity,lr,config_hash\n"));
        assert!(!text.contains('\r'));
        assert!(text.lines().skip(1).all(|l| l.ends_with(",abc")));
        assert_eq!(read_rows_csv(&p).unwrap(), rows);
    }

    #[test]
    fn empty_rows_still_have_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_rows_csv(&p, &[], "h").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "iteration,loss,sparsity,lr,config_hash\n");
    }

    #[test]
    fn cells_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_cells_csv(&p, &[cell("random", 0, 0.5), cell("lora-grad", 1, 0.75)], "h").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 11));
        assert_eq!(lines[1], "random,lora,joint,0.5,0,0.5,0.5,0.1,,0.75,h");
    }

    #[test]
    fn group_stats_sample_std() {
        let cells = [cell("a", 0, 0.5), cell("a", 1, 0.7), cell("b", 0, 0.9)];
        let g = group_stats(&cells);
        assert_eq!(g.len(), 2);
        assert!((g[0].mean_accuracy - 0.6).abs() < 1e-12);
        assert!((g[0].std_accuracy - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(g[1].std_accuracy, 0.0);
    }

    #[test]
    fn oracle_lines() {
        let r = OracleReport::new(
            "h".into(),
            vec![PropertyCheck::at_most("x", 1e-9, 1e-6), PropertyCheck::at_least("y", 0.2, 0.5)],
            0.0,
        );
        assert!(!r.passed);
        let l = r.lines();
        assert!(l[0].starts_with("PASS x"));
        assert!(l[1].starts_with("FAIL y"));
    }
}
