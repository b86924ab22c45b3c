//! Side-by-side tables of one metric across groups of runs.
//!
//! Each input path is one group: a metrics file, or a run directory whose
//! `seed_*.csv` files are the group's seeds. With exactly two groups a `diff`
//! column holds `mean(first) - mean(second)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::metrics::{fmt_opt, mean_std, metric_index, read_metrics, MetricRow};
use crate::HarnessError;

pub const COMPARE_SCHEMA: &str = "# qsm-lab compare v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// One row per eval point.
    All,
    /// Last eval point only.
    Final,
    /// Per-seed mean over eval points, reported at the last step.
    Mean,
    /// Per-seed maximum over eval points, reported at the last step.
    Max,
}

impl Reduction {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "all" => Ok(Self::All),
            "final" => Ok(Self::Final),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(HarnessError::Usage(format!(
                "unknown reduction '{other}' (all, final, mean, max)"
            ))),
        }
    }
}

struct Group {
    name: String,
    files: Vec<PathBuf>,
    logs: Vec<Vec<MetricRow>>,
}

fn group_files(path: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed_") && n.ends_with(".csv") && !n.ends_with(".timing.csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::Usage(format!("{} holds no seed_*.csv files", path.display())));
    }
    Ok(files)
}

fn reduce(log: &[MetricRow], metric: usize, reduction: Reduction) -> Option<f64> {
    let values = log.iter().filter_map(|r| r.values[metric]);
    match reduction {
        Reduction::All | Reduction::Final => log.last().and_then(|r| r.values[metric]),
        Reduction::Mean => {
            let v: Vec<f64> = values.collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }
        Reduction::Max => values.reduce(f64::max),
    }
}

/// Builds the comparison table. All logs must share one eval grid.
pub fn compare_runs(paths: &[PathBuf], metric: &str, reduction: Reduction) -> Result<String, HarnessError> {
    if paths.is_empty() {
        return Err(HarnessError::Usage("compare needs at least one log path".into()));
    }
    let m = metric_index(metric)?;
    let mut groups = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let files = group_files(path)?;
        let logs = files.iter().map(|f| read_metrics(f)).collect::<Result<Vec<_>, _>>()?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("group")
            .replace(',', "_");
        let name = if groups.iter().any(|g: &Group| g.name == stem) {
            format!("{stem}#{}", i + 1)
        } else {
            stem
        };
        groups.push(Group { name, files, logs });
    }

    let grid: Vec<u64> = groups[0].logs[0].iter().map(|r| r.env_step).collect();
    let offending: Vec<String> = groups
        .iter()
        .flat_map(|g| g.files.iter().zip(&g.logs))
        .filter(|(_, log)| log.iter().map(|r| r.env_step).ne(grid.iter().copied()))
        .map(|(f, _)| f.display().to_string())
        .collect();
    if !offending.is_empty() {
        return Err(HarnessError::Alignment(format!(
            "eval grid differs from {}: {}",
            groups[0].files[0].display(),
            offending.join(", ")
        )));
    }

    let mut out = format!("{COMPARE_SCHEMA}\nenv_step");
    for g in &groups {
        let _ = write!(out, ",{0}_mean,{0}_std", g.name);
    }
    let with_diff = groups.len() == 2;
    if with_diff {
        out.push_str(",diff");
    }
    out.push('\n');
    let rows: Vec<usize> = match reduction {
        Reduction::All => (0..grid.len()).collect(),
        _ => grid.len().checked_sub(1).into_iter().collect(),
    };
    for i in rows {
        let _ = write!(out, "{}", grid[i]);
        let mut means = Vec::new();
        for g in &groups {
            let (mean, std) = mean_std(g.logs.iter().map(|log| match reduction {
                Reduction::All => log[i].values[m],
                r => reduce(log, m, r),
            }));
            let _ = write!(out, ",{},{}", fmt_opt(mean), fmt_opt(std));
            means.push(mean);
        }
        if with_diff {
            let diff = means[0].zip(means[1]).map(|(a, b)| a - b);
            let _ = write!(out, ",{}", fmt_opt(diff));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses a comparison table back into `(env_step, columns)` rows.
pub fn parse_table(text: &str) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>), HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(COMPARE_SCHEMA) {
        return Err(HarnessError::Csv("missing compare schema line".into()));
    }
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| HarnessError::Csv("missing header".into()))?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(crate::metrics::parse_opt).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, rows))
}
