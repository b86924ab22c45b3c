//! Versioned CSV files for metric logs and their seed aggregates.
//!
//! Every file starts with a `# qsm-lab <kind> v<N>` schema line followed by a
//! header row. Doubles use 17 significant digits; `NA` marks absent values.

use std::fmt::Write as _;
use std::path::Path;

use qsm_core::trainer::{MetricRecord, MetricsLog};

use crate::HarnessError;

pub const METRICS_SCHEMA: &str = "# qsm-lab metrics v1";
pub const AGGREGATE_SCHEMA: &str = "# qsm-lab aggregate v1";
pub const TIMING_SCHEMA: &str = "# qsm-lab timing v1";
pub const NA: &str = "NA";

/// Metric columns after `env_step`.
pub const METRIC_COLUMNS: [&str; 5] = [
    "episode_return",
    "critic_loss",
    "actor_loss",
    "mean_cosine",
    "dql_unroll_grad_norm",
];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), fmt_f64)
}

pub fn parse_opt(s: &str) -> Result<Option<f64>, HarnessError> {
    if s == NA {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| HarnessError::Csv(format!("bad number '{s}': {e}")))
}

/// One parsed row: `env_step` and the metric columns in [`METRIC_COLUMNS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub env_step: u64,
    pub values: [Option<f64>; 5],
}

impl From<&MetricRecord> for MetricRow {
    fn from(r: &MetricRecord) -> Self {
        Self {
            env_step: r.env_step,
            values: [
                Some(r.episode_return),
                r.critic_loss,
                r.actor_loss,
                r.mean_cosine,
                r.dql_unroll_grad_norm,
            ],
        }
    }
}

pub fn metric_index(name: &str) -> Result<usize, HarnessError> {
    METRIC_COLUMNS.iter().position(|c| *c == name).ok_or_else(|| {
        HarnessError::Usage(format!(
            "unknown metric '{name}' (known: {})",
            METRIC_COLUMNS.join(", ")
        ))
    })
}

pub fn render_metrics(log: &MetricsLog) -> String {
    let mut out = String::new();
    out.push_str(METRICS_SCHEMA);
    out.push('\n');
    out.push_str("env_step,");
    out.push_str(&METRIC_COLUMNS.join(","));
    out.push('\n');
    for r in &log.records {
        let row = MetricRow::from(r);
        let _ = write!(out, "{}", row.env_step);
        for v in row.values {
            let _ = write!(out, ",{}", fmt_opt(v));
        }
        out.push('\n');
    }
    out
}

pub fn render_timing(log: &MetricsLog) -> String {
    let mut out = format!("{TIMING_SCHEMA}\nenv_step,wall_time\n");
    for r in &log.records {
        let _ = writeln!(out, "{},{}", r.env_step, fmt_f64(r.wall_time));
    }
    out
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_SCHEMA) {
        return Err(HarnessError::Csv(format!("missing schema line '{METRICS_SCHEMA}'")));
    }
    let header = format!("env_step,{}", METRIC_COLUMNS.join(","));
    if lines.next() != Some(header.as_str()) {
        return Err(HarnessError::Csv("unexpected metrics header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + METRIC_COLUMNS.len() {
            return Err(HarnessError::Csv(format!("data row {} has {} fields", i + 1, fields.len())));
        }
        let env_step = fields[0]
            .parse()
            .map_err(|e| HarnessError::Csv(format!("bad env_step '{}': {e}", fields[0])))?;
        let mut values = [None; 5];
        for (slot, f) in values.iter_mut().zip(&fields[1..]) {
            *slot = parse_opt(f)?;
        }
        rows.push(MetricRow { env_step, values });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Csv(format!("cannot read {}: {e}", path.display())))?;
    parse_metrics(&text).map_err(|e| HarnessError::Csv(format!("{}: {e}", path.display())))
}

/// Mean and sample standard deviation of the present values; the deviation
/// needs at least two values.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() {
        return (None, None);
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let std = (present.len() >= 2).then(|| {
        (present.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (Some(mean), std)
}

fn same_grid(runs: &[Vec<MetricRow>]) -> bool {
    runs.windows(2).all(|w| {
        w[0].len() == w[1].len() && w[0].iter().zip(&w[1]).all(|(a, b)| a.env_step == b.env_step)
    })
}

/// Aggregate CSV (mean and std per eval point) over per-seed logs that share
/// an eval grid.
pub fn render_aggregate(runs: &[Vec<MetricRow>]) -> Result<String, HarnessError> {
    if !same_grid(runs) {
        return Err(HarnessError::Alignment("seed logs do not share an eval grid".into()));
    }
    let mut out = format!("{AGGREGATE_SCHEMA}\nenv_step,n_seeds");
    for c in METRIC_COLUMNS {
        let _ = write!(out, ",{c}_mean,{c}_std");
    }
    out.push('\n');
    let Some(first) = runs.first() else {
        return Ok(out);
    };
    for (i, row) in first.iter().enumerate() {
        let _ = write!(out, "{},{}", row.env_step, runs.len());
        for m in 0..METRIC_COLUMNS.len() {
            let (mean, std) = mean_std(runs.iter().map(|r| r[i].values[m]));
            let _ = write!(out, ",{},{}", fmt_opt(mean), fmt_opt(std));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, ret: f64) -> MetricRecord {
        MetricRecord {
            env_step: step,
            episode_return: ret,
            critic_loss: Some(0.1 + ret),
            actor_loss: None,
            mean_cosine: Some(1.0 / 3.0),
            dql_unroll_grad_norm: None,
            wall_time: 12.5,
        }
    }

    #[test]
    fn metrics_round_trip_bit_exact() {
        let log = MetricsLog {
            records: vec![record(10, std::f64::consts::PI), record(20, 1e-300)],
        };
        let text = render_metrics(&log);
        assert!(text.starts_with(METRICS_SCHEMA));
        assert!(!text.contains('\r'));
        assert!(!text.contains("12.5"));
        let rows = parse_metrics(&text).unwrap();
        for (row, rec) in rows.iter().zip(&log.records) {
            assert_eq!(row, &MetricRow::from(rec));
        }
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = fmt_f64(0.1);
        let mantissa = s.split('e').next().unwrap().replace(['.', '-'], "");
        assert_eq!(mantissa.len(), 17);
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn header_only_log() {
        let text = render_metrics(&MetricsLog::default());
        assert_eq!(text.lines().count(), 2);
        assert!(parse_metrics(&text).unwrap().is_empty());
        let agg = render_aggregate(&[vec![], vec![]]).unwrap();
        assert_eq!(agg.lines().count(), 2);
    }

    #[test]
    fn aggregate_mean_and_std() {
        let a = vec![MetricRow::from(&record(5, 1.0))];
        let b = vec![MetricRow::from(&record(5, 3.0))];
        let agg = render_aggregate(&[a, b.clone()]).unwrap();
        let row: Vec<&str> = agg.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row[0], "5");
        assert_eq!(row[1], "2");
        assert_eq!(row[2].parse::<f64>().unwrap(), 2.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), 2f64.sqrt());
        assert_eq!(row[6], NA);
        let c = vec![MetricRow::from(&record(6, 3.0))];
        assert!(matches!(render_aggregate(&[b, c]), Err(HarnessError::Alignment(_))));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_metrics("env_step\n").is_err());
        let bad = format!("{METRICS_SCHEMA}\nenv_step,{}\n1,2\n", METRIC_COLUMNS.join(","));
        assert!(parse_metrics(&bad).is_err());
    }
}
