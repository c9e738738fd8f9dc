use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const METRICS_HEADER: &str = "run_id,seed,phase,index,metric,value";
pub const SUMMARY_HEADER: &str = "condition,seed,metric,mean,ci95,n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

/// One measured value: a training loss at an iteration or a test metric of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub phase: Phase,
    /// Iteration (train) or episode (test).
    pub index: usize,
    pub metric: String,
    pub value: f64,
}

/// Mean with its 95% confidence half-width over test episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub condition: String,
    /// `None` for the pool over all seeds.
    pub seed: Option<u64>,
    pub metric: String,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

/// `(mean, 1.96·s/√n)` with the `n − 1` sample deviation.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64), HarnessError> {
    let n = values.len();
    if n < 2 {
        return Err(HarnessError::Summary(format!("need at least 2 values, got {n}")));
    }
    if values.iter().all(|&v| v == values[0]) {
        // Summation rounding would otherwise leave a spurious spread.
        return Ok((values[0], 0.0));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

/// Per-seed and pooled summaries of the test records, grouped by run and metric.
pub fn summarize(records: &[MetricsRecord]) -> Result<Vec<Summary>, HarnessError> {
    let mut groups: BTreeMap<(&str, &str, Option<u64>), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == Phase::Test) {
        groups.entry((&r.run_id, &r.metric, Some(r.seed))).or_default().push(r.value);
        groups.entry((&r.run_id, &r.metric, None)).or_default().push(r.value);
    }
    if groups.is_empty() {
        return Err(HarnessError::Summary("no test records".into()));
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((run, metric, seed), values) in groups {
        let (mean, ci95) = mean_ci95(&values)
            .map_err(|e| HarnessError::Summary(format!("{run}/{metric}: {e}")))?;
        out.push(Summary {
            condition: run.to_string(),
            seed,
            metric: metric.to_string(),
            mean,
            ci95,
            n: values.len(),
        });
    }
    // Pooled rows after the per-seed rows of each condition.
    out.sort_by(|a, b| {
        (&a.condition, &a.metric, a.seed.is_none(), a.seed).cmp(&(&b.condition, &b.metric, b.seed.is_none(), b.seed))
    });
    Ok(out)
}

/// The pooled summary of `condition`, if present.
pub fn pooled<'a>(summaries: &'a [Summary], condition: &str) -> Option<&'a Summary> {
    summaries
        .iter()
        .find(|s| s.condition == condition && s.seed.is_none())
}

/// Values at 17 significant digits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text of `records`; rejects non-finite values and duplicate keys.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String, HarnessError> {
    let mut seen = HashSet::new();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        if !r.value.is_finite() {
            return Err(HarnessError::Summary(format!(
                "non-finite {} at {}/{}/{}",
                r.metric, r.run_id, r.seed, r.index
            )));
        }
        if !seen.insert((&r.run_id, r.seed, r.phase, r.index, &r.metric)) {
            return Err(HarnessError::Summary(format!(
                "duplicate record {}/{}/{}/{}/{}",
                r.run_id,
                r.seed,
                r.phase.name(),
                r.index,
                r.metric
            )));
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run_id,
            r.seed,
            r.phase.name(),
            r.index,
            r.metric,
            format_value(r.value)
        );
    }
    Ok(out)
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let seed = s.seed.map_or("pooled".to_string(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{seed},{},{},{},{}",
            s.condition,
            s.metric,
            format_value(s.mean),
            format_value(s.ci95),
            s.n
        );
    }
    out
}

/// Reads records back from [`metrics_csv`] output.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(HarnessError::Summary("missing metrics header".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || HarnessError::Summary(format!("metrics line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(MetricsRecord {
                run_id: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                phase: match f[2] {
                    "train" => Phase::Train,
                    "test" => Phase::Test,
                    _ => return Err(bad()),
                },
                index: f[3].parse().map_err(|_| bad())?,
                metric: f[4].to_string(),
                value: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
