use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use super::metrics::{format_value, pooled, summarize, MetricsRecord, Summary};
use super::run::{create_dir, run_on_banks, write_file, write_tables, RunOutput};
use super::HarnessError;
use crate::mlti::MixMode;
use crate::taskgen::{build_bank, split_pools, TaskBank};

/// The four interpolation conditions compared by the ablation and the sweep.
pub const CONDITIONS: [(&str, MixMode); 4] = [
    ("vanilla", MixMode::Vanilla),
    ("intra", MixMode::Intra),
    ("cross", MixMode::Cross),
    ("mlti", MixMode::Both),
];

/// Results of several conditions gathered by one collector.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOutput {
    /// `(condition, output)` in [`CONDITIONS`] order.
    pub runs: Vec<(String, RunOutput)>,
    pub records: Vec<MetricsRecord>,
    pub summaries: Vec<Summary>,
}

impl ComparisonOutput {
    fn collect(runs: Vec<(String, RunOutput)>) -> Result<Self, HarnessError> {
        let records: Vec<MetricsRecord> = runs.iter().flat_map(|(_, o)| o.records.clone()).collect();
        let summaries = summarize(&records)?;
        Ok(Self {
            runs,
            records,
            summaries,
        })
    }

    /// Pooled (seed-averaged) mean of a condition.
    pub fn mean(&self, condition: &str) -> Option<f64> {
        let (_, out) = self.runs.iter().find(|(c, _)| c == condition)?;
        pooled(&out.summaries, &out.config.run_id).map(|s| s.mean)
    }
}

/// `config` with the interpolation mode of `condition` and a derived run id.
pub fn condition_config(config: &RunConfig, condition: &str, mode: MixMode) -> RunConfig {
    let mut c = config.clone();
    c.mix.mode = mode;
    c.run_id = format!("{}-{condition}", config.run_id);
    c
}

/// Runs vanilla, intra-task, cross-task and full interpolation with otherwise
/// identical settings (same training episodes and test episodes per seed).
pub fn ablation(config: &RunConfig) -> Result<ComparisonOutput, HarnessError> {
    config.validate()?;
    let bank = build_bank(&config.bank, config.bank_seed)?;
    let runs = CONDITIONS
        .iter()
        .map(|&(name, mode)| {
            let c = condition_config(config, name, mode);
            Ok((name.to_string(), run_on_banks(&c, &bank, &bank)?))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    ComparisonOutput::collect(runs)
}

/// Trains on the configured bank and evaluates on `target_bank`'s meta-test pool.
pub fn cross_domain(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let Some(target) = &config.target_bank else {
        return Err(HarnessError::Config("cross-domain needs target_bank".into()));
    };
    let source = build_bank(&config.bank, config.bank_seed)?;
    let target = build_bank(target, config.bank_seed)?;
    run_on_banks(config, &source, &target)
}

/// One condition at one pool size.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub pool_size: usize,
    pub condition: String,
    /// Pooled over seeds.
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub points: Vec<SweepPoint>,
    pub records: Vec<MetricsRecord>,
    pub summaries: Vec<Summary>,
    /// Meta-test pool shared by every point.
    pub test_pool: Vec<usize>,
}

impl SweepOutput {
    pub fn mean(&self, pool_size: usize, condition: &str) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.pool_size == pool_size && p.condition == condition)
            .map(|p| p.summary.mean)
    }
}

/// Runs every condition at every meta-train pool size. Pools are prefixes of
/// one seeded permutation, so larger pools contain smaller ones and the
/// meta-test pool never changes.
pub fn sweep_tasks(config: &RunConfig) -> Result<SweepOutput, HarnessError> {
    config.validate()?;
    let full = build_bank(&config.bank, config.bank_seed)?;
    let (_, test_count) = config.bank.counts();
    let mut points = Vec::new();
    let mut records = Vec::new();
    let mut test_pool: Option<Vec<usize>> = None;
    for &size in &config.sweep.pool_sizes {
        let bank: TaskBank = split_pools(full.clone(), size, test_count, config.bank_seed)?;
        match &test_pool {
            Some(p) if *p != bank.meta_test_pool => {
                return Err(HarnessError::Config(format!(
                    "meta-test pool changed at pool size {size}"
                )))
            }
            _ => test_pool = Some(bank.meta_test_pool.clone()),
        }
        for &(name, mode) in &CONDITIONS {
            let mut c = condition_config(config, name, mode);
            c.run_id = format!("{}-p{size}", c.run_id);
            c.bank = bank.spec.clone();
            let out = run_on_banks(&c, &bank, &bank)?;
            let summary = pooled(&out.summaries, &c.run_id)
                .cloned()
                .ok_or_else(|| HarnessError::Summary(format!("no summary for {}", c.run_id)))?;
            points.push(SweepPoint {
                pool_size: size,
                condition: name.to_string(),
                summary,
            });
            records.extend(out.records);
        }
    }
    let summaries = summarize(&records)?;
    Ok(SweepOutput {
        points,
        records,
        summaries,
        test_pool: test_pool.unwrap_or_default(),
    })
}

pub const SWEEP_HEADER: &str = "pool_size,condition,metric,mean,ci95,n";

/// Plot-ready rows, optionally restricted to one condition.
pub fn sweep_csv(points: &[SweepPoint], condition: Option<&str>) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points.iter().filter(|p| condition.is_none_or(|c| c == p.condition)) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.pool_size,
            p.condition,
            p.summary.metric,
            format_value(p.summary.mean),
            format_value(p.summary.ci95),
            p.summary.n
        );
    }
    out
}

/// Line chart of mean metric against pool size, one line per condition,
/// with 95% interval whiskers.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 4] = ["#444444", "#1f77b4", "#ff7f0e", "#2ca02c"];
    let mut sizes: Vec<usize> = points.iter().map(|p| p.pool_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let lo = points.iter().map(|p| p.summary.mean - p.summary.ci95).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.summary.mean + p.summary.ci95).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let x = |size: usize| {
        let k = sizes.iter().position(|&s| s == size).unwrap_or(0) as f64;
        M + k * (W - 2.0 * M) / (sizes.len().max(2) - 1) as f64
    };
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(svg, "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>", H - M);
    for &s in &sizes {
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{s}</text>", x(s), H - M + 18.0);
    }
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", M - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">meta-train pool size</text>", W / 2.0, H - 12.0);
    for (k, (name, _)) in CONDITIONS.iter().enumerate() {
        let series: Vec<&SweepPoint> = points.iter().filter(|p| p.condition == *name).collect();
        if series.is_empty() {
            continue;
        }
        let color = COLORS[k];
        let path: Vec<String> = series
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.pool_size), y(p.summary.mean)))
            .collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for p in &series {
            let px = x(p.pool_size);
            let _ = writeln!(
                svg,
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>",
                y(p.summary.mean - p.summary.ci95),
                y(p.summary.mean + p.summary.ci95)
            );
        }
        let ly = M + 16.0 * k as f64;
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{name}</text>", W - M - 50.0);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the combined tables plus `sweep.csv`, `sweep-<condition>.csv` and,
/// when enabled, `plot.svg`.
pub fn write_sweep(dir: &Path, config: &RunConfig, out: &SweepOutput) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_tables(dir, config, &out.records, &out.summaries)?;
    write_file(&dir.join("sweep.csv"), &sweep_csv(&out.points, None))?;
    for (name, _) in CONDITIONS {
        write_file(&dir.join(format!("sweep-{name}.csv")), &sweep_csv(&out.points, Some(name)))?;
    }
    if config.sweep.plot {
        write_file(&dir.join("plot.svg"), &sweep_svg(&out.points))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(size: usize, condition: &str, mean: f64) -> SweepPoint {
        SweepPoint {
            pool_size: size,
            condition: condition.into(),
            summary: Summary {
                condition: condition.into(),
                seed: None,
                metric: "accuracy".into(),
                mean,
                ci95: 0.01,
                n: 100,
            },
        }
    }

    #[test]
    fn sweep_tables_have_one_row_per_point() {
        let points: Vec<SweepPoint> = [4, 8]
            .iter()
            .flat_map(|&s| CONDITIONS.iter().map(move |(c, _)| point(s, c, 0.5)))
            .collect();
        assert_eq!(sweep_csv(&points, None).lines().count(), 1 + 8);
        assert_eq!(sweep_csv(&points, Some("intra")).lines().count(), 1 + 2);
        let svg = sweep_svg(&points);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 4);
    }

    #[test]
    fn condition_configs_differ_only_in_mode_and_id() {
        let base = RunConfig::default();
        let c = condition_config(&base, "cross", MixMode::Cross);
        assert_eq!(c.run_id, "run-cross");
        assert_eq!(c.mix.mode, MixMode::Cross);
        let mut back = c.clone();
        back.run_id = base.run_id.clone();
        back.mix.mode = base.mix.mode;
        assert_eq!(back, base);
    }
}
