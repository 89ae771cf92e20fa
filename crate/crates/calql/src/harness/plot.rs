use super::{HarnessError, RunLog};
use crate::theory::RegretRow;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub step: u64,
    pub mean: f64,
    /// Standard error of the mean; 0 for a single seed.
    pub stderr: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotBundle {
    /// Metric name to aligned rows.
    pub tables: BTreeMap<String, Vec<PlotRow>>,
    pub warnings: Vec<String>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates per-seed series that share a step grid. Grids that differ are
/// reduced to their intersection and a warning is added.
fn aggregate(name: &str, series: &[BTreeMap<u64, f64>], warnings: &mut Vec<String>) -> Vec<PlotRow> {
    let Some(first) = series.first() else { return Vec::new() };
    let mut common: BTreeSet<u64> = first.keys().copied().collect();
    let mut mismatch = false;
    for s in &series[1..] {
        let keys: BTreeSet<u64> = s.keys().copied().collect();
        if keys != common {
            mismatch = true;
        }
        common = common.intersection(&keys).copied().collect();
    }
    if mismatch {
        warnings.push(format!("{name}: step grids differ across seeds; keeping {} common steps", common.len()));
    }
    common
        .into_iter()
        .map(|step| {
            let xs: Vec<f64> = series.iter().map(|s| s[&step]).collect();
            let (mean, stderr) = mean_stderr(&xs);
            PlotRow { step, mean, stderr, n_seeds: xs.len() }
        })
        .collect()
}

pub fn emit_plot_data(logs: &[RunLog]) -> PlotBundle {
    type Getter = fn(&crate::metrics::RunRecord) -> f64;
    let metrics: [(&str, Getter); 5] = [
        ("normalized_score", |r| r.normalized_score),
        ("avg_dataset_q", |r| r.avg_dataset_q),
        ("bounding_rate", |r| r.bounding_rate),
        ("cum_regret_metric", |r| r.cum_regret_metric),
        ("dataset_policy_value", |r| r.dataset_policy_value),
    ];
    let mut bundle = PlotBundle::default();
    for (name, get) in metrics {
        let series: Vec<BTreeMap<u64, f64>> = logs.iter().map(|l| l.records().iter().map(|r| (r.step, get(r))).collect()).collect();
        let rows = aggregate(name, &series, &mut bundle.warnings);
        bundle.tables.insert(name.to_string(), rows);
    }
    bundle
}

/// Regret-decomposition series from theory runs, indexed by iteration.
pub fn emit_regret_plot_data(runs: &[Vec<RegretRow>]) -> PlotBundle {
    type Getter = fn(&RegretRow) -> f64;
    let metrics: [(&str, Getter); 4] = [
        ("term_i", |r| r.miscalibration),
        ("term_ii", |r| r.overestimation),
        ("regret", |r| r.regret),
        ("cum_regret", |r| r.cum_regret),
    ];
    let mut bundle = PlotBundle::default();
    for (name, get) in metrics {
        let series: Vec<BTreeMap<u64, f64>> = runs.iter().map(|rows| rows.iter().map(|r| (r.k as u64, get(r))).collect()).collect();
        let rows = aggregate(name, &series, &mut bundle.warnings);
        bundle.tables.insert(name.to_string(), rows);
    }
    bundle
}

/// One `<metric>.csv` per table with columns `step, mean, stderr, n_seeds`.
pub fn write_plot_data(bundle: &PlotBundle, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    for (name, rows) in &bundle.tables {
        let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv"))).map_err(|e| HarnessError::Log(e.to_string()))?;
        let mut write = |rec: [String; 4]| w.write_record(rec).map_err(|e| HarnessError::Log(e.to_string()));
        write(["step".into(), "mean".into(), "stderr".into(), "n_seeds".into()])?;
        for r in rows {
            write([r.step.to_string(), r.mean.to_string(), r.stderr.to_string(), r.n_seeds.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}
