//! Seed-aggregated series and the rounds-to-target comparison table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Scheme;
use super::run::{read_metrics, MetricsRecord};
use crate::error::{Error, Result};

pub const METRICS: [&str; 3] = ["test_accuracy", "global_loss", "grad_norm_sq"];

fn metric(r: &MetricsRecord, name: &str) -> f64 {
    match name {
        "test_accuracy" => r.test_accuracy,
        "global_loss" => r.global_loss,
        "grad_norm_sq" => r.grad_norm_sq,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Mean and sample standard deviation (`n - 1`); a single value has std 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub round: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeRow {
    pub scheme: Scheme,
    pub surrogate: bool,
    pub n_seeds: usize,
    pub final_accuracy_mean: f64,
    /// Standard error of the seed mean.
    pub final_accuracy_se: f64,
    /// First round whose seed-mean accuracy reaches the target.
    pub rounds_to_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config_id: String,
    pub target_accuracy: f64,
    pub series: BTreeMap<(Scheme, String), Vec<SeriesPoint>>,
    pub table: Vec<SchemeRow>,
}

/// Aggregates records that must all come from one configuration.
pub fn summarize(records: &[MetricsRecord], target_accuracy: f64) -> Result<Report> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.config_id.as_str()).collect();
    if ids.len() != 1 {
        return Err(Error::Data(format!(
            "expected records from exactly one configuration, found {}: {:?}",
            ids.len(),
            ids
        )));
    }
    let mut seen = BTreeSet::new();
    let mut by: BTreeMap<Scheme, BTreeMap<usize, Vec<&MetricsRecord>>> = BTreeMap::new();
    for r in records {
        if !seen.insert((r.scheme, r.seed, r.round)) {
            return Err(Error::Data(format!(
                "duplicate record for {}/seed {}/round {}",
                r.scheme, r.seed, r.round
            )));
        }
        by.entry(r.scheme).or_default().entry(r.round).or_default().push(r);
    }
    let mut series = BTreeMap::new();
    let mut table = Vec::new();
    for (&scheme, rounds) in &by {
        for name in METRICS {
            let pts: Vec<SeriesPoint> = rounds
                .iter()
                .map(|(&round, rs)| {
                    let v: Vec<f64> = rs.iter().map(|r| metric(r, name)).collect();
                    let (mean, std) = mean_std(&v);
                    SeriesPoint { round, mean, std, n: v.len() }
                })
                .collect();
            series.insert((scheme, name.to_string()), pts);
        }
        let acc = &series[&(scheme, "test_accuracy".to_string())];
        let last = acc.last().expect("at least one round");
        table.push(SchemeRow {
            scheme,
            surrogate: scheme.is_surrogate(),
            n_seeds: last.n,
            final_accuracy_mean: last.mean,
            final_accuracy_se: last.std / (last.n as f64).sqrt(),
            rounds_to_target: acc.iter().find(|p| p.mean >= target_accuracy).map(|p| p.round),
        });
    }
    Ok(Report {
        config_id: ids.into_iter().next().unwrap_or_default().to_string(),
        target_accuracy,
        series,
        table,
    })
}

impl Report {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("scheme,surrogate,n_seeds,final_accuracy_mean,final_accuracy_se,rounds_to_target\n");
        for r in &self.table {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.scheme,
                r.surrogate,
                r.n_seeds,
                r.final_accuracy_mean,
                r.final_accuracy_se,
                r.rounds_to_target.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        s
    }

    pub fn series_csv(points: &[SeriesPoint]) -> String {
        let mut s = String::from("round,mean,std,n\n");
        for p in points {
            let _ = writeln!(s, "{},{},{},{}", p.round, p.mean, p.std, p.n);
        }
        s
    }
}

/// Reads metrics files and writes `{scheme}_{metric}.csv` plus `rounds_to_target.csv`.
pub fn write_report(paths: &[PathBuf], target_accuracy: f64, out_dir: &Path) -> Result<Report> {
    if paths.is_empty() {
        return Err(Error::Config("report needs at least one metrics file".into()));
    }
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_metrics(p)?);
    }
    if records.is_empty() {
        return Err(Error::Data("metrics files contain no records".into()));
    }
    let report = summarize(&records, target_accuracy)?;
    fs::create_dir_all(out_dir)?;
    for ((scheme, name), pts) in &report.series {
        fs::write(out_dir.join(format!("{scheme}_{name}.csv")), Report::series_csv(pts))?;
    }
    fs::write(out_dir.join("rounds_to_target.csv"), report.table_csv())?;
    Ok(report)
}
