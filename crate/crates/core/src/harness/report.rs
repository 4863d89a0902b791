use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{Experiment, FoldResult};
use crate::error::{Error, Result};
use crate::metrics::{write_metrics_csv, MetricReport};
use crate::ranking::{boxplot_json, rank_methods, restrict_to_common_cases, spider_json, write_leaderboard_csv, MethodScores, ScoreCard};

/// Version of every JSON document written by [`emit_reports`].
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics summarized in the aggregate table, in column order.
const TABLE_METRICS: [&str; 6] = ["dice", "sensitivity", "specificity", "hd_mm", "msd_mm", "ravd"];

/// Mean and sample standard deviation of one metric of one method and
/// structure over the successful folds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub structure: String,
    pub metric: &'static str,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Folds where the metric is defined.
    pub n: usize,
    pub failed_folds: usize,
}

fn metric_value(r: &MetricReport, metric: &str) -> Option<f64> {
    match metric {
        "dice" => r.dice,
        "sensitivity" => r.sensitivity,
        "specificity" => r.specificity,
        "hd_mm" => r.hd_mm,
        "msd_mm" => r.msd_mm,
        "ravd" => r.ravd,
        _ => unreachable!("unknown table metric"),
    }
}

/// Mean and sd per method, structure and metric; methods in run order,
/// structures `1..=C` then `global`.
pub fn aggregate_table(exp: &Experiment) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for method in &exp.methods {
        let folds: Vec<&FoldResult> = exp.folds.iter().filter(|f| &f.method == method).collect();
        let failed = folds.iter().filter(|f| f.failed()).count();
        let mut structures: Vec<&str> = folds
            .iter()
            .flat_map(|f| f.reports.iter().map(|r| r.structure.as_str()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        // numeric labels first, in numeric order, then "global"
        structures.sort_by_key(|s| (s.parse::<usize>().is_err(), s.parse::<usize>().unwrap_or(0), s.to_string()));
        for structure in structures {
            for metric in TABLE_METRICS {
                let values: Vec<f64> = folds
                    .iter()
                    .filter(|f| !f.failed())
                    .flat_map(|f| f.reports.iter().filter(|r| r.structure == structure))
                    .filter_map(|r| metric_value(r, metric))
                    .collect();
                let n = values.len();
                let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
                let sd = mean.filter(|_| n > 1).map(|m| {
                    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
                });
                rows.push(AggregateRow {
                    method: method.clone(),
                    structure: structure.to_owned(),
                    metric,
                    mean,
                    sd,
                    n,
                    failed_folds: failed,
                });
            }
        }
    }
    rows
}

fn write_table_csv<W: Write>(w: W, rows: &[AggregateRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "structure", "metric", "mean", "sd", "n", "failed_folds"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.structure.clone(),
            r.metric.to_owned(),
            opt(r.mean),
            opt(r.sd),
            r.n.to_string(),
            r.failed_folds.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Per-case scores of successful folds, restricted to the cases every
/// method completed, and the resulting ranking.
pub fn leaderboard(exp: &Experiment) -> Result<(MethodScores, Vec<ScoreCard>)> {
    let mut scores: MethodScores = BTreeMap::new();
    for f in &exp.folds {
        if let Some(s) = f.score {
            scores.entry(f.method.clone()).or_default().insert(f.case_id.clone(), s);
        }
    }
    // methods without a single successful fold leave nothing in common
    if exp.methods.iter().any(|m| !scores.contains_key(m)) {
        scores.clear();
    }
    restrict_to_common_cases(&mut scores);
    let cards = if scores.is_empty() { Vec::new() } else { rank_methods(&scores)? };
    Ok((scores, cards))
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    schema_version: u32,
    reports: &'a [MetricReport],
}

#[derive(Serialize)]
struct FoldRecord<'a> {
    method: &'a str,
    case_id: &'a str,
    score: Option<f64>,
    failure: Option<&'a str>,
    train_cases: &'a [String],
    checkpoints: Vec<String>,
}

#[derive(Serialize)]
struct FoldsDocument<'a> {
    schema_version: u32,
    methods: &'a [String],
    failed_folds: usize,
    folds: Vec<FoldRecord<'a>>,
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    let path = dir.join(name);
    std::fs::File::create(&path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

/// Creates `dir` and checks that files can be written there.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Writes metrics.csv, metrics.json, table.csv, leaderboard.csv,
/// boxplot.json, spider.json, folds.json and timings.csv. Everything except
/// timings.csv depends only on the results, never on wall-clock time.
pub fn emit_reports(exp: &Experiment, dir: &Path) -> Result<()> {
    prepare_output_dir(dir)?;
    let reports = exp.reports();
    write_metrics_csv(create(dir, "metrics.csv")?, &reports)?;
    write_text(
        dir,
        "metrics.json",
        &serde_json::to_string_pretty(&MetricsDocument {
            schema_version: REPORT_SCHEMA_VERSION,
            reports: &reports,
        })?,
    )?;
    write_table_csv(create(dir, "table.csv")?, &aggregate_table(exp))?;
    let (scores, cards) = leaderboard(exp)?;
    write_leaderboard_csv(create(dir, "leaderboard.csv")?, &cards)?;
    write_text(dir, "boxplot.json", &boxplot_json(&cards)?)?;
    write_text(dir, "spider.json", &spider_json(&scores)?)?;
    let folds = exp
        .folds
        .iter()
        .map(|f| FoldRecord {
            method: &f.method,
            case_id: &f.case_id,
            score: f.score,
            failure: f.failure.as_deref(),
            train_cases: &f.train_cases,
            checkpoints: f.checkpoints.iter().map(|p| p.display().to_string()).collect(),
        })
        .collect();
    write_text(
        dir,
        "folds.json",
        &serde_json::to_string_pretty(&FoldsDocument {
            schema_version: REPORT_SCHEMA_VERSION,
            methods: &exp.methods,
            failed_folds: exp.failed_folds(),
            folds,
        })?,
    )?;
    let mut t = csv::Writer::from_writer(create(dir, "timings.csv")?);
    t.write_record(["method", "case_id", "seconds"])?;
    for f in &exp.folds {
        t.write_record([f.method.clone(), f.case_id.clone(), format!("{:.3}", f.seconds)])?;
    }
    t.flush().map_err(|e| Error::io(dir.join("timings.csv"), e))?;
    Ok(())
}
