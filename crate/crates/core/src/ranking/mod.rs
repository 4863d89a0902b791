//! Threshold-based metric scores, per-case scores, method ranking and the
//! sample-size calculation of a two-sample power analysis.


use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// The five scored metrics. Specificity is reported but not scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Sensitivity,
    Hd,
    Msd,
    Ravd,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Dice, Metric::Sensitivity, Metric::Hd, Metric::Msd, Metric::Ravd];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Sensitivity => "sensitivity",
            Metric::Hd => "hd",
            Metric::Msd => "msd",
            Metric::Ravd => "ravd",
        }
    }

    /// The metric in table units: percent for dice, sensitivity and RAVD,
    /// millimetres for distances.
    pub fn value_of(self, r: &MetricReport) -> Option<f64> {
        match self {
            Metric::Dice => r.dice.map(|v| 100.0 * v),
            Metric::Sensitivity => r.sensitivity.map(|v| 100.0 * v),
            Metric::Hd => r.hd_mm,
            Metric::Msd => r.msd_mm,
            Metric::Ravd => r.ravd.map(|v| 100.0 * v),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Best value, acceptance threshold (exclusive) and worst value of a metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub best: f64,
    pub threshold: f64,
    pub worst: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub dice: Bound,
    pub sensitivity: Bound,
    pub hd: Bound,
    pub msd: Bound,
    pub ravd: Bound,
}

impl ThresholdTable {
    /// Default thresholds; `delta_mm`, the longest distance in the volume, is
    /// the worst distance value.
    pub fn standard(delta_mm: f64) -> Self {
        Self {
            dice: Bound {
                best: 100.0,
                threshold: 80.0,
                worst: 0.0,
            },
            sensitivity: Bound {
                best: 100.0,
                threshold: 80.0,
                worst: 0.0,
            },
            hd: Bound {
                best: 0.0,
                threshold: 30.0,
                worst: delta_mm,
            },
            msd: Bound {
                best: 0.0,
                threshold: 4.0,
                worst: delta_mm,
            },
            ravd: Bound {
                best: 0.0,
                threshold: 10.0,
                worst: 100.0,
            },
        }
    }

    pub fn bound(&self, metric: Metric) -> Bound {
        match metric {
            Metric::Dice => self.dice,
            Metric::Sensitivity => self.sensitivity,
            Metric::Hd => self.hd,
            Metric::Msd => self.msd,
            Metric::Ravd => self.ravd,
        }
    }

    /// Each threshold must differ from its best value, and the worst value
    /// must lie on the threshold's side of the best value. The worst value may
    /// fall short of the threshold when the volume diagonal is small.
    pub fn validate(&self) -> Result<()> {
        for m in Metric::ALL {
            let b = self.bound(m);
            let ok = [b.best, b.threshold, b.worst].iter().all(|v| v.is_finite())
                && b.best != b.threshold
                && (b.worst - b.best).signum() == (b.threshold - b.best).signum();
            if !ok {
                return Err(Error::Config(format!("invalid {m} bounds {b:?}")));
            }
        }
        Ok(())
    }
}

/// Linear map of a metric value onto [0,100]: the best value scores 100 and
/// anything at or beyond the threshold scores 0, as does an undefined value.
pub fn metric_to_score(value: Option<f64>, metric: Metric, table: &ThresholdTable) -> f64 {
    let Some(v) = value.filter(|v| v.is_finite()) else {
        return 0.0;
    };
    let b = table.bound(metric);
    let t = (v - b.threshold) / (b.best - b.threshold);
    if t <= 0.0 {
        0.0
    } else {
        100.0 * t.min(1.0)
    }
}

/// Mean of the five metric scores of one report.
pub fn report_score(report: &MetricReport, table: &ThresholdTable) -> f64 {
    Metric::ALL
        .iter()
        .map(|&m| metric_to_score(m.value_of(report), m, table))
        .sum::<f64>()
        / Metric::ALL.len() as f64
}

/// How a multi-structure case is reduced to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Score the union of all structures (the `global` report).
    #[default]
    Global,
    /// Average the scores of the individual structures.
    PerStructure,
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ScoreMode::Global),
            "per-structure" => Ok(ScoreMode::PerStructure),
            _ => Err(Error::Config(format!("unknown score mode {s:?}"))),
        }
    }
}

/// Score of one case from its reports. Reports with structure `global` feed
/// global mode; all others feed per-structure mode.
pub fn case_score(reports: &[&MetricReport], table: &ThresholdTable, mode: ScoreMode) -> Result<f64> {
    let picked: Vec<&MetricReport> = reports
        .iter()
        .copied()
        .filter(|r| (r.structure == "global") == (mode == ScoreMode::Global))
        .collect();
    if picked.is_empty() {
        return Err(Error::Contract(format!("no reports for {mode:?} scoring")));
    }
    Ok(picked.iter().map(|r| report_score(r, table)).sum::<f64>() / picked.len() as f64)
}

/// Per-case scores keyed by method, then case id.
pub type MethodScores = BTreeMap<String, BTreeMap<String, f64>>;

/// Reduces reports to per-method per-case scores with the standard table for
/// each case's volume diagonal.
pub fn score_reports(reports: &[MetricReport], mode: ScoreMode) -> Result<MethodScores> {
    let mut grouped: BTreeMap<(&str, &str), Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        grouped.entry((&r.method, &r.case_id)).or_default().push(r);
    }
    let mut out = MethodScores::new();
    for ((method, case), rs) in grouped {
        let table = ThresholdTable::standard(rs[0].delta_mm);
        out.entry(method.to_owned())
            .or_default()
            .insert(case.to_owned(), case_score(&rs, &table, mode)?);
    }
    Ok(out)
}

/// Drops cases not scored for every method, then methods left without
/// cases, so the result can be ranked.
pub fn restrict_to_common_cases(scores: &mut MethodScores) {
    let Some(first) = scores.values().next() else { return };
    let common: Vec<String> = first
        .keys()
        .filter(|c| scores.values().all(|m| m.contains_key(*c)))
        .cloned()
        .collect();
    for per_case in scores.values_mut() {
        per_case.retain(|c, _| common.contains(c));
    }
    scores.retain(|_, per_case| !per_case.is_empty());
}

/// Box statistics and rank of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub method: String,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub rank: usize,
}

/// Quantile by linear interpolation between order statistics; `sorted` must
/// be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Ranks methods by descending mean score; equal means share the better
/// rank. Every method must be scored on the same non-empty case set.
pub fn rank_methods(scores: &MethodScores) -> Result<Vec<ScoreCard>> {
    let mut reference: Option<(&String, Vec<&String>)> = None;
    let mut cards = Vec::with_capacity(scores.len());
    for (method, per_case) in scores {
        let cases: Vec<&String> = per_case.keys().collect();
        if cases.is_empty() {
            return Err(Error::Contract(format!("method {method} has no scored cases")));
        }
        match &reference {
            None => reference = Some((method, cases)),
            Some((m0, c0)) if *c0 != cases => {
                return Err(Error::Contract(format!("methods {m0} and {method} were scored on different cases")));
            }
            _ => {}
        }
        let mut v: Vec<f64> = per_case.values().copied().collect();
        v.sort_by(f64::total_cmp);
        cards.push(ScoreCard {
            method: method.clone(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
            rank: 0,
        });
    }
    // stable: equal means keep method-name order
    cards.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    for i in 0..cards.len() {
        cards[i].rank = if i > 0 && cards[i].mean == cards[i - 1].mean {
            cards[i - 1].rank
        } else {
            i + 1
        };
    }
    Ok(cards)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Per-group sample size of a two-sided two-sample comparison under the
/// normal approximation, `ceil(2 (z_{1-a/2} + z_power)^2 / d^2)` with effect
/// size `d = |mean1 - mean2| / sd1`. `None` when the means are equal.
pub fn required_sample_size(mean1: f64, sd1: f64, mean2: f64, sd2: f64, alpha: f64, power: f64) -> Result<Option<u64>> {
    if !(sd1 > 0.0 && sd1.is_finite()) || !(sd2 >= 0.0 && sd2.is_finite()) {
        return Err(Error::Config(format!("standard deviations must be positive, got {sd1} and {sd2}")));
    }
    if !(alpha > 0.0 && alpha < 1.0 && power > 0.0 && power < 1.0) {
        return Err(Error::Config(format!("alpha and power must lie in (0,1), got {alpha} and {power}")));
    }
    if !(mean1.is_finite() && mean2.is_finite()) {
        return Err(Error::Config("means must be finite".into()));
    }
    let d = (mean1 - mean2).abs() / sd1;
    if d == 0.0 {
        return Ok(None);
    }
    let z = normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power);
    Ok(Some((2.0 * z * z / (d * d)).ceil() as u64))
}

#[derive(Serialize)]
struct BoxRecord<'a> {
    method: &'a str,
    mean: f64,
    median: f64,
    q1: f64,
    q3: f64,
    min: f64,
    max: f64,
}

/// Leaderboard CSV: method, mean, median, q1, q3, min, max, rank.
pub fn write_leaderboard_csv<W: std::io::Write>(w: W, cards: &[ScoreCard]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "mean", "median", "q1", "q3", "min", "max", "rank"])?;
    for c in cards {
        out.write_record([
            c.method.clone(),
            format!("{}", c.mean),
            format!("{}", c.median),
            format!("{}", c.q1),
            format!("{}", c.q3),
            format!("{}", c.min),
            format!("{}", c.max),
            c.rank.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Version of the JSON plot-data documents.
pub const PLOT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct BoxDocument<'a> {
    schema_version: u32,
    methods: Vec<BoxRecord<'a>>,
}

/// Box-plot data: five-number summary plus mean per method, in rank order.
pub fn boxplot_json(cards: &[ScoreCard]) -> Result<String> {
    let methods = cards
        .iter()
        .map(|c| BoxRecord {
            method: &c.method,
            mean: c.mean,
            median: c.median,
            q1: c.q1,
            q3: c.q3,
            min: c.min,
            max: c.max,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&BoxDocument {
        schema_version: PLOT_SCHEMA_VERSION,
        methods,
    })?)
}

#[derive(Serialize)]
struct SpiderDocument<'a> {
    schema_version: u32,
    methods: Vec<&'a str>,
    cases: BTreeMap<&'a str, BTreeMap<&'a str, f64>>,
}

/// Spider-chart data: scores keyed by case id, then by method.
pub fn spider_json(scores: &MethodScores) -> Result<String> {
    let mut cases: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for (method, per_case) in scores {
        for (case, &s) in per_case {
            cases.entry(case).or_default().insert(method, s);
        }
    }
    Ok(serde_json::to_string_pretty(&SpiderDocument {
        schema_version: PLOT_SCHEMA_VERSION,
        methods: scores.keys().map(String::as_str).collect(),
        cases,
    })?)
}
