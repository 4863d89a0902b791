//! Leave-one-out experiments over a grid of regularizations and strategies,
//! with prediction, evaluation, scoring, latent-code export and reports.

mod codes;
mod predict;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::nets::{save_checkpoint, AutoEncoder, Network, SegNet};
use crate::postproc::{BinaryVolume, PostprocConfig};
use crate::ranking::ScoreMode;
use crate::synth::{generate_case, Case, PhantomConfig};
use crate::train::{train_autoencoder, train_main, write_loss_log, MaskTarget, SliceDataset, TrainConfig};
use crate::types::{derive_seed, method_name, Regularization, Strategy};

pub use codes::{export_codes, write_codes_csv, CodeRow};
pub use predict::{argmax, global_transform, predict, raw_masks, Prediction, StrategyModels, BINARY_THRESHOLD};
pub use report::{aggregate_table, emit_reports, leaderboard, prepare_output_dir, AggregateRow, REPORT_SCHEMA_VERSION};

/// One cell of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridEntry {
    pub regularization: Regularization,
    pub strategy: Strategy,
}

impl GridEntry {
    pub fn method(&self) -> String {
        method_name(self.regularization, self.strategy)
    }
}

/// Parses `regularization:strategy`, e.g. `combined:multi`.
impl std::str::FromStr for GridEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, st) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("grid entry {s:?} is not of the form regularization:strategy")))?;
        Ok(GridEntry {
            regularization: r.trim().parse()?,
            strategy: st.trim().parse()?,
        })
    }
}

/// All four regularizations under all three strategies.
pub fn full_grid() -> Vec<GridEntry> {
    Strategy::ALL
        .iter()
        .flat_map(|&strategy| {
            Regularization::ALL.iter().map(move |&regularization| GridEntry {
                regularization,
                strategy,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset_seed: u64,
    /// Number of phantom cases when the dataset is generated.
    pub cases: usize,
    pub phantom: PhantomConfig,
    pub grid: Vec<GridEntry>,
    /// Training settings; strategy and regularization come from the grid.
    pub train: TrainConfig,
    pub postproc: PostprocConfig,
    pub score_mode: ScoreMode,
    pub output_dir: Option<PathBuf>,
    /// Folds trained concurrently.
    pub parallel_folds: usize,
    /// Write segmenter and auto-encoder checkpoints under the output dir.
    pub save_checkpoints: bool,
    /// Write predicted and ground-truth label maps as paired VVOL files.
    pub save_overlays: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_seed: 0,
            cases: 12,
            phantom: PhantomConfig::default(),
            grid: full_grid(),
            train: desk_train_config(),
            postproc: PostprocConfig::default(),
            score_mode: ScoreMode::Global,
            output_dir: None,
            parallel_folds: 1,
            save_checkpoints: false,
            save_overlays: false,
        }
    }
}

/// Training settings used for desk-scale phantom experiments.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        lr_main: 3e-3,
        epochs: 12,
        lambda1: 1e-6,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases < 2 {
            return Err(Error::Config(format!("leave-one-out needs at least 2 cases, got {}", self.cases)));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("experiment grid is empty".into()));
        }
        if self.parallel_folds == 0 {
            return Err(Error::Config("parallel_folds must be at least 1".into()));
        }
        if self.postproc.closing_radius == 0 {
            return Err(Error::Config("closing radius must be at least 1".into()));
        }
        self.train.validate()?;
        self.phantom.spacing_mm.validate()
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// The phantom cases of an experiment, seeds `dataset_seed..+cases`.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    (0..cfg.cases as u64)
        .map(|i| generate_case(cfg.dataset_seed + i, &cfg.phantom))
        .collect()
}

/// Outcome of one method on one held-out case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub method: String,
    pub case_id: String,
    /// Per-structure reports plus the `global` report.
    pub reports: Vec<MetricReport>,
    pub score: Option<f64>,
    /// Cases that contributed slices to some training batch.
    pub train_cases: Vec<String>,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
    /// Diagnostic when training diverged; the fold is then excluded.
    pub failure: Option<String>,
}

impl FoldResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// All folds of a run, ordered by method (grid order) then case id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub methods: Vec<String>,
    pub folds: Vec<FoldResult>,
}

impl Experiment {
    pub fn failed_folds(&self) -> usize {
        self.folds.iter().filter(|f| f.failed()).count()
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        self.folds
            .iter()
            .filter(|f| !f.failed())
            .flat_map(|f| f.reports.iter().cloned())
            .collect()
    }
}

/// Per-structure reports (`1..=C`) and the `global` report of a prediction.
pub fn evaluate_prediction(method: &str, case: &Case, pred: &Prediction) -> Result<Vec<MetricReport>> {
    let e = case.extents;
    let mut reports = Vec::new();
    for (c, p) in pred.structures.iter().enumerate() {
        let gt = BinaryVolume::from_labels(e, &case.labels, c as u8 + 1, case.spacing_mm)?;
        reports.push(evaluate(method, &case.case_id, &(c + 1).to_string(), &gt, p)?);
    }
    let gt_global = BinaryVolume::from_bits(e, case.labels.iter().map(|&l| l > 0).collect(), case.spacing_mm)?;
    reports.push(evaluate(method, &case.case_id, "global", &gt_global, &pred.global)?);
    Ok(reports)
}

/// Called after each finished fold, in completion order.
pub type Progress<'a> = &'a (dyn Fn(&FoldResult) + Sync);

/// Leave-one-out over `cases` for every grid entry. Folds are independent
/// and may run concurrently; results are ordered by grid entry then case id.
pub fn run_loocv(cfg: &ExperimentConfig, cases: &[Case], progress: Option<Progress<'_>>) -> Result<Experiment> {
    cfg.validate()?;
    if cases.len() < 2 {
        return Err(Error::Config(format!("leave-one-out needs at least 2 cases, got {}", cases.len())));
    }
    let mut sorted: Vec<&Case> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    if sorted.windows(2).any(|w| w[0].case_id == w[1].case_id) {
        return Err(Error::Config("case ids must be unique".into()));
    }
    if let Some(dir) = &cfg.output_dir {
        prepare_output_dir(dir)?;
    }
    let run_fold = |k: usize| -> Result<Vec<FoldResult>> {
        let out = fold(cfg, &sorted, k)?;
        if let Some(p) = progress {
            out.iter().for_each(p);
        }
        Ok(out)
    };
    let per_fold: Vec<Vec<FoldResult>> = if cfg.parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel_folds)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..sorted.len()).into_par_iter().map(run_fold).collect::<Result<_>>())?
    } else {
        (0..sorted.len()).map(run_fold).collect::<Result<_>>()?
    };

    let mut grid = cfg.grid.clone();
    grid.dedup();
    let methods: Vec<String> = grid.iter().map(GridEntry::method).collect();
    let mut by_method: BTreeMap<&str, Vec<FoldResult>> = BTreeMap::new();
    for r in per_fold.into_iter().flatten() {
        let key = methods.iter().find(|m| **m == r.method).expect("method from grid");
        by_method.entry(key.as_str()).or_default().push(r);
    }
    let folds = methods
        .iter()
        .flat_map(|m| by_method.remove(m.as_str()).unwrap_or_default())
        .collect();
    Ok(Experiment { methods, folds })
}

/// Trains and evaluates every grid entry with case `k` held out.
fn fold(cfg: &ExperimentConfig, cases: &[&Case], k: usize) -> Result<Vec<FoldResult>> {
    let held_out = cases[k];
    let train_cases: Vec<Case> = cases
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, c)| (*c).clone())
        .collect();
    let classes = held_out.classes;
    let fold_seed = derive_seed(cfg.train.seed, "fold", &[k as u64]);
    let ckpt_dir = cfg
        .output_dir
        .as_ref()
        .filter(|_| cfg.save_checkpoints)
        .map(|d| d.join("checkpoints"));

    let mut results = Vec::new();
    let strategies: BTreeSet<Strategy> = cfg.grid.iter().map(|g| g.strategy).collect();
    for strategy in strategies {
        let targets = MaskTarget::for_strategy(strategy, classes);
        let datasets = targets
            .iter()
            .map(|&t| SliceDataset::from_cases(&train_cases, t))
            .collect::<Result<Vec<_>>>()?;
        // the auto-encoder depends only on fold, target and seed, so shape and
        // combined runs share it
        let mut priors: Vec<Option<std::result::Result<AutoEncoder, String>>> = vec![None; targets.len()];
        let entries: Vec<GridEntry> = cfg.grid.iter().copied().filter(|g| g.strategy == strategy).collect();
        let mut seen = BTreeSet::new();
        for entry in entries {
            if !seen.insert(entry) {
                continue;
            }
            let method = entry.method();
            let start = Instant::now();
            let mut train_seen = BTreeSet::new();
            let mut nets: Vec<SegNet> = Vec::new();
            let mut checkpoints = Vec::new();
            let mut failure = None;
            for (t, data) in datasets.iter().enumerate() {
                let tcfg = TrainConfig {
                    seed: derive_seed(fold_seed, "target", &[t as u64]),
                    strategy,
                    regularization: entry.regularization,
                    ..cfg.train.clone()
                };
                let prior = if entry.regularization.uses_shape_prior() {
                    let slot = priors[t].get_or_insert_with(|| match train_autoencoder(data, &tcfg) {
                        Ok(run) => Ok(run.model),
                        Err(e @ Error::Diverged { .. }) => Err(e.to_string()),
                        Err(e) => Err(format!("fatal: {e}")),
                    });
                    match slot {
                        Ok(ae) => Some(ae.clone()),
                        Err(msg) if msg.starts_with("fatal: ") => {
                            return Err(Error::Contract(msg.trim_start_matches("fatal: ").to_owned()));
                        }
                        Err(msg) => {
                            failure = Some(format!("auto-encoder: {msg}"));
                            break;
                        }
                    }
                } else {
                    None
                };
                match train_main(data, &tcfg, prior.as_ref()) {
                    Ok(run) => {
                        train_seen.extend(run.seen_cases.iter().cloned());
                        if let Some(dir) = &ckpt_dir {
                            let stem = format!("{method}_{}_t{t}", held_out.case_id);
                            let seg_path = dir.join(format!("{stem}.seg.ckpt"));
                            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                            save_checkpoint(&seg_path, &Network::Seg(run.seg.clone()))?;
                            checkpoints.push(seg_path);
                            if let Some(ae) = &prior {
                                let ae_path = dir.join(format!("{stem}.ae.ckpt"));
                                save_checkpoint(&ae_path, &Network::AutoEncoder(ae.clone()))?;
                                checkpoints.push(ae_path);
                            }
                            let log_path = dir.join(format!("{stem}.loss.tsv"));
                            let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
                            write_loss_log(file, &run.log).map_err(|e| Error::io(&log_path, e))?;
                        }
                        nets.push(run.seg);
                    }
                    Err(e @ Error::Diverged { .. }) => {
                        failure = Some(e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut result = FoldResult {
                method: method.clone(),
                case_id: held_out.case_id.clone(),
                reports: Vec::new(),
                score: None,
                train_cases: train_seen.into_iter().collect(),
                checkpoints,
                seconds: 0.0,
                failure,
            };
            if !result.failed() {
                let models = StrategyModels::new(strategy, classes, nets)?;
                let pred = predict(&models, held_out, &cfg.postproc)?;
                if let Some(dir) = cfg.output_dir.as_ref().filter(|_| cfg.save_overlays) {
                    write_overlay(&dir.join("overlays").join(&method), held_out, &pred)?;
                }
                result.reports = evaluate_prediction(&method, held_out, &pred)?;
                let table = crate::ranking::ThresholdTable::standard(result.reports[0].delta_mm);
                let refs: Vec<&MetricReport> = result.reports.iter().collect();
                result.score = Some(crate::ranking::case_score(&refs, &table, cfg.score_mode)?);
            }
            result.seconds = start.elapsed().as_secs_f64();
            results.push(result);
        }
    }
    Ok(results)
}

/// Networks trained on one dataset for one strategy and regularization.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub models: StrategyModels,
    /// One per target when the shape prior is used.
    pub autoencoders: Vec<AutoEncoder>,
    pub logs: Vec<Vec<crate::train::EpochLog>>,
    pub seen_cases: BTreeSet<String>,
}

/// Trains every network of `train.strategy` on all slices of `cases`.
pub fn train_models(train: &TrainConfig, cases: &[Case]) -> Result<TrainedModels> {
    let classes = cases
        .first()
        .ok_or_else(|| Error::Contract("training needs at least one case".into()))?
        .classes;
    let mut nets = Vec::new();
    let mut autoencoders = Vec::new();
    let mut logs = Vec::new();
    let mut seen_cases = BTreeSet::new();
    for (t, target) in MaskTarget::for_strategy(train.strategy, classes).into_iter().enumerate() {
        let data = SliceDataset::from_cases(cases, target)?;
        let tcfg = TrainConfig {
            seed: derive_seed(train.seed, "target", &[t as u64]),
            ..train.clone()
        };
        let prior = if train.regularization.uses_shape_prior() {
            Some(train_autoencoder(&data, &tcfg)?.model)
        } else {
            None
        };
        let run = train_main(&data, &tcfg, prior.as_ref())?;
        seen_cases.extend(run.seen_cases);
        logs.push(run.log);
        nets.push(run.seg);
        autoencoders.extend(prior);
    }
    Ok(TrainedModels {
        models: StrategyModels::new(train.strategy, classes, nets)?,
        autoencoders,
        logs,
        seen_cases,
    })
}

/// Predicted and ground-truth label maps as `<case>_pred` / `<case>_gt`.
pub fn write_overlay(dir: &Path, case: &Case, pred: &Prediction) -> Result<()> {
    use crate::vvol::{write_u8, Dtype, VvolHeader};
    let mut h = VvolHeader::new(case.extents, case.spacing_mm, Dtype::U8, case.classes, &case.case_id);
    h.condition_tag = Some(case.condition_tag);
    write_u8(&dir.join(format!("{}_pred", case.case_id)), &h, &pred.label_map())?;
    write_u8(&dir.join(format!("{}_gt", case.case_id)), &h, &case.labels)
}
