use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use combreg::harness::{
    emit_reports, evaluate_prediction, export_codes, generate_dataset, predict, run_loocv, train_models, write_codes_csv,
    ExperimentConfig, FoldResult, GridEntry, Prediction, StrategyModels,
};
use combreg::metrics::{read_metrics_csv, write_metrics_csv, MetricReport};
use combreg::nets::{load_checkpoint, save_checkpoint, Head, Network, SegNet};
use combreg::postproc::{BinaryVolume, Connectivity};
use combreg::ranking::{boxplot_json, rank_methods, restrict_to_common_cases, score_reports, spider_json, write_leaderboard_csv, ScoreMode};
use combreg::synth::{Case, Extents, Spacing};
use combreg::train::{write_loss_log, MaskTarget};
use combreg::types::{method_name, Regularization, Strategy};
use combreg::vvol;

/// Bad flags or inconsistent inputs; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "combreg", version, about = "Shape- and adversarially-regularized multi-structure segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset as VVOL files.
    Gen(GenArgs),
    /// Train the networks of one strategy and regularization.
    Train(TrainArgs),
    /// Predict label maps with trained segmenter checkpoints.
    Predict(PredictArgs),
    /// Compare predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Score and rank methods from metrics CSV files.
    Rank(RankArgs),
    /// Export auto-encoder latent codes of ground-truth masks.
    Codes(CodesArgs),
    /// Leave-one-out experiment over the configured grid, with reports.
    Run(RunArgs),
}

/// Experiment settings. `--config` supplies a JSON file; flags override it.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    dataset_seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    /// Volume extents as D,H,W.
    #[arg(long, value_parser = parse_extents)]
    extents: Option<Extents>,
    /// Voxel spacing in mm as z,y,x.
    #[arg(long, value_parser = parse_spacing)]
    spacing: Option<Spacing>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[arg(long)]
    lr_main: Option<f64>,
    #[arg(long)]
    lr_ae: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    ae_depth: Option<usize>,
    #[arg(long)]
    ae_base_channels: Option<usize>,
    #[arg(long)]
    code_channels: Option<usize>,
    /// Disable on-the-fly augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Replace the discriminator by a zero adversarial term.
    #[arg(long)]
    stub_adversarial: bool,
    /// Comma-separated regularization:strategy pairs, e.g. base:multi,combined:multi.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<GridEntry>>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    regularization: Option<Regularization>,
    /// 6, 18 or 26.
    #[arg(long)]
    connectivity: Option<u32>,
    #[arg(long)]
    closing_radius: Option<usize>,
    /// Skip largest-component selection and closing.
    #[arg(long)]
    no_postproc: bool,
    /// global or per-structure.
    #[arg(long)]
    score_mode: Option<ScoreMode>,
    #[arg(long)]
    parallel_folds: Option<usize>,
    #[arg(long)]
    save_checkpoints: bool,
    #[arg(long)]
    save_overlays: bool,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("invalid value {p:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_extents(s: &str) -> std::result::Result<Extents, String> {
    let [d, h, w] = parse_triple::<usize>(s)?;
    Ok(Extents::new(d, h, w))
}

fn parse_spacing(s: &str) -> std::result::Result<Spacing, String> {
    let [z, y, x] = parse_triple::<f64>(s)?;
    Ok(Spacing::new(z, y, x))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            cases => cases,
            dataset_seed => dataset_seed,
            classes => phantom.classes,
            extents => phantom.extents,
            spacing => phantom.spacing_mm,
            noise_sd => phantom.noise_sd,
            seed => train.seed,
            epochs => train.epochs,
            ae_epochs => train.ae_epochs,
            lr_main => train.lr_main,
            lr_ae => train.lr_ae,
            lambda1 => train.lambda1,
            lambda2 => train.lambda2,
            batch_size => train.batch_size,
            depth => train.depth,
            base_channels => train.base_channels,
            ae_depth => train.ae_depth,
            ae_base_channels => train.ae_base_channels,
            code_channels => train.code_channels,
            grid => grid,
            strategy => train.strategy,
            regularization => train.regularization,
            closing_radius => postproc.closing_radius,
            score_mode => score_mode,
            parallel_folds => parallel_folds,
        );
        if let Some(n) = self.connectivity {
            cfg.postproc.connectivity = Connectivity::from_count(n)?;
        }
        cfg.train.augment &= !self.no_augment;
        cfg.train.stub_adversarial |= self.stub_adversarial;
        cfg.postproc.enabled &= !self.no_postproc;
        cfg.save_checkpoints |= self.save_checkpoints;
        cfg.save_overlays |= self.save_overlays;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cases from a VVOL directory, or generated from the config.
fn load_cases(data: Option<&Path>, cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    match data {
        Some(dir) => {
            let cases = vvol::read_dataset(dir)?;
            if cases.is_empty() {
                return Err(usage(format!("no cases found in {}", dir.display())));
            }
            Ok(cases)
        }
        None => Ok(generate_dataset(cfg)?),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for `<case>_image` / `<case>_labels` VVOL pairs.
    #[arg(long)]
    out: PathBuf,
}

fn gen(args: &GenArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for case in generate_dataset(&cfg)? {
        vvol::write_case(&args.out, &case)?;
        eprintln!("{} {}", case.case_id, case.condition_tag.as_str());
    }
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// VVOL dataset; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Case ids excluded from training.
    #[arg(long)]
    holdout: Vec<String>,
    /// Output directory for checkpoints and loss logs.
    #[arg(long)]
    out: PathBuf,
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let cases: Vec<Case> = load_cases(args.data.as_deref(), &cfg)?
        .into_iter()
        .filter(|c| !args.holdout.contains(&c.case_id))
        .collect();
    if cases.is_empty() {
        return Err(usage("every case is held out"));
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let trained = train_models(&cfg.train, &cases)?;
    let method = method_name(cfg.train.regularization, cfg.train.strategy);
    for (t, net) in trained.models.nets.iter().enumerate() {
        let path = args.out.join(format!("{method}_t{t}.seg.ckpt"));
        save_checkpoint(&path, &Network::Seg(net.clone()))?;
        eprintln!("wrote {}", path.display());
        let log = args.out.join(format!("{method}_t{t}.loss.tsv"));
        let file = std::fs::File::create(&log).with_context(|| format!("writing {}", log.display()))?;
        write_loss_log(file, &trained.logs[t])?;
    }
    for (t, ae) in trained.autoencoders.iter().enumerate() {
        let path = args.out.join(format!("{method}_t{t}.ae.ckpt"));
        save_checkpoint(&path, &Network::AutoEncoder(ae.clone()))?;
        eprintln!("wrote {}", path.display());
    }
    write_json(&args.out.join("train.json"), &serde_json::json!({
        "method": method,
        "train": cfg.train,
        "cases": trained.seen_cases,
    }))
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Segmenter checkpoints; one per structure for the individual strategy, in structure order.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Cases to predict; all cases when absent.
    #[arg(long = "case")]
    case_ids: Vec<String>,
    /// Output directory for `<case>_pred` label maps.
    #[arg(long)]
    out: PathBuf,
}

fn infer_strategy(nets: &[SegNet], classes: usize) -> Result<Strategy> {
    match (nets[0].config().head, nets.len()) {
        (Head::Softmax, 1) => Ok(Strategy::Multi),
        (Head::Sigmoid, 1) if classes > 1 => Ok(Strategy::Global),
        (Head::Sigmoid, n) if n == classes => Ok(Strategy::Individual),
        (head, n) => Err(usage(format!(
            "cannot tell the strategy of {n} {head:?} checkpoint(s) for {classes} structures; pass --strategy"
        ))),
    }
}

fn predict_cmd(args: &PredictArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let mut nets = Vec::new();
    for path in &args.checkpoints {
        match load_checkpoint(path)? {
            Network::Seg(net) => nets.push(net),
            other => return Err(usage(format!("{} holds a {} network, not a segmenter", path.display(), other.kind()))),
        }
    }
    let ids = if args.case_ids.is_empty() { vvol::list_cases(&args.data)? } else { args.case_ids.clone() };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for id in ids {
        let case = vvol::read_case(&args.data, &id)?;
        let strategy = match args.cfg.strategy {
            Some(s) => s,
            None => infer_strategy(&nets, case.classes)?,
        };
        let models = StrategyModels::new(strategy, case.classes, nets.clone())?;
        let pred = predict(&models, &case, &cfg.postproc)?;
        let mut h = vvol::VvolHeader::new(case.extents, case.spacing_mm, vvol::Dtype::U8, case.classes, &case.case_id);
        h.condition_tag = Some(case.condition_tag);
        vvol::write_u8(&args.out.join(format!("{id}_pred")), &h, &pred.label_map())?;
        eprintln!("{id}: {} foreground voxels", pred.global.count());
    }
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth VVOL dataset.
    #[arg(long)]
    data: PathBuf,
    /// Directory of `<case>_pred` label maps.
    #[arg(long)]
    pred: PathBuf,
    /// Method name written into every report.
    #[arg(long)]
    method: String,
    /// Evaluate only the union of all structures (global-strategy predictions).
    #[arg(long)]
    global_only: bool,
    /// Output metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut reports: Vec<MetricReport> = Vec::new();
    for id in vvol::list_cases(&args.data)? {
        let stem = args.pred.join(format!("{id}_pred"));
        if !stem.with_extension("json").exists() {
            continue;
        }
        let case = vvol::read_case(&args.data, &id)?;
        let (h, labels) = vvol::read_u8(&stem)?;
        if h.extents() != case.extents {
            return Err(usage(format!("prediction for {id} has extents {:?}, expected {:?}", h.extents(), case.extents)));
        }
        let structures = if args.global_only {
            Vec::new()
        } else {
            (1..=case.classes as u8)
                .map(|c| BinaryVolume::from_labels(case.extents, &labels, c, case.spacing_mm))
                .collect::<combreg::error::Result<Vec<_>>>()?
        };
        let global = BinaryVolume::from_bits(case.extents, labels.iter().map(|&l| l > 0).collect(), case.spacing_mm)?;
        reports.extend(evaluate_prediction(&args.method, &case, &Prediction { structures, global })?);
    }
    if reports.is_empty() {
        return Err(usage(format!("no predictions in {} match cases in {}", args.pred.display(), args.data.display())));
    }
    let file = std::fs::File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    write_metrics_csv(file, &reports)?;
    for r in reports.iter().filter(|r| r.structure == "global") {
        eprintln!("{} dice {:.4}", r.case_id, r.dice.unwrap_or(f64::NAN));
    }
    Ok(())
}

#[derive(Args)]
struct RankArgs {
    /// Metrics CSV files; reports of all files are pooled.
    #[arg(long = "metrics", required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value = "global")]
    score_mode: ScoreMode,
    /// Output directory for leaderboard.csv, boxplot.json and spider.json.
    #[arg(long)]
    out: PathBuf,
}

fn rank(args: &RankArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.metrics {
        reports.extend(read_metrics_csv(path)?);
    }
    if reports.is_empty() {
        return Err(usage("no metric rows to rank"));
    }
    let mut scores = score_reports(&reports, args.score_mode)?;
    restrict_to_common_cases(&mut scores);
    if scores.is_empty() {
        return Err(usage("no case was scored for every method"));
    }
    let cards = rank_methods(&scores)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let file = std::fs::File::create(args.out.join("leaderboard.csv")).context("writing leaderboard.csv")?;
    write_leaderboard_csv(file, &cards)?;
    std::fs::write(args.out.join("boxplot.json"), boxplot_json(&cards)? + "\n").context("writing boxplot.json")?;
    std::fs::write(args.out.join("spider.json"), spider_json(&scores)? + "\n").context("writing spider.json")?;
    for c in &cards {
        println!("{:>2}  {:<20} {:.2}", c.rank, c.method, c.mean);
    }
    Ok(())
}

#[derive(Args)]
struct CodesArgs {
    /// Auto-encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Mask encoding fed to the auto-encoder: multi, global or a structure index.
    #[arg(long, default_value = "multi")]
    target: String,
    /// Also emit slices whose mask is empty.
    #[arg(long)]
    include_empty: bool,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn parse_target(s: &str) -> Result<MaskTarget> {
    match s {
        "multi" => Ok(MaskTarget::Multi),
        "global" => Ok(MaskTarget::Global),
        n => n
            .parse::<usize>()
            .map(MaskTarget::Structure)
            .map_err(|_| usage(format!("target must be multi, global or a structure index, got {n:?}"))),
    }
}

fn codes(args: &CodesArgs) -> Result<()> {
    let target = parse_target(&args.target)?;
    let ae = match load_checkpoint(&args.checkpoint)? {
        Network::AutoEncoder(ae) => ae,
        other => return Err(usage(format!("{} holds a {} network, not an auto-encoder", args.checkpoint.display(), other.kind()))),
    };
    let cases = vvol::read_dataset(&args.data)?;
    let rows = export_codes(&ae, &cases, target, args.include_empty)?;
    let file = std::fs::File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    write_codes_csv(file, &rows, ae.config().code_channels)?;
    eprintln!("{} codes of length {}", rows.len(), ae.config().code_channels);
    Ok(())
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// VVOL dataset; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory; overrides `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    let out = cfg.output_dir.clone().ok_or_else(|| usage("an output directory is required (--out)"))?;
    let cases = load_cases(args.data.as_deref(), &cfg)?;
    let ids: BTreeSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    eprintln!(
        "{} cases, {} methods, {} folds each",
        cases.len(),
        cfg.grid.len(),
        ids.len()
    );
    let progress = |f: &FoldResult| match &f.failure {
        Some(why) => eprintln!("{} {}: FAILED ({why})", f.method, f.case_id),
        None => eprintln!("{} {}: score {:.2} ({:.1}s)", f.method, f.case_id, f.score.unwrap_or(f64::NAN), f.seconds),
    };
    let exp = run_loocv(&cfg, &cases, Some(&progress))?;
    emit_reports(&exp, &out)?;
    write_json(&out.join("config.json"), &serde_json::to_value(&cfg)?)?;
    if exp.failed_folds() > 0 {
        eprintln!("{} fold(s) failed and are excluded from the aggregates", exp.failed_folds());
    }
    eprintln!("reports written to {}", out.display());
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || c.downcast_ref::<combreg::error::Error>().is_some_and(|e| e.is_config())
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Rank(a) => rank(a),
        Command::Codes(a) => codes(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
