//! Command-line front end for the imagination-module laboratory: dataset
//! generation, backbone pretraining, imagination-module training, and the
//! evaluation/reporting harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lim_lab::calibration::{
    compute_ece, fit_temperature, scaled_nll, Estimator, PredictionRecord,
};
use lim_lab::config::RunConfig;
use lim_lab::data::{gen_dataset, DatasetSplit, Example, Family};
use lim_lab::error::{Error, Result};
use lim_lab::experiments::{
    bench, drop_sweep, emit_reports, evaluate, DropSweepConfig, EvalMode, Fallback,
    ModelBundle, SubstituteKind, ALL_SUBSTITUTES,
};
use lim_lab::lim::LimParams;
use lim_lab::training::{
    load_checkpoint, pretrain_backbone, save_checkpoint, train_lim, train_lim_mse, Objective,
};

#[derive(Parser)]
#[command(
    name = "lim-lab",
    version,
    about = "Train and probe a latent imagination module on a frozen toy multimodal transformer"
)]
struct Cli {
    /// Run configuration file (flat `key = value`, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for data generation, initialization, training order, and
    /// evaluation-time random draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Checkpoint path: the output of `train-backbone`, the backbone input
    /// of `train-lim`, and the model input everywhere else.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate both dataset families and write their splits as text files.
    GenData {
        /// Directory receiving `<family>_<split>.txt` files.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Pretrain the multimodal backbone on paired examples from both
    /// families' train splits, gate on train accuracy, freeze, and save.
    TrainBackbone {
        /// Load splits from this directory instead of regenerating them.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the imagination module against a frozen backbone checkpoint
    /// on the in-domain train split; saves backbone + module together.
    TrainLim {
        /// Load splits from this directory instead of regenerating them.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output path for the combined checkpoint.
        #[arg(long, default_value = "lim.ckpt")]
        out: PathBuf,
        /// Training objective: `nll` (answer likelihood) or `mse`
        /// (regression onto encoder embeddings). Overrides the config file.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Evaluate one mode on a split and print its calibration summary.
    Eval {
        /// paired | text_only | lim | lim_mse | zero | whitespace |
        /// random_scaled | random_gauss | blank_image
        #[arg(long, default_value = "lim")]
        mode: String,
        /// Confidence estimator to report: msp | entropy | margin.
        #[arg(long, default_value = "msp")]
        estimator: String,
        /// Equal-width confidence bins (default from config).
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        where_: WhereArgs,
    },
    /// Evaluate a grid of image-drop probabilities with a fallback mode.
    DropSweep {
        /// Mode handling dropped examples: text_only | lim.
        #[arg(long, default_value = "text_only")]
        fallback: String,
        /// Comma-separated drop probabilities (default from config).
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long, default_value = "msp")]
        estimator: String,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        where_: WhereArgs,
    },
    /// Evaluate substitute-embedding ablations.
    Ablate {
        /// Comma-separated kinds (default: all of zero, whitespace,
        /// random_scaled, random_gauss, blank_image).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        #[arg(long, default_value = "msp")]
        estimator: String,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        where_: WhereArgs,
    },
    /// Fit a softmax temperature on the validation split and report its
    /// effect on validation NLL and test calibration.
    TempScale {
        /// Mode whose logits are scaled (default text_only).
        #[arg(long, default_value = "text_only")]
        mode: String,
        #[arg(long, default_value = "msp")]
        estimator: String,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        where_: WhereArgs,
    },
    /// Benchmark per-sample latency (median, p95) and analytic FLOPs.
    Bench {
        /// Timed forward passes per mode (at least 100).
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        where_: WhereArgs,
    },
    /// Evaluate every available mode and write reliability CSVs, SVG
    /// diagrams, and a summary table.
    Report {
        /// Output directory for report files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        where_: WhereArgs,
    },
}

/// Which examples a command runs on.
#[derive(clap::Args)]
struct WhereArgs {
    /// Dataset family: in_domain | held_out.
    #[arg(long, default_value = "held_out")]
    family: String,
    /// Split: train | validation | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Load splits from this directory instead of regenerating them.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            // Usage and validation problems exit 1; only I/O failures use 2.
            return if usage_ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out } => cmd_gen_data(&cfg, seed, &out),
        Command::TrainBackbone { data } => {
            let out = cli.ckpt.unwrap_or_else(|| PathBuf::from("backbone.ckpt"));
            cmd_train_backbone(&cfg, seed, data.as_deref(), &out)
        }
        Command::TrainLim { data, out, objective } => {
            let backbone_ckpt =
                cli.ckpt.unwrap_or_else(|| PathBuf::from("backbone.ckpt"));
            cmd_train_lim(&cfg, seed, data.as_deref(), &backbone_ckpt, &out, objective)
        }
        Command::Eval { mode, estimator, bins, where_ } => {
            let ckpt = default_ckpt(cli.ckpt);
            cmd_eval(&cfg, seed, &ckpt, &mode, &estimator, bins, &where_)
        }
        Command::DropSweep { fallback, p, estimator, bins, where_ } => {
            let ckpt = default_ckpt(cli.ckpt);
            cmd_drop_sweep(&cfg, seed, &ckpt, &fallback, p, &estimator, bins, &where_)
        }
        Command::Ablate { kinds, estimator, bins, where_ } => {
            let ckpt = default_ckpt(cli.ckpt);
            cmd_ablate(&cfg, seed, &ckpt, kinds, &estimator, bins, &where_)
        }
        Command::TempScale { mode, estimator, bins, where_ } => {
            let ckpt = default_ckpt(cli.ckpt);
            cmd_temp_scale(&cfg, seed, &ckpt, &mode, &estimator, bins, &where_)
        }
        Command::Bench { trials, where_ } => {
            let ckpt = default_ckpt(cli.ckpt);
            cmd_bench(&cfg, seed, &ckpt, trials, &where_)
        }
        Command::Report { out, bins, where_ } => {
            let ckpt = default_ckpt(cli.ckpt);
            cmd_report(&cfg, seed, &ckpt, &out, bins, &where_)
        }
    }
}

fn default_ckpt(ckpt: Option<PathBuf>) -> PathBuf {
    ckpt.unwrap_or_else(|| PathBuf::from("lim.ckpt"))
}

/// Load a family's splits from `dir` when given, else regenerate them from
/// the config and seed (both paths are deterministic).
fn dataset(
    cfg: &RunConfig,
    seed: u64,
    dir: Option<&Path>,
    family: Family,
) -> Result<DatasetSplit> {
    match dir {
        Some(dir) => DatasetSplit::load(dir, family),
        None => gen_dataset(&cfg.data, seed, family),
    }
}

fn pick_split<'a>(ds: &'a DatasetSplit, split: &str) -> Result<&'a [Example]> {
    match split {
        "train" => Ok(&ds.train),
        "validation" => Ok(&ds.validation),
        "test" => Ok(&ds.test),
        other => Err(Error::Config(format!(
            "unknown split '{other}' (expected train, validation, or test)"
        ))),
    }
}

fn examples_for(
    cfg: &RunConfig,
    seed: u64,
    where_: &WhereArgs,
) -> Result<(Family, Vec<Example>)> {
    let family = Family::parse(&where_.family)?;
    let ds = dataset(cfg, seed, where_.data.as_deref(), family)?;
    let examples = pick_split(&ds, &where_.split)?.to_vec();
    Ok((family, examples))
}

/// Load a checkpoint as a model bundle. The single stored imagination
/// module serves both the `lim` and `lim_mse` slots; which one is honest
/// depends on the objective it was trained with.
fn load_bundle(path: &Path) -> Result<ModelBundle<f32>> {
    let contents = load_checkpoint::<f32>(path)?;
    let backbone = contents.backbone.ok_or_else(|| {
        Error::Checkpoint(format!(
            "{} holds no backbone section; run train-backbone first",
            path.display()
        ))
    })?;
    Ok(ModelBundle {
        backbone,
        lim: contents.lim.clone(),
        lim_mse: contents.lim,
    })
}

fn resolve_bins(cfg: &RunConfig, bins: Option<usize>) -> Result<usize> {
    let bins = bins.unwrap_or(cfg.bins);
    if bins == 0 {
        return Err(Error::Config("--bins must be positive".into()));
    }
    Ok(bins)
}

fn cmd_gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for family in [Family::InDomain, Family::HeldOut] {
        let ds = gen_dataset(&cfg.data, seed, family)?;
        ds.save(out)?;
        println!(
            "family={} train={} validation={} test={}",
            family.name(),
            ds.train.len(),
            ds.validation.len(),
            ds.test.len()
        );
    }
    println!("wrote splits to {}", out.display());
    Ok(())
}

fn cmd_train_backbone(
    cfg: &RunConfig,
    seed: u64,
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let in_domain = dataset(cfg, seed, data, Family::InDomain)?;
    let held_out = dataset(cfg, seed, data, Family::HeldOut)?;
    let mut train = in_domain.train.clone();
    train.extend(held_out.train.iter().cloned());
    let mut tcfg = cfg.backbone_train.clone();
    tcfg.seed = seed;
    let (backbone, log) = pretrain_backbone::<f32>(&cfg.backbone, &train, &tcfg)?;
    save_checkpoint(out, Some(&backbone), None::<&LimParams<f32>>)?;
    println!(
        "pretrained on {} paired examples over {} epochs; final train accuracy {}",
        train.len(),
        log.epoch_loss.len(),
        log.epoch_accuracy.last().copied().unwrap_or(0.0)
    );
    println!("frozen backbone checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_train_lim(
    cfg: &RunConfig,
    seed: u64,
    data: Option<&Path>,
    backbone_ckpt: &Path,
    out: &Path,
    objective: Option<String>,
) -> Result<()> {
    let contents = load_checkpoint::<f32>(backbone_ckpt)?;
    let backbone = contents.backbone.ok_or_else(|| {
        Error::Checkpoint(format!(
            "{} holds no backbone section; run train-backbone first",
            backbone_ckpt.display()
        ))
    })?;
    backbone.assert_frozen()?;
    let objective = match objective {
        Some(raw) => Objective::parse(&raw)?,
        None => cfg.lim_train.objective,
    };
    let in_domain = dataset(cfg, seed, data, Family::InDomain)?;
    let mut tcfg = cfg.lim_train.clone();
    tcfg.seed = seed;
    tcfg.objective = objective;
    let lim = LimParams::init(backbone.config(), cfg.lim.clone(), seed)?;
    let (lim, log) = match objective {
        Objective::Nll => train_lim(lim, &backbone, &in_domain.train, &tcfg)?,
        Objective::MseToOracle => train_lim_mse(lim, &backbone, &in_domain.train, &tcfg)?,
    };
    save_checkpoint(out, Some(&backbone), Some(&lim))?;
    println!(
        "trained imagination module ({}) on {} in-domain examples over {} epochs; final loss {}",
        objective.name(),
        in_domain.train.len(),
        log.epoch_loss.len(),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    println!("combined checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    seed: u64,
    ckpt: &Path,
    mode: &str,
    estimator: &str,
    bins: Option<usize>,
    where_: &WhereArgs,
) -> Result<()> {
    let mode = EvalMode::parse(mode)?;
    let estimator = Estimator::parse(estimator)?;
    let bins = resolve_bins(cfg, bins)?;
    let bundle = load_bundle(ckpt)?;
    let (family, examples) = examples_for(cfg, seed, where_)?;
    let report = evaluate(&bundle, mode, &examples, family.name(), bins, seed)?;
    let cal = report.report_for(estimator);
    println!(
        "mode={} family={} split={} samples={} seed={seed} bins={bins}",
        report.mode,
        family.name(),
        where_.split,
        report.sample_count
    );
    println!("estimator={} acc={} ece={}", estimator.name(), cal.accuracy, cal.ece);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_drop_sweep(
    cfg: &RunConfig,
    seed: u64,
    ckpt: &Path,
    fallback: &str,
    p: Option<Vec<f64>>,
    estimator: &str,
    bins: Option<usize>,
    where_: &WhereArgs,
) -> Result<()> {
    let estimator = Estimator::parse(estimator)?;
    let bins = resolve_bins(cfg, bins)?;
    let sweep_cfg = DropSweepConfig {
        probabilities: p.unwrap_or_else(|| cfg.drop_probabilities.clone()),
        fallback: Fallback::parse(fallback)?,
        seed,
    };
    let bundle = load_bundle(ckpt)?;
    let (family, examples) = examples_for(cfg, seed, where_)?;
    let points = drop_sweep(&bundle, &sweep_cfg, &examples, family.name(), bins)?;
    println!(
        "fallback={fallback} estimator={} family={} split={} samples={} seed={seed}",
        estimator.name(),
        family.name(),
        where_.split,
        examples.len()
    );
    for (p, report) in &points {
        let cal = report.report_for(estimator);
        println!("p={p} acc={} ece={}", cal.accuracy, cal.ece);
    }
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    seed: u64,
    ckpt: &Path,
    kinds: Option<Vec<String>>,
    estimator: &str,
    bins: Option<usize>,
    where_: &WhereArgs,
) -> Result<()> {
    let estimator = Estimator::parse(estimator)?;
    let bins = resolve_bins(cfg, bins)?;
    let kinds: Vec<SubstituteKind> = match kinds {
        Some(raw) => raw
            .iter()
            .map(|k| SubstituteKind::parse(k.trim()))
            .collect::<Result<_>>()?,
        None => ALL_SUBSTITUTES.to_vec(),
    };
    let bundle = load_bundle(ckpt)?;
    let (family, examples) = examples_for(cfg, seed, where_)?;
    println!(
        "estimator={} family={} split={} samples={} seed={seed}",
        estimator.name(),
        family.name(),
        where_.split,
        examples.len()
    );
    for kind in kinds {
        let report = evaluate(
            &bundle,
            EvalMode::Ablate(kind),
            &examples,
            family.name(),
            bins,
            seed,
        )?;
        let cal = report.report_for(estimator);
        println!("kind={} acc={} ece={}", kind.name(), cal.accuracy, cal.ece);
    }
    Ok(())
}

fn cmd_temp_scale(
    cfg: &RunConfig,
    seed: u64,
    ckpt: &Path,
    mode: &str,
    estimator: &str,
    bins: Option<usize>,
    where_: &WhereArgs,
) -> Result<()> {
    let mode = EvalMode::parse(mode)?;
    let estimator = Estimator::parse(estimator)?;
    let bins = resolve_bins(cfg, bins)?;
    let bundle = load_bundle(ckpt)?;
    let family = Family::parse(&where_.family)?;
    let ds = dataset(cfg, seed, where_.data.as_deref(), family)?;

    let val = evaluate(&bundle, mode, &ds.validation, family.name(), bins, seed)?;
    let scaler = fit_temperature(&val.logits)?;
    let test = evaluate(&bundle, mode, &ds.test, family.name(), bins, seed)?;

    let scaled_records: Vec<PredictionRecord> = test
        .logits
        .iter()
        .map(|r| PredictionRecord::new(scaler.apply(&r.logits), r.label, estimator))
        .collect();
    let scaled_report = compute_ece(&scaled_records, estimator, bins)?;
    let before = test.report_for(estimator);
    let labels_changed = test
        .logits
        .iter()
        .zip(&scaled_records)
        .filter(|(raw, scaled)| {
            let unscaled = PredictionRecord::new(
                lim_lab::calibration::TemperatureScaler { t: 1.0, warning: false }
                    .apply(&raw.logits),
                raw.label,
                estimator,
            );
            unscaled.predicted != scaled.predicted
        })
        .count();

    println!(
        "mode={} family={} estimator={} seed={seed} bins={bins}",
        mode.name(),
        family.name(),
        estimator.name()
    );
    println!("t={} warning={}", scaler.t, scaler.warning);
    println!(
        "val_nll_unscaled={} val_nll_scaled={}",
        scaled_nll(&val.logits, 1.0),
        scaled_nll(&val.logits, scaler.t)
    );
    println!(
        "test_ece_unscaled={} test_ece_scaled={} test_acc={}",
        before.ece, scaled_report.ece, before.accuracy
    );
    println!("labels_changed={labels_changed}");
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    seed: u64,
    ckpt: &Path,
    trials: Option<usize>,
    where_: &WhereArgs,
) -> Result<()> {
    let bundle = load_bundle(ckpt)?;
    let (_, examples) = examples_for(cfg, seed, where_)?;
    let report = bench(&bundle, &examples, trials.unwrap_or(cfg.bench_trials))?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_report(
    cfg: &RunConfig,
    seed: u64,
    ckpt: &Path,
    out: &Path,
    bins: Option<usize>,
    where_: &WhereArgs,
) -> Result<()> {
    let bins = resolve_bins(cfg, bins)?;
    let bundle = load_bundle(ckpt)?;
    let (family, examples) = examples_for(cfg, seed, where_)?;
    let mut modes = vec![EvalMode::Paired, EvalMode::TextOnly];
    if bundle.lim.is_some() {
        modes.push(EvalMode::Lim);
    }
    modes.extend(ALL_SUBSTITUTES.iter().map(|&k| EvalMode::Ablate(k)));
    let reports = modes
        .iter()
        .map(|&mode| evaluate(&bundle, mode, &examples, family.name(), bins, seed))
        .collect::<Result<Vec<_>>>()?;
    let written = emit_reports(&reports, out)?;
    println!(
        "evaluated {} modes on {} {} examples; wrote {} files to {}",
        modes.len(),
        examples.len(),
        family.name(),
        written.len(),
        out.display()
    );
    Ok(())
}
