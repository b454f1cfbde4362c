//! Experiment orchestration: mode-wise evaluation, the substitute-embedding
//! ablation ladder, drop-probability sweeps, analytic FLOP counts, the
//! latency micro-benchmark, and CSV/SVG report emission.

mod bench;
mod flops;
mod report;
mod svg;

pub use bench::{bench, BenchReport, BenchRow};
pub use flops::{
    lim_forward_flops, matmul_flops, paired_forward_flops, text_only_forward_flops,
};
pub use report::{emit_reports, summary_csv};
pub use svg::reliability_svg;

use std::time::Instant;

use crate::backbone::{BackboneParams, InjectionTag, ModalityInput, VisualEmbeddings};
use crate::calibration::{
    compute_ece, CalibrationReport, Estimator, LogitRecord, PredictionRecord, ALL_ESTIMATORS,
};
use crate::data::{Example, BLANK_IMAGE_TOKEN, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::lim::LimParams;
use crate::numerics::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Substitute embeddings injected in place of real visual slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubstituteKind {
    /// All-zero rows.
    Zero,
    /// Every slot holds the embedding of the trivial PAD text token.
    Whitespace,
    /// Per-dimension Gaussian matched to the text table's column statistics.
    RandomScaled,
    /// Entries drawn from N(0, 1).
    RandomGauss,
    /// All-blank image tokens routed through the vision encoder.
    BlankImage,
}

pub const ALL_SUBSTITUTES: [SubstituteKind; 5] = [
    SubstituteKind::Zero,
    SubstituteKind::Whitespace,
    SubstituteKind::RandomScaled,
    SubstituteKind::RandomGauss,
    SubstituteKind::BlankImage,
];

impl SubstituteKind {
    pub fn name(&self) -> &'static str {
        self.tag().name()
    }

    pub fn tag(&self) -> InjectionTag {
        match self {
            SubstituteKind::Zero => InjectionTag::Zero,
            SubstituteKind::Whitespace => InjectionTag::Whitespace,
            SubstituteKind::RandomScaled => InjectionTag::RandomScaled,
            SubstituteKind::RandomGauss => InjectionTag::RandomGauss,
            SubstituteKind::BlankImage => InjectionTag::BlankImage,
        }
    }

    pub fn parse(s: &str) -> Result<SubstituteKind> {
        match s {
            "zero" => Ok(SubstituteKind::Zero),
            "whitespace" => Ok(SubstituteKind::Whitespace),
            "random_scaled" => Ok(SubstituteKind::RandomScaled),
            "random_gauss" => Ok(SubstituteKind::RandomGauss),
            "blank_image" => Ok(SubstituteKind::BlankImage),
            other => Err(Error::Config(format!(
                "unknown substitute kind '{other}' (expected zero, whitespace, \
                 random_scaled, random_gauss, or blank_image)"
            ))),
        }
    }
}

/// What fills the visual slots during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Paired,
    TextOnly,
    Lim,
    LimMse,
    Ablate(SubstituteKind),
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            EvalMode::Paired => "paired".into(),
            EvalMode::TextOnly => "text_only".into(),
            EvalMode::Lim => "lim".into(),
            EvalMode::LimMse => "lim_mse".into(),
            EvalMode::Ablate(kind) => kind.name().into(),
        }
    }

    pub fn parse(s: &str) -> Result<EvalMode> {
        match s {
            "paired" => Ok(EvalMode::Paired),
            "text_only" => Ok(EvalMode::TextOnly),
            "lim" => Ok(EvalMode::Lim),
            "lim_mse" => Ok(EvalMode::LimMse),
            other => SubstituteKind::parse(other).map(EvalMode::Ablate).map_err(|_| {
                Error::Config(format!(
                    "unknown mode '{other}' (expected paired, text_only, lim, lim_mse, \
                     or a substitute kind)"
                ))
            }),
        }
    }
}

/// The checkpoints an experiment runs against.
pub struct ModelBundle<S> {
    pub backbone: BackboneParams<S>,
    pub lim: Option<LimParams<S>>,
    pub lim_mse: Option<LimParams<S>>,
}

impl<S: Scalar> ModelBundle<S> {
    fn lim_for(&self, mode: EvalMode) -> Result<&LimParams<S>> {
        match mode {
            EvalMode::Lim => self.lim.as_ref().ok_or_else(|| {
                Error::Config("mode lim needs a trained imagination checkpoint".into())
            }),
            EvalMode::LimMse => self.lim_mse.as_ref().ok_or_else(|| {
                Error::Config("mode lim_mse needs a regression-trained checkpoint".into())
            }),
            _ => Err(Error::Config("not an imagination mode".into())),
        }
    }

    /// Validate mode/bundle compatibility before any forward pass.
    pub fn check_mode(&self, mode: EvalMode) -> Result<()> {
        match mode {
            EvalMode::Lim | EvalMode::LimMse => {
                self.lim_for(mode)?.check_compatible(&self.backbone)
            }
            _ => Ok(()),
        }
    }
}

/// Build one substitute visual-slot matrix.
pub fn make_substitute<S: Scalar>(
    kind: SubstituteKind,
    backbone: &BackboneParams<S>,
    rng: &mut Rng,
) -> Result<VisualEmbeddings<S>> {
    let n = backbone.config().visual_slots;
    let d = backbone.config().dim;
    match kind {
        SubstituteKind::Zero => Ok(Matrix::zeros(n, d)),
        SubstituteKind::Whitespace => {
            let row = backbone.embed_text(&[PAD_TOKEN])?;
            Matrix::from_fn(n, d, |_, c| row.data()[c])
        }
        SubstituteKind::RandomScaled => {
            let table = &backbone.text_table;
            let vocab = table.rows();
            let mut mean = vec![0.0f64; d];
            let mut var = vec![0.0f64; d];
            for r in 0..vocab {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += table.data()[r * d + c].as_f64();
                }
            }
            for m in &mut mean {
                *m /= vocab as f64;
            }
            for r in 0..vocab {
                for (c, v) in var.iter_mut().enumerate() {
                    let dvi = table.data()[r * d + c].as_f64() - mean[c];
                    *v += dvi * dvi;
                }
            }
            for v in &mut var {
                *v /= vocab as f64;
            }
            let draws: Vec<S> = (0..n * d)
                .map(|i| {
                    let c = i % d;
                    S::of(rng.normal_scaled(mean[c], var[c].sqrt()))
                })
                .collect();
            Matrix::from_vec(n, d, draws)
        }
        SubstituteKind::RandomGauss => {
            let draws: Vec<S> = (0..n * d).map(|_| S::of(rng.normal_scaled(0.0, 1.0))).collect();
            Matrix::from_vec(n, d, draws)
        }
        SubstituteKind::BlankImage => {
            backbone.encode_image(&vec![BLANK_IMAGE_TOKEN; n])
        }
    }
}

/// Result of evaluating one mode over one example list: one calibration
/// report per estimator plus the raw logits for downstream temperature
/// fitting. Wall-clock stays in memory and never enters report files, which
/// must be byte-deterministic.
pub struct ExperimentReport {
    pub mode: String,
    pub family: String,
    pub seed: u64,
    pub sample_count: usize,
    pub reports: Vec<CalibrationReport>,
    pub logits: Vec<LogitRecord>,
    pub wall_clock_secs: f64,
    pub config_echo: String,
}

impl ExperimentReport {
    pub fn report_for(&self, estimator: Estimator) -> &CalibrationReport {
        self.reports
            .iter()
            .find(|r| r.estimator == estimator)
            .expect("all estimators are always computed")
    }

    pub fn accuracy(&self) -> f64 {
        self.reports[0].accuracy
    }
}

fn answer_distribution<S: Scalar>(
    bundle: &ModelBundle<S>,
    mode: EvalMode,
    example: &Example,
    substitute: Option<&VisualEmbeddings<S>>,
) -> Result<crate::backbone::AnswerDistribution<S>> {
    let text = example.text_tokens();
    let input: ModalityInput<S> = match mode {
        EvalMode::Paired => {
            ModalityInput::Paired(bundle.backbone.encode_image(&example.image_tokens)?)
        }
        EvalMode::TextOnly => ModalityInput::TextOnly,
        EvalMode::Lim | EvalMode::LimMse => {
            let z = bundle.lim_for(mode)?.imagine(&bundle.backbone, &text)?;
            ModalityInput::Injected(z, InjectionTag::Lim)
        }
        EvalMode::Ablate(kind) => {
            let z = substitute
                .expect("substitutes are pre-drawn for ablation modes")
                .clone();
            ModalityInput::Injected(z, kind.tag())
        }
    };
    bundle.backbone.forward(&input, &text)
}

/// Evaluate one mode over a split: runs every example, builds prediction
/// records under all three confidence estimators, and computes one
/// calibration report per estimator. Deterministic per seed.
pub fn evaluate<S: Scalar>(
    bundle: &ModelBundle<S>,
    mode: EvalMode,
    examples: &[Example],
    family: &str,
    bins: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if examples.is_empty() {
        return Err(Error::Input("evaluation needs a non-empty split".into()));
    }
    bundle.check_mode(mode)?;
    let started = Instant::now();

    // Random substitutes are pre-drawn sequentially so evaluation itself is
    // schedule-independent.
    let substitutes: Vec<Option<VisualEmbeddings<S>>> = match mode {
        EvalMode::Ablate(kind) => {
            let mut rng = Rng::derive(seed, 0x7375627374 ^ kind as u64);
            examples
                .iter()
                .map(|_| make_substitute(kind, &bundle.backbone, &mut rng).map(Some))
                .collect::<Result<_>>()?
        }
        _ => vec![None; examples.len()],
    };

    let mut per_estimator: Vec<Vec<PredictionRecord>> =
        vec![Vec::with_capacity(examples.len()); ALL_ESTIMATORS.len()];
    let mut logits = Vec::with_capacity(examples.len());
    for (e, sub) in examples.iter().zip(&substitutes) {
        let dist = answer_distribution(bundle, mode, e, sub.as_ref())?;
        let probs = dist.probs_f64();
        logits.push(LogitRecord { logits: dist.logits_f64(), label: e.answer });
        for (slot, est) in per_estimator.iter_mut().zip(ALL_ESTIMATORS) {
            slot.push(PredictionRecord::new(probs.clone(), e.answer, est));
        }
    }
    let reports = per_estimator
        .iter()
        .zip(ALL_ESTIMATORS)
        .map(|(records, est)| compute_ece(records, est, bins))
        .collect::<Result<Vec<_>>>()?;

    Ok(ExperimentReport {
        mode: mode.name(),
        family: family.to_string(),
        seed,
        sample_count: examples.len(),
        reports,
        logits,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_echo: format!(
            "mode={} family={family} seed={seed} bins={bins} samples={}",
            mode.name(),
            examples.len()
        ),
    })
}

/// Which mode handles examples whose image was dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    TextOnly,
    Lim,
}

impl Fallback {
    pub fn name(&self) -> &'static str {
        match self {
            Fallback::TextOnly => "text_only",
            Fallback::Lim => "lim",
        }
    }

    pub fn parse(s: &str) -> Result<Fallback> {
        match s {
            "text_only" => Ok(Fallback::TextOnly),
            "lim" => Ok(Fallback::Lim),
            other => Err(Error::Config(format!(
                "unknown fallback '{other}' (expected text_only or lim)"
            ))),
        }
    }

    fn mode(&self) -> EvalMode {
        match self {
            Fallback::TextOnly => EvalMode::TextOnly,
            Fallback::Lim => EvalMode::Lim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DropSweepConfig {
    pub probabilities: Vec<f64>,
    pub fallback: Fallback,
    pub seed: u64,
}

impl Default for DropSweepConfig {
    fn default() -> Self {
        DropSweepConfig {
            probabilities: vec![0.25, 0.50, 0.75, 1.00],
            fallback: Fallback::TextOnly,
            seed: 0,
        }
    }
}

impl DropSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probabilities.is_empty() {
            return Err(Error::Config("drop sweep needs at least one probability".into()));
        }
        for &p in &self.probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("drop probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The Bernoulli drop mask for one probability. Depends only on
/// (seed, p, example count) — never on the fallback arm — so paired
/// comparisons across arms see identical dropped indices.
pub fn drop_mask(seed: u64, p: f64, count: usize) -> Vec<bool> {
    let mut rng = Rng::derive(seed, 0x64726f70 ^ p.to_bits());
    (0..count).map(|_| rng.bernoulli(p)).collect()
}

/// One report per probability: kept examples run paired, dropped examples
/// run the fallback mode.
pub fn drop_sweep<S: Scalar>(
    bundle: &ModelBundle<S>,
    config: &DropSweepConfig,
    examples: &[Example],
    family: &str,
    bins: usize,
) -> Result<Vec<(f64, ExperimentReport)>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("drop sweep needs a non-empty split".into()));
    }
    bundle.check_mode(config.fallback.mode())?;
    let mut out = Vec::with_capacity(config.probabilities.len());
    for &p in &config.probabilities {
        let started = Instant::now();
        let mask = drop_mask(config.seed, p, examples.len());
        let mut per_estimator: Vec<Vec<PredictionRecord>> =
            vec![Vec::with_capacity(examples.len()); ALL_ESTIMATORS.len()];
        let mut logits = Vec::with_capacity(examples.len());
        for (e, &dropped) in examples.iter().zip(&mask) {
            let mode = if dropped { config.fallback.mode() } else { EvalMode::Paired };
            let dist = answer_distribution(bundle, mode, e, None)?;
            let probs = dist.probs_f64();
            logits.push(LogitRecord { logits: dist.logits_f64(), label: e.answer });
            for (slot, est) in per_estimator.iter_mut().zip(ALL_ESTIMATORS) {
                slot.push(PredictionRecord::new(probs.clone(), e.answer, est));
            }
        }
        let reports = per_estimator
            .iter()
            .zip(ALL_ESTIMATORS)
            .map(|(records, est)| compute_ece(records, est, bins))
            .collect::<Result<Vec<_>>>()?;
        let mode = format!("drop_{}_p{p:.2}", config.fallback.name());
        out.push((
            p,
            ExperimentReport {
                config_echo: format!(
                    "mode={mode} family={family} seed={} bins={bins} samples={}",
                    config.seed,
                    examples.len()
                ),
                mode,
                family: family.to_string(),
                seed: config.seed,
                sample_count: examples.len(),
                reports,
                logits,
                wall_clock_secs: started.elapsed().as_secs_f64(),
            },
        ));
    }
    Ok(out)
}
