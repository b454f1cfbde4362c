//! Latency micro-benchmark comparing inference paths on real examples.

use std::time::Instant;

use super::flops::{lim_forward_flops, paired_forward_flops, text_only_forward_flops};
use super::{EvalMode, ModelBundle};
use crate::backbone::{InjectionTag, ModalityInput};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Latency summary for one inference path, with its analytic FLOP count for
/// the benchmarked text length.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub mode: String,
    pub trials: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub text_len: usize,
}

impl BenchReport {
    /// Human-readable table, one row per mode.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "mode            trials  median_us    p95_us       flops (text_len={})\n",
            self.text_len
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<15} {:>6}  {:>9.2}  {:>8.2}  {:>10}\n",
                row.mode, row.trials, row.median_us, row.p95_us, row.flops
            ));
        }
        out
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn time_path<S: Scalar>(
    bundle: &ModelBundle<S>,
    mode: EvalMode,
    examples: &[Example],
    trials: usize,
) -> Result<(f64, f64)> {
    // One untimed pass to warm caches before measurement.
    let warm = &examples[0];
    run_once(bundle, mode, warm)?;
    let mut samples = Vec::with_capacity(trials);
    for i in 0..trials {
        let e = &examples[i % examples.len()];
        let started = Instant::now();
        run_once(bundle, mode, e)?;
        samples.push(started.elapsed().as_secs_f64() * 1e6);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    Ok((percentile(&samples, 0.50), percentile(&samples, 0.95)))
}

fn run_once<S: Scalar>(bundle: &ModelBundle<S>, mode: EvalMode, e: &Example) -> Result<()> {
    let text = e.text_tokens();
    let input: ModalityInput<S> = match mode {
        EvalMode::Paired => {
            ModalityInput::Paired(bundle.backbone.encode_image(&e.image_tokens)?)
        }
        EvalMode::TextOnly => ModalityInput::TextOnly,
        EvalMode::Lim => {
            let lim = bundle.lim.as_ref().ok_or_else(|| {
                Error::Config("benchmark needs a trained imagination checkpoint".into())
            })?;
            ModalityInput::Injected(lim.imagine(&bundle.backbone, &text)?, InjectionTag::Lim)
        }
        other => {
            return Err(Error::Config(format!(
                "benchmark covers paired, text_only, and lim, not {}",
                other.name()
            )))
        }
    };
    bundle.backbone.forward(&input, &text)?;
    Ok(())
}

/// Benchmark the three inference paths over the given examples. `trials`
/// is clamped up to 100 so percentiles rest on a reasonable sample.
pub fn bench<S: Scalar>(
    bundle: &ModelBundle<S>,
    examples: &[Example],
    trials: usize,
) -> Result<BenchReport> {
    if examples.is_empty() {
        return Err(Error::Input("benchmark needs a non-empty split".into()));
    }
    let trials = trials.max(100);
    let text_len = examples[0].text_tokens().len();
    let bc = bundle.backbone.config();
    let mut rows = Vec::new();
    for mode in [EvalMode::TextOnly, EvalMode::Lim, EvalMode::Paired] {
        if matches!(mode, EvalMode::Lim) && bundle.lim.is_none() {
            continue;
        }
        let (median_us, p95_us) = time_path(bundle, mode, examples, trials)?;
        let flops = match mode {
            EvalMode::TextOnly => text_only_forward_flops(bc, text_len),
            EvalMode::Paired => paired_forward_flops(bc, text_len),
            EvalMode::Lim => {
                let lim = bundle.lim.as_ref().expect("checked above");
                // Imagination plus the injected trunk forward it feeds.
                lim_forward_flops(bc, lim.config(), text_len)
                    + paired_forward_flops(bc, text_len)
                    - super::flops::matmul_flops(bc.visual_slots, bc.dim, bc.dim)
            }
            _ => unreachable!(),
        };
        rows.push(BenchRow { mode: mode.name(), trials, median_us, p95_us, flops });
    }
    Ok(BenchReport { rows, text_len })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_pick_the_expected_ranks() {
        // Odd count: the nearest-rank median is the true median.
        let sorted: Vec<f64> = (1..=101).map(|v| v as f64).collect();
        assert_eq!(percentile(&sorted, 0.50), 51.0);
        assert_eq!(percentile(&sorted, 0.95), 96.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }
}
