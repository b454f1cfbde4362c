//! Report emission: per-estimator reliability CSVs and diagrams plus a
//! run-level summary table. All files are byte-deterministic for a fixed
//! set of reports.

use std::fs;
use std::path::{Path, PathBuf};

use super::svg::reliability_svg;
use super::ExperimentReport;
use crate::calibration::reliability_csv;
use crate::error::{Error, Result};

/// Summary table over every (mode, estimator) pair: `mode,estimator,acc,ece`.
pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("mode,estimator,acc,ece\n");
    for report in reports {
        for cal in &report.reports {
            out.push_str(&format!(
                "{},{},{},{}\n",
                report.mode,
                cal.estimator.name(),
                cal.accuracy,
                cal.ece
            ));
        }
    }
    out
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Write one reliability CSV and one SVG per (mode, estimator) pair, plus
/// `summary.csv`, into `out_dir`. Returns every path written.
pub fn emit_reports(reports: &[ExperimentReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Input("nothing to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for report in reports {
        for cal in &report.reports {
            let stem = format!("{}_{}", report.mode, cal.estimator.name());
            let csv_path = out_dir.join(format!("{stem}.csv"));
            write(&csv_path, &reliability_csv(cal))?;
            written.push(csv_path);
            let svg_path = out_dir.join(format!("{stem}.svg"));
            let title = format!("{} / {} ({})", report.mode, cal.estimator.name(), report.family);
            write(&svg_path, &reliability_svg(cal, &title))?;
            written.push(svg_path);
        }
    }
    let summary_path = out_dir.join("summary.csv");
    write(&summary_path, &summary_csv(reports))?;
    written.push(summary_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{compute_ece, Estimator, PredictionRecord, ALL_ESTIMATORS};

    fn fake_report(mode: &str) -> ExperimentReport {
        let cases: Vec<(Vec<f64>, usize)> = (0..50)
            .map(|i| {
                let p = 0.3 + 0.014 * i as f64;
                (vec![p, 1.0 - p], i % 2)
            })
            .collect();
        let reports = ALL_ESTIMATORS
            .iter()
            .map(|&est| {
                let rs: Vec<PredictionRecord> = cases
                    .iter()
                    .map(|(probs, label)| PredictionRecord::new(probs.clone(), *label, est))
                    .collect();
                compute_ece(&rs, est, 10).unwrap()
            })
            .collect();
        ExperimentReport {
            mode: mode.to_string(),
            family: "in_domain".to_string(),
            seed: 7,
            sample_count: 50,
            reports,
            logits: Vec::new(),
            wall_clock_secs: 0.0,
            config_echo: String::new(),
        }
    }

    #[test]
    fn summary_has_a_row_per_mode_estimator_pair() {
        let reports = vec![fake_report("paired"), fake_report("lim")];
        let csv = summary_csv(&reports);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "mode,estimator,acc,ece");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("paired,msp,"));
        assert!(lines[4].starts_with("lim,msp,"));
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 4);
        }
    }

    #[test]
    fn emit_writes_csv_svg_pairs_plus_summary_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![fake_report("paired"), fake_report("text_only")];
        let written = emit_reports(&reports, dir.path()).unwrap();
        // 2 modes × 3 estimators × (csv + svg) + summary.csv
        assert_eq!(written.len(), 2 * 3 * 2 + 1);
        for path in &written {
            assert!(path.exists(), "{path:?} missing");
        }
        let before: Vec<Vec<u8>> =
            written.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_reports(&reports, dir.path()).unwrap();
        let after: Vec<Vec<u8>> =
            written.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(before, after, "re-emission must be byte-identical");
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("mode,estimator,acc,ece\n"));
    }

    #[test]
    fn reliability_counts_sum_to_sample_count() {
        let report = fake_report("paired");
        for cal in &report.reports {
            let total: usize = cal.bins.iter().map(|b| b.count).sum();
            assert_eq!(total, report.sample_count);
        }
    }

    #[test]
    fn empty_report_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_reports(&[], dir.path()),
            Err(Error::Input(_))
        ));
    }
}
