//! Reliability diagrams as self-contained SVG documents.

use crate::calibration::CalibrationReport;

const WIDTH: f64 = 420.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;

fn x_of(v: f64) -> f64 {
    MARGIN + v * (WIDTH - 2.0 * MARGIN)
}

fn y_of(v: f64) -> f64 {
    HEIGHT - MARGIN - v * (HEIGHT - 2.0 * MARGIN)
}

/// Render one calibration report as a reliability diagram: a unit square
/// with the y = x reference diagonal, and one bar per non-empty bin whose
/// height is the bin's mean accuracy and whose opacity is proportional to
/// its share of the most populated bin.
pub fn reliability_svg(report: &CalibrationReport, title: &str) -> String {
    let max_count = report.bins.iter().map(|b| b.count).max().unwrap_or(0).max(1);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         width=\"{WIDTH}\" height=\"{HEIGHT}\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"40\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\">ece={} acc={} n={}</text>\n",
        WIDTH / 2.0,
        report.ece,
        report.accuracy,
        report.sample_count
    ));
    // Frame.
    s.push_str(&format!(
        "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#222\" stroke-width=\"1\"/>\n",
        x_of(0.0),
        y_of(1.0),
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    ));
    // Bars, confidence on x, accuracy on y.
    for bin in &report.bins {
        if bin.count == 0 {
            continue;
        }
        let opacity = bin.count as f64 / max_count as f64;
        let x = x_of(bin.lo);
        let w = x_of(bin.hi) - x_of(bin.lo);
        let y = y_of(bin.mean_accuracy);
        let h = y_of(0.0) - y;
        s.push_str(&format!(
            "  <rect class=\"bar\" x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" \
             fill=\"#4878a8\" fill-opacity=\"{opacity}\" stroke=\"#2a4a68\" \
             stroke-width=\"0.5\"/>\n"
        ));
    }
    // Perfect-calibration diagonal on top of the bars.
    s.push_str(&format!(
        "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" \
         stroke-width=\"1\" stroke-dasharray=\"5,4\"/>\n",
        x_of(0.0),
        y_of(0.0),
        x_of(1.0),
        y_of(1.0)
    ));
    // Axis labels.
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\">confidence</text>\n",
        WIDTH / 2.0,
        HEIGHT - 14.0
    ));
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">accuracy</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" \
             text-anchor=\"middle\">{tick}</text>\n",
            x_of(tick),
            y_of(0.0) + 16.0
        ));
        s.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\" \
             text-anchor=\"end\">{tick}</text>\n",
            x_of(0.0) - 6.0,
            y_of(tick) + 3.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(raw: &str) -> String {
    raw.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{compute_ece, Estimator, PredictionRecord};

    fn sample_report() -> CalibrationReport {
        let records: Vec<PredictionRecord> = (0..200)
            .map(|i| {
                let p = 0.28 + 0.7 * (i as f64 / 199.0);
                PredictionRecord::new(
                    vec![p, 1.0 - p, 0.0, 0.0],
                    if i % 3 == 0 { 0 } else { 1 },
                    Estimator::Msp,
                )
            })
            .collect();
        compute_ece(&records, Estimator::Msp, 10).unwrap()
    }

    #[test]
    fn svg_has_one_bar_per_non_empty_bin_and_a_diagonal() {
        let report = sample_report();
        let svg = reliability_svg(&report, "sample");
        let non_empty = report.bins.iter().filter(|b| b.count > 0).count();
        let bars = svg.matches("class=\"bar\"").count();
        assert_eq!(bars, non_empty);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1, "one reference diagonal");
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn svg_is_well_formed_xml() {
        let svg = reliability_svg(&sample_report(), "a<b>&\"c\"");
        // Minimal well-formedness scan: every '<' opens a tag that closes
        // before the next one opens, and tag nesting balances.
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg.as_str();
        while let Some(open) = rest.find('<') {
            let tail = &rest[open + 1..];
            let close = tail.find('>').expect("every tag closes");
            let tag = &tail[..close];
            assert!(!tag.contains('<'), "nested angle bracket in tag: {tag}");
            if let Some(name) = tag.strip_prefix('/') {
                assert_eq!(stack.pop().as_deref(), Some(name), "balanced close");
            } else if !tag.ends_with('/') {
                let name: String =
                    tag.chars().take_while(|c| c.is_ascii_alphanumeric()).collect();
                stack.push(name);
            }
            rest = &tail[close + 1..];
        }
        assert!(stack.is_empty(), "all tags closed: {stack:?}");
        assert!(!rest.contains('>'), "stray closing bracket outside tags");
        // Text content must be escaped.
        assert!(svg.contains("a&lt;b&gt;&amp;&quot;c&quot;"));
    }

    #[test]
    fn bar_opacity_tracks_bin_count() {
        let mut records = Vec::new();
        // 30 records near confidence 0.95, 10 near 0.55.
        for _ in 0..30 {
            records.push(PredictionRecord::new(
                vec![0.95, 0.05, 0.0, 0.0],
                0,
                Estimator::Msp,
            ));
        }
        for _ in 0..10 {
            records.push(PredictionRecord::new(
                vec![0.55, 0.45, 0.0, 0.0],
                0,
                Estimator::Msp,
            ));
        }
        let report = compute_ece(&records, Estimator::Msp, 10).unwrap();
        let svg = reliability_svg(&report, "opacity");
        assert!(svg.contains("fill-opacity=\"1\""), "fullest bin is fully opaque");
        let third = 10.0f64 / 30.0;
        assert!(
            svg.contains(&format!("fill-opacity=\"{third}\"")),
            "one-third-full bin gets one-third opacity"
        );
    }
}
