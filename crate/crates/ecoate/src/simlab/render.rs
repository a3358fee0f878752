//! Render aggregated simulation metrics as a plain-text table and as an
//! SVG small-multiples figure (squared bias, variance, coverage against
//! the tilt magnitude), one line per estimator.

use crate::error::Result;

use super::metrics::{summarize_metrics, EstimatorMetrics};
use super::runner::ResultRow;

/// Metrics grouped by the scenario tilt magnitude.
pub type MetricsByEpsilon = Vec<(f64, Vec<EstimatorMetrics>)>;

/// Group rows by their epsilon column (ascending) and summarize each group.
pub fn metrics_by_epsilon(rows: &[ResultRow], truth: f64) -> Result<MetricsByEpsilon> {
    let mut epsilons: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let mut out = Vec::with_capacity(epsilons.len());
    for eps in epsilons {
        let group: Vec<ResultRow> = rows
            .iter()
            .filter(|r| r.epsilon == eps)
            .cloned()
            .collect();
        out.push((eps, summarize_metrics(&group, truth)?));
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a < 1e-3 || a >= 1e4 {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

/// Fixed-width table of metrics, one line per (epsilon, estimator).
pub fn render_table(groups: &MetricsByEpsilon) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:>7}  {:<12} {:>5} {:>5}  {:>21}  {:>21}  {:>17}  {:>9}\n",
        "epsilon", "estimator", "reps", "fail", "bias^2 (mc se)", "variance (mc se)", "coverage (mc se)", "mean(se)"
    ));
    for (eps, metrics) in groups {
        for m in metrics {
            s.push_str(&format!(
                "{:>7}  {:<12} {:>5} {:>5}  {:>21}  {:>21}  {:>17}  {:>9}\n",
                format!("{eps:.2}"),
                m.estimator,
                m.rows,
                m.failures,
                format!("{} ({})", fmt(m.bias_sq), fmt(m.bias_sq_se)),
                format!("{} ({})", fmt(m.variance), fmt(m.variance_se)),
                format!("{:.3} ({:.3})", m.coverage, m.coverage_se),
                fmt(m.mean_se),
            ));
        }
    }
    s
}

const PALETTE: [&str; 8] = [
    "#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9", "#7f7f7f", "#000000",
];

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Panel {
    fn sx(&self, frac: f64) -> f64 {
        self.x0 + frac * self.w
    }
    fn sy(&self, frac: f64) -> f64 {
        // SVG y grows downward; flip so larger values sit higher.
        self.y0 + self.h * (1.0 - frac)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Small-multiples figure: three panels (squared bias, variance, coverage)
/// against epsilon, a polyline with point markers per estimator, a shared
/// legend, and a nominal-level reference line in the coverage panel.
pub fn render_svg(groups: &MetricsByEpsilon) -> String {
    let width = 1000.0;
    let height = 420.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let estimators: Vec<String> = {
        let mut names: Vec<String> = groups
            .iter()
            .flat_map(|(_, ms)| ms.iter().map(|m| m.estimator.clone()))
            .collect();
        names.sort();
        names.dedup();
        names
    };
    let epsilons: Vec<f64> = groups.iter().map(|(e, _)| *e).collect();
    if epsilons.is_empty() || estimators.is_empty() {
        svg.push_str("<text x=\"20\" y=\"40\" font-size=\"14\">no data</text>\n</svg>\n");
        return svg;
    }
    let (e_min, e_max) = (epsilons[0], *epsilons.last().unwrap());
    let e_span = (e_max - e_min).max(1e-12);
    let xfrac = |e: f64| (e - e_min) / e_span;

    let value =
        |m: &EstimatorMetrics, which: usize| [m.bias_sq, m.variance, m.coverage][which];
    let titles = ["squared bias", "variance", "coverage"];

    for (which, title) in titles.iter().enumerate() {
        let panel = Panel {
            x0: 65.0 + 320.0 * which as f64,
            y0: 45.0,
            w: 250.0,
            h: 270.0,
        };
        // Per-panel y range: metrics from zero up; coverage pinned to [0, 1].
        let (y_min, y_max) = if which == 2 {
            let lo = groups
                .iter()
                .flat_map(|(_, ms)| ms.iter().map(|m| m.coverage))
                .fold(1.0_f64, f64::min);
            ((lo - 0.05).clamp(0.0, 0.9), 1.0)
        } else {
            let hi = groups
                .iter()
                .flat_map(|(_, ms)| ms.iter().map(|m| value(m, which)))
                .fold(0.0_f64, f64::max);
            (0.0, if hi > 0.0 { hi * 1.08 } else { 1.0 })
        };
        let yfrac = |v: f64| ((v - y_min) / (y_max - y_min)).clamp(0.0, 1.0);

        // Frame, title, axis labels.
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#333\"/>\n",
            panel.x0, panel.y0, panel.w, panel.h
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
            panel.x0 + panel.w / 2.0,
            panel.y0 - 12.0,
            title
        ));
        for (v, frac) in [(y_min, 0.0), ((y_min + y_max) / 2.0, 0.5), (y_max, 1.0)] {
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
                panel.x0 - 6.0,
                panel.sy(frac) + 4.0,
                fmt(v)
            ));
        }
        for &e in &epsilons {
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{e:.2}</text>\n",
                panel.sx(xfrac(e)),
                panel.y0 + panel.h + 16.0
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">epsilon</text>\n",
            panel.x0 + panel.w / 2.0,
            panel.y0 + panel.h + 34.0
        ));

        // Nominal-level reference in the coverage panel.
        if which == 2 && y_min <= 0.95 {
            let y = panel.sy(yfrac(0.95));
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#888\" stroke-dasharray=\"5,4\"/>\n",
                panel.x0,
                panel.x0 + panel.w
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#888\">0.95</text>\n",
                panel.x0 + panel.w + 4.0,
                y + 3.0
            ));
        }

        for (idx, est) in estimators.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let mut pts = Vec::new();
            for (eps, metrics) in groups {
                if let Some(m) = metrics.iter().find(|m| &m.estimator == est) {
                    pts.push((panel.sx(xfrac(*eps)), panel.sy(yfrac(value(m, which)))));
                }
            }
            if pts.len() > 1 {
                let path: Vec<String> =
                    pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                    path.join(" ")
                ));
            }
            for (x, y) in pts {
                svg.push_str(&format!(
                    "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"/>\n"
                ));
            }
        }
    }

    // Shared legend along the bottom.
    let mut lx = 65.0;
    let ly = height - 28.0;
    for (idx, est) in estimators.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        svg.push_str(&format!(
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2.5\"/>\n",
            lx + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
            lx + 27.0,
            ly + 4.0,
            xml_escape(est)
        ));
        lx += 40.0 + 7.2 * est.len() as f64;
    }

    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_for(eps: f64, shift: f64) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for (est, spread) in [("alpha", 0.05), ("beta", 0.10)] {
            for rep in 0..6_usize {
                let offset = spread * ((rep as f64) - 2.5) / 2.5 + shift;
                let estimate = 1.0 + offset;
                rows.push(ResultRow {
                    estimator: est.into(),
                    epsilon: eps,
                    rep,
                    seed: rep as u64,
                    estimate,
                    se: 0.1,
                    ci_lo: estimate - 0.196,
                    ci_hi: estimate + 0.196,
                    covered: u8::from((estimate - 1.0).abs() <= 0.196),
                    sources_used: 3,
                    failed: 0,
                    error: String::new(),
                });
            }
        }
        rows
    }

    #[test]
    fn table_lists_every_group_and_estimator() {
        let mut rows = rows_for(0.0, 0.0);
        rows.extend(rows_for(1.0, 0.3));
        let groups = metrics_by_epsilon(&rows, 1.0).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, 0.0);
        let table = render_table(&groups);
        assert_eq!(table.lines().count(), 1 + 4);
        assert!(table.contains("alpha"));
        assert!(table.contains("beta"));
        assert!(table.contains("coverage"));
    }

    #[test]
    fn svg_has_three_panels_lines_and_reference() {
        let mut rows = rows_for(0.0, 0.0);
        rows.extend(rows_for(0.5, 0.1));
        rows.extend(rows_for(1.0, 0.3));
        let groups = metrics_by_epsilon(&rows, 1.0).unwrap();
        let svg = render_svg(&groups);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("squared bias").count(), 1);
        assert_eq!(svg.matches("variance").count(), 1);
        assert_eq!(svg.matches("coverage").count(), 1);
        // One polyline per estimator per panel.
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(svg.contains("stroke-dasharray"), "missing 0.95 reference line");
        assert!(svg.contains("alpha") && svg.contains("beta"));
    }

    #[test]
    fn svg_handles_single_epsilon_without_lines() {
        let rows = rows_for(0.7, 0.0);
        let groups = metrics_by_epsilon(&rows, 1.0).unwrap();
        let svg = render_svg(&groups);
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert!(svg.matches("<circle").count() >= 6);
    }
}
