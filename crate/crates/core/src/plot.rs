//! Minimal SVG charts for simulation traces.

use std::fmt::Write;

use crate::geometry::ScaleClass;
use crate::simulator::SimReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn colour(c: ScaleClass) -> &'static str {
    match c {
        ScaleClass::Small => "#d62728",
        ScaleClass::Medium => "#2ca02c",
        ScaleClass::Large => "#1f77b4",
    }
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{MARGIN}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{:.1}" stroke="black"/>
<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>
<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>
"#,
        WIDTH / 2.0,
        escape(title),
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN,
        HEIGHT - MARGIN,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label),
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn px(x_frac: f64, y_frac: f64) -> (f64, f64) {
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    (MARGIN + x_frac * plot_w, HEIGHT - MARGIN - y_frac * plot_h)
}

/// Per-scale loss proportion over iterations, averaged into at most `bins` points.
pub fn loss_share_svg(report: &SimReport, bins: usize) -> String {
    let mut out = String::new();
    frame(
        &mut out,
        &format!(
            "loss proportion per scale ({}, seed {})",
            report.policy, report.seed
        ),
        "iteration",
        "loss proportion",
    );
    let n = report.steps.len();
    let bins = bins.clamp(1, n.max(1));
    for class in ScaleClass::ALL {
        let mut points = Vec::with_capacity(bins);
        for b in 0..bins {
            let (lo, hi) = (
                b * n / bins,
                ((b + 1) * n / bins).max(b * n / bins + 1).min(n),
            );
            let shares: Vec<f64> = report.steps[lo..hi]
                .iter()
                .filter_map(|s| s.loss_share().map(|sh| sh[class]))
                .collect();
            if shares.is_empty() {
                continue;
            }
            let mean = shares.iter().sum::<f64>() / shares.len() as f64;
            let x = if bins > 1 {
                b as f64 / (bins - 1) as f64
            } else {
                0.5
            };
            points.push(px(x, mean));
        }
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            colour(class),
            path.join(" ")
        );
    }
    for (i, class) in ScaleClass::ALL.into_iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{y:.1}" fill="{}">{class}</text>"#,
            WIDTH - MARGIN - 60.0,
            colour(class)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.1}">{n}</text>"#,
        MARGIN - 4.0
    );
    out.push_str("</svg>\n");
    out
}

/// Histogram of the small-object loss proportion over `[0, 1]`.
pub fn ratio_histogram_svg(report: &SimReport, bins: usize) -> String {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for r in report.steps.iter().filter_map(|s| s.r_s) {
        let b = ((r * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut out = String::new();
    frame(
        &mut out,
        &format!("small loss proportion histogram ({})", report.policy),
        "r_s",
        "iterations",
    );
    let bar_w = (WIDTH - 2.0 * MARGIN) / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let (x, y) = px(i as f64 / bins as f64, c as f64 / max);
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#7f7f7f" stroke="white"/>"##,
            bar_w,
            HEIGHT - MARGIN - y
        );
    }
    let (tx, _) = px(report.tau, 0.0);
    let _ = writeln!(
        out,
        r##"<line x1="{tx:.1}" y1="{MARGIN}" x2="{tx:.1}" y2="{:.1}" stroke="#d62728" stroke-dasharray="4 3"/>"##,
        HEIGHT - MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.1}">{}</text>"#,
        MARGIN - 4.0,
        max as usize
    );
    out.push_str("</svg>\n");
    out
}
