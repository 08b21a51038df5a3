//! Minimal SVG box plots of summary statistics: one group of boxes per
//! subject count, one box per structure.

use std::fmt::Write;

use pilotdesign_core::design::Structure;
use pilotdesign_core::sim::SummaryRow;

use crate::io::fmt_float;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];

/// Renders the boxes of `metric`; `None` when there is nothing to draw.
pub fn boxplot_svg(rows: &[SummaryRow], metric: &str) -> Option<String> {
    let rows: Vec<&SummaryRow> = rows.iter().filter(|r| r.metric == metric).collect();
    if rows.is_empty() {
        return None;
    }
    let mut counts: Vec<usize> = rows.iter().map(|r| r.n).collect();
    counts.sort_unstable();
    counts.dedup();
    let mut structures: Vec<Structure> = Vec::new();
    for r in &rows {
        if !structures.contains(&r.structure) {
            structures.push(r.structure);
        }
    }
    let lo = rows.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| HEIGHT - MARGIN - (v - lo) / span * (HEIGHT - 2.0 * MARGIN);
    let group = (WIDTH - 2.0 * MARGIN) / counts.len() as f64;
    let bw = group / (structures.len() as f64 + 1.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#,
        W = WIDTH,
        H = HEIGHT
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, metric);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    );
    for frac in [0.0, 0.5, 1.0] {
        let v = lo + frac * span;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            y(v) + 4.0,
            fmt_float((v * 1e4).round() / 1e4)
        );
    }
    for (g, n) in counts.iter().enumerate() {
        let x0 = MARGIN + g as f64 * group;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">n={}</text>"#,
            x0 + group / 2.0,
            HEIGHT - MARGIN + 16.0,
            n
        );
        for (k, st) in structures.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.n == *n && r.structure == *st) else {
                continue;
            };
            let colour = COLOURS[k % COLOURS.len()];
            let left = x0 + (k as f64 + 0.5) * bw;
            let mid = left + bw / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{mid:.1}" y1="{:.1}" x2="{mid:.1}" y2="{:.1}" stroke="{colour}"/>"#,
                y(r.max),
                y(r.min)
            );
            let _ = writeln!(
                s,
                r#"<rect x="{left:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{colour}" fill-opacity="0.35" stroke="{colour}"/>"#,
                y(r.q3),
                bw * 0.9,
                (y(r.q1) - y(r.q3)).max(0.5)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{left:.1}" y1="{m:.1}" x2="{:.1}" y2="{m:.1}" stroke="black" stroke-width="2"/>"#,
                left + bw * 0.9,
                m = y(r.median)
            );
        }
    }
    for (k, st) in structures.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="40" fill="{}">{}</text>"#,
            MARGIN + 10.0 + k as f64 * 90.0,
            COLOURS[k % COLOURS.len()],
            st
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}
