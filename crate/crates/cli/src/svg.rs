//! Minimal hand-written SVG documents: line charts, heatmaps, box plots.

use std::fmt::Write;

use voxflow_core::analysis::BoxStats;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = LEFT + f * pw;
        let y = TOP + ph - f * ph;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            tick(x0 + f * (x1 - x0))
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            tick(y0 + f * (y1 - y0))
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart with one polyline per named series.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xs = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let ys = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - xs.0) / (xs.1 - xs.0) * pw;
    let py = |y: f64| TOP + ph - (y - ys.0) / (ys.1 - ys.0) * ph;
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, x_label, y_label, xs, ys);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            pts.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            LEFT + 8.0,
            TOP + 16.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn color_ramp(f: f64) -> String {
    // white to dark blue
    let f = f.clamp(0.0, 1.0);
    let c = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
}

/// Heatmap of `values[row][col]`; NaN cells are drawn grey.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<f64>], vmin: f64, vmax: f64) -> String {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let nr = values.len().max(1);
    let nc = values.first().map_or(1, Vec::len).max(1);
    let (cw, ch) = (pw / nc as f64, ph / nr as f64);
    let mut out = String::new();
    header(&mut out, title);
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let fill = if v.is_finite() { color_ramp((v - vmin) / (vmax - vmin)) } else { "#bbbbbb".to_string() };
            let (x, y) = (LEFT + c as f64 * cw, TOP + r as f64 * ch);
            let _ = writeln!(out, r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{fill}"/>"#);
            if nr * nc <= 100 && v.is_finite() {
                let ink = if (v - vmin) / (vmax - vmin) > 0.6 { "white" } else { "black" };
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}" font-size="10">{v:.2}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                );
            }
        }
    }
    for (r, l) in row_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            TOP + (r as f64 + 0.5) * ch + 4.0,
            escape(l)
        );
    }
    for (c, l) in col_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + (c as f64 + 0.5) * cw,
            TOP + ph + 16.0,
            escape(l)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One box per labeled group.
pub fn box_plot(title: &str, y_label: &str, boxes: &[(String, BoxStats)]) -> String {
    let ys = range(boxes.iter().flat_map(|(_, b)| {
        [b.lower_whisker, b.upper_whisker].into_iter().chain(b.outliers.iter().copied())
    }));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let py = |y: f64| TOP + ph - (y - ys.0) / (ys.1 - ys.0) * ph;
    let slot = pw / boxes.len().max(1) as f64;
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "", y_label, (0.0, 1.0), ys);
    for (i, (label, b)) in boxes.iter().enumerate() {
        let cx = LEFT + (i as f64 + 0.5) * slot;
        let half = slot * 0.3;
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            py(b.lower_whisker),
            py(b.upper_whisker)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            py(b.q3),
            2.0 * half,
            (py(b.q1) - py(b.q3)).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            py(b.median),
            cx + half,
            py(b.median)
        );
        for &o in &b.outliers {
            let _ = writeln!(out, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="black"/>"#, py(o));
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + ph + 32.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_are_well_formed_enough() {
        let l = line_plot("t <1>", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(l.starts_with("<svg") && l.trim_end().ends_with("</svg>"));
        assert!(l.contains("t &lt;1&gt;"));
        let h = heatmap("h", &["0".into()], &["0".into(), "1".into()], &[vec![1.0, f64::NAN]], 0.0, 1.0);
        assert_eq!(h.matches("<rect").count(), 3);
        assert!(h.contains("#bbbbbb"));
        let b = BoxStats { n: 3, q1: 1.0, median: 2.0, q3: 3.0, lower_whisker: 0.5, upper_whisker: 3.5, outliers: vec![9.0] };
        assert!(box_plot("b", "v", &[("Jan".into(), b)]).contains("<circle"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(color_ramp(0.0), "#ffffff");
        assert_eq!(color_ramp(1.0), "#08306b");
    }
}
