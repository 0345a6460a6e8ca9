//! Minimal static SVG bar chart.

use std::fmt::Write;

const WIDTH_PER_BAR: f64 = 80.0;
const PLOT_HEIGHT: f64 = 240.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One bar per `(label, value)`. The value axis always includes zero.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let n = bars.len().max(1) as f64;
    let width = MARGIN_LEFT + n * WIDTH_PER_BAR + 20.0;
    let height = MARGIN_TOP + PLOT_HEIGHT + MARGIN_BOTTOM;
    let finite = bars.iter().map(|b| b.1).filter(|v| v.is_finite());
    let hi = finite.clone().fold(0.0, f64::max);
    let lo = finite.fold(0.0, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| MARGIN_TOP + (hi - v) / span * PLOT_HEIGHT;
    let zero = y_of(0.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for v in [hi, lo] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            MARGIN_LEFT - 6.0,
            y_of(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{}" stroke="black"/>"#,
        MARGIN_TOP + PLOT_HEIGHT
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN_LEFT + i as f64 * WIDTH_PER_BAR + 10.0;
        let bar_w = WIDTH_PER_BAR - 20.0;
        if value.is_finite() {
            let (top, h) = if *value >= 0.0 {
                (y_of(*value), zero - y_of(*value))
            } else {
                (zero, y_of(*value) - zero)
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{top:.1}" width="{bar_w:.1}" height="{h:.1}" fill="{}"><title>{}: {value}</title></rect>"#,
                COLORS[i % COLORS.len()],
                escape(label)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            x + bar_w / 2.0,
            MARGIN_TOP + PLOT_HEIGHT + 20.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="black"/>"#,
        width - 10.0
    );
    s.push_str("</svg>\n");
    s
}
