//! Minimal scatter-plot SVG emission.

use std::fmt::Write;

use ndarray::ArrayView2;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 30.0;

/// Real points in grey, generated points in blue, first two coordinates.
pub fn scatter_svg<'a>(real: ArrayView2<'a, f64>, generated: ArrayView2<'a, f64>, title: &str) -> String {
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for row in real.rows().into_iter().chain(generated.rows()) {
        if row[0].is_finite() && row[1].is_finite() {
            lo_x = lo_x.min(row[0]);
            hi_x = hi_x.max(row[0]);
            lo_y = lo_y.min(row[1]);
            hi_y = hi_y.max(row[1]);
        }
    }
    if !lo_x.is_finite() {
        (lo_x, hi_x, lo_y, hi_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let inner = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - lo_x) / span * inner;
    let py = |y: f64| SIZE - MARGIN - (y - lo_y) / span * inner;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="14">{}</text>"#,
        MARGIN - 10.0,
        escape(title)
    );
    for (points, class, colour) in [(real, "real", "#999999"), (generated, "generated", "#1f5fbf")] {
        let _ = writeln!(s, r#"<g class="{class}" fill="{colour}" fill-opacity="0.5">"#);
        for row in points.rows() {
            if row[0].is_finite() && row[1].is_finite() {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, px(row[0]), py(row[1]));
            }
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
