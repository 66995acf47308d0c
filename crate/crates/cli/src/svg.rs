//! Minimal hand-written SVG plots.

use std::fmt::Write;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// Six significant digits, trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { format!("{x}") };
    }
    let s = format!("{:.5e}", x);
    let v: f64 = s.parse().expect("formatted float parses");
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).clamp(0, 17) as usize;
    let mut out = format!("{v:.decimals$}");
    if out.contains('.') {
        while out.ends_with('0') {
            out.pop();
        }
        if out.ends_with('.') {
            out.pop();
        }
    }
    if out == "-0" {
        out = "0".into();
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = sig6(WIDTH),
        h = sig6(HEIGHT)
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        sig6(WIDTH / 2.0),
        escape(title)
    );
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Scatter plot with axes, tick labels at both ends, and axis titles.
pub fn scatter(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str) -> String {
    let (x0, x1) = span(points.iter().map(|p| p.0));
    let (y0, y1) = span(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        l = sig6(left),
        t = sig6(top),
        b = sig6(bottom),
        r = sig6(right)
    );
    for (v, x) in [(x0, left), (x1, right)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            sig6(x),
            sig6(bottom + 16.0),
            sig6(v)
        );
    }
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{}</text>"#,
            sig6(left - 4.0),
            sig6(y + 4.0),
            sig6(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        sig6(WIDTH / 2.0),
        sig6(HEIGHT - 14.0),
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = sig6(HEIGHT / 2.0)
    );
    for &(x, y) in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{}" cy="{}" r="3" fill="steelblue" fill-opacity="0.7"/>"#,
            sig6(sx(x)),
            sig6(sy(y))
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Unit disk (scaled by the curvature radius) with labeled points and
/// parent-child edges.
pub fn disk(points: &[Vec<f64>], names: &[&str], edges: &[(usize, usize)], radius: f64, title: &str) -> String {
    let r_px = (WIDTH - 2.0 * MARGIN) / 2.0;
    let (cx, cy) = (WIDTH / 2.0, HEIGHT / 2.0 + 8.0);
    let px = |p: &[f64]| (cx + p[0] / radius * r_px, cy - p[1] / radius * r_px);
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<circle cx="{}" cy="{}" r="{}" fill="none" stroke="black"/>"#,
        sig6(cx),
        sig6(cy),
        sig6(r_px)
    );
    for &(a, b) in edges {
        let (x1, y1) = px(&points[a]);
        let (x2, y2) = px(&points[b]);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray"/>"#,
            sig6(x1),
            sig6(y1),
            sig6(x2),
            sig6(y2)
        );
    }
    for (p, name) in points.iter().zip(names) {
        let (x, y) = px(p);
        let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="3" fill="firebrick"/>"#, sig6(x), sig6(y));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
            sig6(x + 4.0),
            sig6(y - 4.0),
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
