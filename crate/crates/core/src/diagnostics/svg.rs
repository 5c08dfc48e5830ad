use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// 2-D scatter with one colour per group label.
pub fn scatter_svg(points: &[[f64; 2]], groups: &[String], title: &str, axes: [&str; 2]) -> String {
    let mut names: Vec<&String> = Vec::new();
    for g in groups {
        if !names.contains(&g) {
            names.push(g);
        }
    }
    let (x0, x1) = span(points.iter().map(|p| p[0]));
    let (y0, y1) = span(points.iter().map(|p| p[1]));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, W / 2.0, H - 20.0, escape(axes[0]));
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 20 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(axes[1])
    );
    for (p, g) in points.iter().zip(groups) {
        let c = PALETTE[names.iter().position(|n| *n == g).unwrap_or(0) % PALETTE.len()];
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{c}" fill-opacity="0.75"/>"#, sx(p[0]), sy(p[1]));
    }
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 16.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="5" fill="{}"/>"#, W - MARGIN - 110.0, y - 4.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="12">{}</text>"#, W - MARGIN - 100.0, escape(n));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_scatter(path: &Path, points: &[[f64; 2]], groups: &[String], title: &str, axes: [&str; 2]) -> Result<()> {
    write(path, &scatter_svg(points, groups, title, axes))
}

/// One bar per entry, coloured by `group`; values are drawn from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub group: String,
    pub value: f64,
    pub err: Option<f64>,
}

pub fn bar_chart_svg(bars: &[Bar], title: &str, y_label: &str) -> String {
    let mut groups: Vec<&str> = Vec::new();
    for b in bars {
        if !groups.contains(&b.group.as_str()) {
            groups.push(&b.group);
        }
    }
    let top = bars
        .iter()
        .map(|b| b.value + b.err.unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let plot_h = H - 2.0 * MARGIN - 40.0;
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    let base = H - MARGIN - 40.0;
    let sy = |v: f64| base - v / top * plot_h;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r##"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="#444"/>"##, W - MARGIN);
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 20 {})">{}</text>"#,
        base - plot_h / 2.0,
        base - plot_h / 2.0,
        escape(y_label)
    );
    for (i, b) in bars.iter().enumerate() {
        let c = PALETTE[groups.iter().position(|g| *g == b.group).unwrap_or(0) % PALETTE.len()];
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let y = sy(b.value.max(0.0));
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{c}"><title>{}: {:.3}</title></rect>"#,
            base - y,
            escape(&b.label),
            b.value
        );
        if let Some(e) = b.err {
            let cx = x + w / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                sy((b.value - e).max(0.0)),
                sy(b.value + e)
            );
        }
        let lx = x + w / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.2}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10" transform="rotate(-35 {lx:.2} {})">{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_bar_chart(path: &Path, bars: &[Bar], title: &str, y_label: &str) -> Result<()> {
    write(path, &bar_chart_svg(bars, title, y_label))
}
