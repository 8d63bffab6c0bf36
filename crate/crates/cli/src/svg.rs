//! Minimal deterministic SVG line and bar charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub struct Series {
    pub name: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

fn hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Widens a degenerate or empty range so single values still plot.
fn span(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        (TOP + HEIGHT - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn axes(out: &mut String, f: &Frame, xt: &[(f64, String)], yt: &[f64]) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(out, r##"<path d="M{x0:.1},{y1:.1} V{y0:.1} H{x1:.1}" fill="none" stroke="#333"/>"##);
    for &v in yt {
        let y = f.py(v);
        let _ = writeln!(out, r##"<path d="M{x0:.1},{y:.1} H{x1:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, label(v));
    }
    for (x, text) in xt {
        let _ = writeln!(out, r##"<path d="M{x:.1},{y0:.1} v5" stroke="#333"/>"##);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 18.0, escape(text));
    }
}

fn legend(out: &mut String, entries: &[(&str, [u8; 3])]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = WIDTH - RIGHT + 15.0;
        let _ = writeln!(out, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#, y - 10.0, hex(*color));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 18.0, escape(name));
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        xl = xl.min(x);
        xh = xh.max(x);
        if y.is_finite() {
            yl = yl.min(y);
            yh = yh.max(y);
        }
    }
    let f = Frame {
        x: span(xl, xh),
        y: span(yl.min(0.0), yh),
    };
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    let xt: Vec<(f64, String)> = ticks(f.x.0, f.x.1, 5).into_iter().map(|v| (f.px(v), label(v))).collect();
    axes(&mut out, &f, &xt, &ticks(f.y.0, f.y.1, 5));
    for s in series {
        let color = hex(s.color);
        let pts: Vec<(f64, f64)> = s.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| (f.px(x), f.py(y))).collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        }
        for (x, y) in &pts {
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
    }
    let entries: Vec<(&str, [u8; 3])> = series.iter().map(|s| (s.name.as_str(), s.color)).collect();
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per category, one bar per series. `None` values are skipped.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, [u8; 3], Vec<Option<f64>>)]) -> String {
    let f = Frame {
        x: (0.0, categories.len().max(1) as f64),
        y: (0.0, 1.0),
    };
    let mut out = String::new();
    header(&mut out, title, "class", y_label);
    let xt: Vec<(f64, String)> = categories.iter().enumerate().map(|(i, c)| (f.px(i as f64 + 0.5), c.clone())).collect();
    axes(&mut out, &f, &xt, &ticks(0.0, 1.0, 5));
    let group = f.px(1.0) - f.px(0.0);
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (j, (_, color, values)) in series.iter().enumerate() {
        for (i, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let x = f.px(i as f64) + group * 0.1 + bar * j as f64;
            let y = f.py(v.clamp(0.0, 1.0));
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{:.2}" fill="{}"/>"#,
                f.py(0.0) - y,
                hex(*color)
            );
        }
    }
    let entries: Vec<(&str, [u8; 3])> = series.iter().map(|(n, c, _)| (n.as_str(), *c)).collect();
    legend(&mut out, &entries);
    out.push_str("</svg>\n");
    out
}
