//! Static SVG summaries. Output is a pure function of the data, so plots are
//! byte-stable across reruns like the CSVs they accompany.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

struct Canvas {
    body: String,
    y_min: f64,
    y_max: f64,
}

impl Canvas {
    fn new(title: &str, y_label: &str, y_min: f64, y_max: f64) -> Self {
        let (y_min, y_max) = if y_max > y_min { (y_min, y_max) } else { (y_min - 0.5, y_min + 0.5) };
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            (W - RIGHT + LEFT) / 2.0,
            escape(title)
        );
        let mut c = Self { body, y_min, y_max };
        c.axes(y_label);
        c
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        H - BOTTOM - t * (H - TOP - BOTTOM)
    }

    fn axes(&mut self, y_label: &str) {
        let (x0, x1) = (LEFT, W - RIGHT);
        for k in 0..=4 {
            let v = self.y_min + (self.y_max - self.y_min) * k as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                self.body,
                r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
                x0 - 4.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            self.body,
            r#"<line x1="{x0}" y1="{}" x2="{x1}" y2="{}" stroke="black"/><line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{}" stroke="black"/>"#,
            H - BOTTOM,
            H - BOTTOM,
            H - BOTTOM
        );
        let _ = writeln!(
            self.body,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(y_label)
        );
    }

    fn x_labels(&mut self, labels: &[String]) -> Vec<f64> {
        let n = labels.len().max(1) as f64;
        let step = (W - RIGHT - LEFT) / n;
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let x = LEFT + step * (i as f64 + 0.5);
                let _ = writeln!(
                    self.body,
                    r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    H - BOTTOM + 16.0,
                    escape(l)
                );
                x
            })
            .collect()
    }

    fn legend(&mut self, names: &[String]) {
        let _ = writeln!(self.body, r#"<g class="legend">"#);
        for (i, name) in names.iter().enumerate() {
            let y = TOP + 16.0 * i as f64;
            let x = W - RIGHT + 16.0;
            let _ = writeln!(
                self.body,
                r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                color(i),
                x + 14.0,
                y + 9.0,
                escape(name)
            );
        }
        let _ = writeln!(self.body, "</g>");
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if lo.is_finite() {
        (lo.min(0.0).min(lo), hi.max(1.0))
    } else {
        (0.0, 1.0)
    }
}

/// One polyline per series over shared x labels; `None` points are skipped.
pub fn line_chart(title: &str, y_label: &str, x: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|(_, v)| v.iter().flatten()));
    let mut c = Canvas::new(title, y_label, lo, hi);
    let xs = c.x_labels(x);
    for (i, (_, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .zip(&xs)
            .filter_map(|(v, x)| v.map(|v| format!("{x:.2},{:.2}", c.y(v))))
            .collect();
        let _ = writeln!(
            c.body,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            color(i),
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(c.body, r#"<circle cx="{px}" cy="{py}" r="3" fill="{}"/>"#, color(i));
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// Per-group strip of individual values with a min-max whisker and a median
/// tick: a violin-style view of a seed distribution.
pub fn strip_chart(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let (lo, hi) = bounds(groups.iter().flat_map(|(_, v)| v.iter()));
    let mut c = Canvas::new(title, y_label, lo, hi);
    let labels: Vec<String> = groups.iter().map(|(n, _)| n.clone()).collect();
    let xs = c.x_labels(&labels);
    for (i, ((_, values), x)) in groups.iter().zip(&xs).enumerate() {
        if values.is_empty() {
            continue;
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let med = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
        let _ = writeln!(
            c.body,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{}"/>"#,
            c.y(sorted[0]),
            c.y(sorted[k - 1]),
            color(i)
        );
        let _ = writeln!(
            c.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="3"/>"#,
            x - 12.0,
            c.y(med),
            x + 12.0,
            c.y(med),
            color(i)
        );
        for (j, v) in values.iter().enumerate() {
            let jitter = ((j % 7) as f64 - 3.0) * 3.0;
            let _ = writeln!(
                c.body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
                x + jitter,
                c.y(*v),
                color(i)
            );
        }
    }
    c.legend(&labels);
    c.finish()
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|(_, v)| v.iter().flatten()));
    let mut c = Canvas::new(title, y_label, lo, hi);
    let xs = c.x_labels(categories);
    let group_w = (W - RIGHT - LEFT) / categories.len().max(1) as f64 * 0.8;
    let bar_w = group_w / series.len().max(1) as f64;
    let base = c.y(lo.max(0.0));
    for (i, (_, values)) in series.iter().enumerate() {
        for (v, x) in values.iter().zip(&xs) {
            if let Some(v) = v {
                let left = x - group_w / 2.0 + bar_w * i as f64;
                let top = c.y(*v);
                let _ = writeln!(
                    c.body,
                    r#"<rect x="{left:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    top.min(base),
                    bar_w * 0.9,
                    (base - top).abs(),
                    color(i)
                );
            }
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// Plain text table rendered as SVG.
pub fn table(title: &str, header: &[String], rows: &[Vec<String>]) -> String {
    let col_w = 110.0;
    let row_h = 18.0;
    let width = (col_w * header.len() as f64 + 20.0).max(200.0);
    let height = 50.0 + row_h * (rows.len() + 1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    for (r, cells) in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)).enumerate() {
        let y = 44.0 + row_h * r as f64;
        let weight = if r == 0 { r#" font-weight="bold""# } else { "" };
        for (k, cell) in cells.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{y:.1}"{weight}>{}</text>"#,
                10.0 + col_w * k as f64,
                escape(cell)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
