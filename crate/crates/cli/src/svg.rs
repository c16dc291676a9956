//! Minimal self-contained SVG figures.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 170.0;
const MARGIN: f64 = 36.0;

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// An SVG document being built.
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64, title: &str) -> Self {
        let mut s = Self { width, height, body: String::new() };
        s.text(width / 2.0, 18.0, title, 14.0, "middle");
        s
    }

    pub fn text(&mut self, x: f64, y: f64, t: &str, size: f64, anchor: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            escape(t)
        );
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke.map(|c| format!(r#" stroke="{c}""#)).unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"{stroke}/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dash: bool) {
        let dash = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"{dash}/>"#
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, opacity: f64) {
        let mut p = String::new();
        for (x, y) in pts {
            let _ = write!(p, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
            p.trim_end()
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 1e-3;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Maps data coordinates into one panel of a grid.
#[derive(Clone, Copy)]
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn at(col: usize, row: usize, xr: (f64, f64), yr: (f64, f64)) -> Self {
        Self {
            x0: MARGIN + col as f64 * (PANEL_W + MARGIN),
            y0: 30.0 + MARGIN * 0.5 + row as f64 * (PANEL_H + MARGIN),
            w: PANEL_W,
            h: PANEL_H,
            xr,
            yr,
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.x0 + (v - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h - (v - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn draw_axes(&self, svg: &mut Svg, label: &str) {
        svg.rect(self.x0, self.y0, self.w, self.h, "none", Some("#444"));
        svg.text(self.x0 + self.w / 2.0, self.y0 - 4.0, label, 11.0, "middle");
        svg.text(self.x0 - 3.0, self.y0 + 9.0, &format!("{:.3}", self.yr.1), 8.0, "end");
        svg.text(self.x0 - 3.0, self.y0 + self.h, &format!("{:.3}", self.yr.0), 8.0, "end");
        svg.text(self.x0, self.y0 + self.h + 10.0, &format!("{:.3}", self.xr.0), 8.0, "start");
        svg.text(self.x0 + self.w, self.y0 + self.h + 10.0, &format!("{:.3}", self.xr.1), 8.0, "end");
    }
}

fn grid_size(n: usize, cols: usize) -> (usize, usize, f64, f64) {
    let cols = cols.min(n).max(1);
    let rows = n.div_ceil(cols).max(1);
    let w = MARGIN + cols as f64 * (PANEL_W + MARGIN);
    let h = 30.0 + MARGIN * 0.5 + rows as f64 * (PANEL_H + MARGIN);
    (cols, rows, w, h)
}

/// One panel per series group; each inner vector is drawn as one line
/// against its index (or against `x` when given).
pub fn line_panels(title: &str, panels: &[(String, Vec<Vec<f64>>)], x: Option<&[f64]>) -> String {
    let (cols, _, w, h) = grid_size(panels.len(), 3);
    let mut svg = Svg::new(w, h, title);
    for (p, (name, series)) in panels.iter().enumerate() {
        let n = series.iter().map(Vec::len).max().unwrap_or(1);
        let xr = match x {
            Some(x) => range(x.iter().copied()),
            None => (0.0, (n.max(2) - 1) as f64),
        };
        let yr = range(series.iter().flatten().copied());
        let f = Frame::at(p % cols, p / cols, xr, yr);
        f.draw_axes(&mut svg, name);
        for (c, s) in series.iter().enumerate() {
            let stride = (s.len() / 400).max(1);
            let pts: Vec<(f64, f64)> = s
                .iter()
                .enumerate()
                .step_by(stride)
                .map(|(i, v)| (f.x(x.map_or(i as f64, |x| x[i])), f.y(*v)))
                .collect();
            svg.polyline(&pts, color(c), 1.0, 0.8);
        }
    }
    svg.finish()
}

/// Overlays: per panel, named lines against a shared x axis.
pub fn overlay_panels(title: &str, x: &[f64], panels: &[(String, Vec<(String, Vec<f64>)>)]) -> String {
    let (cols, _, w, h) = grid_size(panels.len(), 3);
    let mut svg = Svg::new(w, h + 14.0, title);
    let xr = range(x.iter().copied());
    for (p, (name, lines)) in panels.iter().enumerate() {
        let yr = range(lines.iter().flat_map(|(_, v)| v.iter().copied()));
        let f = Frame::at(p % cols, p / cols, xr, yr);
        f.draw_axes(&mut svg, name);
        for (c, (_, v)) in lines.iter().enumerate() {
            let pts: Vec<(f64, f64)> = x.iter().zip(v).map(|(a, b)| (f.x(*a), f.y(*b))).collect();
            svg.polyline(&pts, color(c), 1.5, 0.9);
        }
    }
    if let Some((_, lines)) = panels.first() {
        for (c, (label, _)) in lines.iter().enumerate() {
            let lx = MARGIN + c as f64 * 120.0;
            svg.rect(lx, h - 4.0, 10.0, 10.0, color(c), None);
            svg.text(lx + 14.0, h + 5.0, label, 10.0, "start");
        }
    }
    svg.finish()
}

/// Equal-width histogram counts over `[lo, hi]`.
pub fn histogram(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let (lo, hi) = range(values.iter().copied());
    let mut counts = vec![0; bins.max(1)];
    for v in values.iter().filter(|v| v.is_finite()) {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    (lo, hi, counts)
}

pub fn histogram_panels(title: &str, panels: &[(String, Vec<f64>)], bins: usize) -> String {
    let (cols, _, w, h) = grid_size(panels.len(), 3);
    let mut svg = Svg::new(w, h, title);
    for (p, (name, values)) in panels.iter().enumerate() {
        let (lo, hi, counts) = histogram(values, bins);
        let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let f = Frame::at(p % cols, p / cols, (lo, hi), (0.0, top));
        f.draw_axes(&mut svg, name);
        let bw = (hi - lo) / bins as f64;
        for (b, c) in counts.iter().enumerate() {
            let (xa, xb) = (f.x(lo + b as f64 * bw), f.x(lo + (b + 1) as f64 * bw));
            let y = f.y(*c as f64);
            svg.rect(xa, y, (xb - xa).max(0.5), f.y0 + f.h - y, color(0), Some("white"));
        }
    }
    svg.finish()
}

/// Lower-triangle scatter plots with histograms on the diagonal.
pub fn scatter_grid(title: &str, names: &[String], columns: &[Vec<f64>]) -> String {
    let n = names.len();
    let cell = 150.0;
    let size = MARGIN + n as f64 * cell;
    let mut svg = Svg::new(size, size + 20.0, title);
    let ranges: Vec<(f64, f64)> = columns.iter().map(|c| range(c.iter().copied())).collect();
    let len = columns.first().map_or(0, Vec::len);
    let stride = (len / 500).max(1);
    for i in 0..n {
        for j in 0..=i {
            let f = Frame {
                x0: MARGIN + j as f64 * cell,
                y0: 30.0 + i as f64 * cell,
                w: cell - 10.0,
                h: cell - 10.0,
                xr: ranges[j],
                yr: ranges[i],
            };
            svg.rect(f.x0, f.y0, f.w, f.h, "none", Some("#999"));
            if i == j {
                let (lo, hi, counts) = histogram(&columns[i], 20);
                let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
                let bw = (hi - lo) / 20.0;
                let hf = Frame { yr: (0.0, top), ..f };
                for (b, c) in counts.iter().enumerate() {
                    let (xa, xb) = (hf.x(lo + b as f64 * bw), hf.x(lo + (b + 1) as f64 * bw));
                    let y = hf.y(*c as f64);
                    svg.rect(xa, y, (xb - xa).max(0.5), hf.y0 + hf.h - y, color(0), None);
                }
                svg.text(f.x0 + f.w / 2.0, f.y0 - 2.0, &names[i], 10.0, "middle");
            } else {
                for k in (0..len).step_by(stride) {
                    svg.circle(f.x(columns[j][k]), f.y(columns[i][k]), 1.2, color(0), 0.4);
                }
            }
        }
    }
    svg.finish()
}

/// Colored matrix; blue negative, red positive, scaled by the largest
/// absolute entry.
pub fn heatmap(title: &str, rows: &[Vec<f64>]) -> String {
    let k = rows.len().max(1);
    let cell = (600.0 / k as f64).clamp(1.0, 20.0);
    let size = 2.0 * MARGIN + k as f64 * cell;
    let mut svg = Svg::new(size, size + 20.0, title);
    let scale = rows.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            let t = (v / scale).clamp(-1.0, 1.0);
            let fade = (255.0 * (1.0 - t.abs())).round() as u8;
            let fill = if t >= 0.0 { format!("#ff{fade:02x}{fade:02x}") } else { format!("#{fade:02x}{fade:02x}ff") };
            svg.rect(MARGIN + j as f64 * cell, 30.0 + i as f64 * cell, cell, cell, &fill, None);
        }
    }
    svg.text(MARGIN, size + 14.0, &format!("max |value| = {scale:.4e}"), 10.0, "start");
    svg.finish()
}

/// Box summaries `(label, [q05, median, q95, mean])` grouped per category.
pub fn interval_chart(title: &str, groups: &[(String, Vec<(String, [f64; 4])>)]) -> String {
    let n_items: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let w = 2.0 * MARGIN + (n_items + groups.len()).max(1) as f64 * 50.0;
    let h = 320.0;
    let mut svg = Svg::new(w, h, title);
    let yr = range(groups.iter().flat_map(|(_, g)| g.iter().flat_map(|(_, q)| q.iter().copied())).chain([0.0]));
    let f = Frame { x0: MARGIN + 20.0, y0: 40.0, w: w - 2.0 * MARGIN - 20.0, h: 220.0, xr: (0.0, 1.0), yr };
    f.draw_axes(&mut svg, "");
    svg.line(f.x0, f.y(0.0), f.x0 + f.w, f.y(0.0), "#888", true);
    let mut slot = 0.5;
    let total = (n_items + groups.len()).max(1) as f64;
    for (g, (name, items)) in groups.iter().enumerate() {
        let start = slot;
        for (c, (label, q)) in items.iter().enumerate() {
            let x = f.x0 + slot / total * f.w;
            svg.line(x, f.y(q[0]), x, f.y(q[2]), color(c), false);
            svg.rect(x - 8.0, f.y(q[1]) - 1.5, 16.0, 3.0, color(c), None);
            svg.circle(x, f.y(q[3]), 3.0, color(c), 1.0);
            if g == 0 {
                svg.text(MARGIN + c as f64 * 110.0 + 14.0, h - 12.0, label, 10.0, "start");
                svg.rect(MARGIN + c as f64 * 110.0, h - 21.0, 10.0, 10.0, color(c), None);
            }
            slot += 1.0;
        }
        let mid = f.x0 + (start + slot - 1.0) / 2.0 / total * f.w;
        svg.text(mid, f.y0 + f.h + 14.0, name, 10.0, "middle");
        slot += 1.0;
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (lo, hi, c) = histogram(&v, 10);
        assert_eq!((lo, hi), (0.0, 99.0));
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert_eq!(c[9], 10);
    }

    #[test]
    fn titles_are_escaped() {
        let s = line_panels("a<b & c", &[("x\"y".into(), vec![vec![1.0, 2.0]])], None);
        assert!(s.contains("a&lt;b &amp; c") && s.contains("x&quot;y"));
    }

    #[test]
    fn constant_series_do_not_produce_nan() {
        let s = line_panels("t", &[("c".into(), vec![vec![2.0; 10]])], None);
        assert!(!s.contains("NaN"));
        let s = heatmap("h", &vec![vec![0.0; 3]; 3]);
        assert!(!s.contains("NaN"));
    }
}
