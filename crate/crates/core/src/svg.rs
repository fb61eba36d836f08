// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG writer for report charts. Output is deterministic: numbers
//! are printed with fixed precision and elements keep insertion order.

use std::fmt::Write as _;

pub const SCHEMA_COMMENT: &str = "factlab.svg/1";

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '-' if out.ends_with('-') => out.push_str("&#45;"),
            c => out.push(c),
        }
    }
    out
}

/// `#rrggbb` for an RGB triple.
pub fn hex(rgb: (u8, u8, u8)) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb.0, rgb.1, rgb.2)
}

/// Categorical palette for chart series.
pub const PALETTE: [&str; 6] = ["#2166ac", "#b2182b", "#4d4d4d", "#1b7837", "#762a83", "#e08214"];

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Svg {
            width,
            height,
            body: String::new(),
        }
    }

    /// Embed a data comment; `--` sequences are escaped.
    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.body, "<!-- {} -->", escape(text));
        self
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) -> &mut Self {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
        self
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) -> &mut Self {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"/>"#
        );
        self
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) -> &mut Self {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size:.1}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            escape(s)
        );
        self
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str, dashed: bool) -> &mut Self {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"{dash}/>"#,
            pts.join(" ")
        );
        for (x, y) in points {
            let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{stroke}"/>"#);
        }
        self
    }

    pub fn finish(&self) -> String {
        format!(
            "<!-- schema: {SCHEMA_COMMENT} -->\n\
             <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

/// One named series for [`line_chart`].
pub struct Series<'a> {
    pub name: &'a str,
    pub ys: &'a [f64],
    pub dashed: bool,
}

/// Line chart over integer x positions `0..n` with a y range of `[0, 1]`
/// unless `y_range` is given. Data values are embedded as comments.
pub fn line_chart(title: &str, x_label: &str, x_ticks: &[String], series: &[Series<'_>], y_range: Option<(f64, f64)>) -> String {
    let (w, h) = (520.0, 340.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let (y0, y1) = y_range.unwrap_or((0.0, 1.0));
    let span = if y1 > y0 { y1 - y0 } else { 1.0 };
    let n = x_ticks.len().max(1);
    let xp = |i: usize| left + if n == 1 { pw / 2.0 } else { pw * i as f64 / (n - 1) as f64 };
    let yp = |v: f64| top + ph * (1.0 - ((v - y0) / span).clamp(0.0, 1.0));

    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0 - right / 2.0, 22.0, 14.0, "middle", title);
    for s in series {
        let vals: Vec<String> = s.ys.iter().map(|v| format!("{v:.6}")).collect();
        svg.comment(&format!("series {}: {}", s.name, vals.join(",")));
    }
    svg.line(left, top + ph, left + pw, top + ph, "#000000");
    svg.line(left, top, left, top + ph, "#000000");
    for k in 0..=4 {
        let v = y0 + span * k as f64 / 4.0;
        svg.line(left - 4.0, yp(v), left, yp(v), "#000000");
        svg.text(left - 7.0, yp(v) + 4.0, 10.0, "end", &format!("{v:.2}"));
    }
    for (i, t) in x_ticks.iter().enumerate() {
        svg.text(xp(i), top + ph + 16.0, 10.0, "middle", t);
    }
    svg.text(left + pw / 2.0, h - 12.0, 11.0, "middle", x_label);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s.ys.iter().enumerate().map(|(i, &v)| (xp(i), yp(v))).collect();
        svg.polyline(&pts, color, s.dashed);
        let ly = top + 14.0 + 18.0 * k as f64;
        svg.line(left + pw + 12.0, ly - 4.0, left + pw + 32.0, ly - 4.0, color);
        svg.text(left + pw + 36.0, ly, 10.0, "start", s.name);
    }
    svg.finish()
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(title: &str, labels: &[String], series: &[(&str, Vec<f64>)], y_max: f64) -> String {
    let (w, h) = (560.0, 340.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0 - right / 2.0, 22.0, 14.0, "middle", title);
    for (name, ys) in series {
        let vals: Vec<String> = ys.iter().map(|v| format!("{v:.6}")).collect();
        svg.comment(&format!("series {name}: {}", vals.join(",")));
    }
    svg.line(left, top + ph, left + pw, top + ph, "#000000");
    svg.line(left, top, left, top + ph, "#000000");
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = top + ph * (1.0 - v / y_max);
        svg.text(left - 7.0, y + 4.0, 10.0, "end", &format!("{v:.2}"));
    }
    let groups = labels.len().max(1) as f64;
    let gw = pw / groups;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (g, label) in labels.iter().enumerate() {
        let gx = left + gw * g as f64 + gw * 0.1;
        for (k, (_, ys)) in series.iter().enumerate() {
            let v = ys.get(g).copied().unwrap_or(0.0).clamp(0.0, y_max);
            let bh = ph * v / y_max;
            svg.rect(gx + bw * k as f64, top + ph - bh, bw, bh, PALETTE[k % PALETTE.len()]);
        }
        svg.text(gx + gw * 0.4, top + ph + 16.0, 10.0, "middle", label);
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let ly = top + 14.0 + 18.0 * k as f64;
        svg.rect(left + pw + 12.0, ly - 9.0, 12.0, 10.0, PALETTE[k % PALETTE.len()]);
        svg.text(left + pw + 30.0, ly, 10.0, "start", name);
    }
    svg.finish()
}

/// Extract the numbers embedded by the chart functions for `series`.
pub fn embedded_series(svg: &str, series: &str) -> Option<Vec<f64>> {
    let tag = format!("<!-- series {}: ", escape(series));
    let start = svg.find(&tag)? + tag.len();
    let end = start + svg[start..].find(" -->")?;
    let body = &svg[start..end];
    if body.is_empty() {
        return Some(Vec::new());
    }
    body.split(',').map(|v| v.parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_cannot_close_early() {
        let mut s = Svg::new(10.0, 10.0);
        s.comment("a -- b --> c");
        assert!(!s.finish().contains("a -- b"));
    }

    #[test]
    fn chart_embeds_its_data() {
        let ys = [0.1, 0.25, 0.5];
        let ticks: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let svg = line_chart(
            "t",
            "bin",
            &ticks,
            &[Series {
                name: "memorized",
                ys: &ys,
                dashed: false,
            }],
            None,
        );
        assert_eq!(embedded_series(&svg, "memorized").unwrap(), ys.to_vec());
        assert_eq!(svg, line_chart("t", "bin", &ticks, &[Series { name: "memorized", ys: &ys, dashed: false }], None));
    }
}
