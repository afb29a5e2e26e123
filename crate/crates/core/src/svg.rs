//! Minimal SVG line and bar charts for reports.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (mut x0, mut x1) = bounds(xs);
        let (mut y0, mut y1) = bounds(ys);
        if x1 <= x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, frame: &Frame) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{cx}" y="20" text-anchor="middle" font-size="14">{title}</text>
<text x="{cx}" y="{xl}" text-anchor="middle">{xlabel}</text>
<text x="14" y="{cy}" text-anchor="middle" transform="rotate(-90 14 {cy})">{ylabel}</text>
<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>
"#,
        w = WIDTH,
        h = HEIGHT,
        cx = WIDTH / 2.0,
        cy = HEIGHT / 2.0,
        xl = HEIGHT - 14.0,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        title = escape(title),
        xlabel = escape(xlabel),
        ylabel = escape(ylabel),
    );
    for i in 0..=4 {
        let fx = frame.x0 + (frame.x1 - frame.x0) * i as f64 / 4.0;
        let fy = frame.y0 + (frame.y1 - frame.y0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            frame.px(fx),
            HEIGHT - MARGIN + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            frame.py(fy) + 4.0,
            tick(fy)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{:.1e}", v)
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            y - 9.0,
            COLORS[i % COLORS.len()],
            WIDTH - MARGIN - 106.0,
            y,
            escape(l)
        );
    }
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter().copied());
    let frame = Frame::new(pts().map(|p| p.0), pts().map(|p| p.1));
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &frame);
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            path.join(" ")
        );
    }
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Overlaid histograms sharing bin `edges` (one more edge than counts).
pub fn histogram(title: &str, xlabel: &str, edges: &[f64], groups: &[(&str, &[usize])]) -> String {
    let max_count = groups
        .iter()
        .flat_map(|(_, c)| c.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1);
    let frame = Frame::new(edges.iter().copied(), [0.0, max_count as f64].into_iter());
    let mut out = String::new();
    header(&mut out, title, xlabel, "count", &frame);
    for (g, (_, counts)) in groups.iter().enumerate() {
        for (b, &c) in counts.iter().enumerate() {
            if c == 0 || b + 1 >= edges.len() {
                continue;
            }
            let x = frame.px(edges[b]);
            let w = (frame.px(edges[b + 1]) - x).max(0.5);
            let y = frame.py(c as f64);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.5"/>"#,
                x,
                y,
                w,
                HEIGHT - MARGIN - y,
                COLORS[g % COLORS.len()]
            );
        }
    }
    legend(&mut out, &groups.iter().map(|g| g.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Mean ± std per category, one colour per group.
pub fn error_bars(title: &str, xlabel: &str, ylabel: &str, groups: &[(&str, Vec<(f64, f64)>)]) -> String {
    let ys = || {
        groups
            .iter()
            .flat_map(|(_, v)| v.iter().flat_map(|&(m, s)| [m - s, m + s]))
    };
    let n = groups.iter().map(|g| g.1.len()).max().unwrap_or(1);
    let frame = Frame::new([-0.5, n as f64 - 0.5].into_iter(), ys().chain([0.0]));
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &frame);
    let width = 0.6 / groups.len().max(1) as f64;
    for (g, (_, v)) in groups.iter().enumerate() {
        let color = COLORS[g % COLORS.len()];
        for (i, &(m, s)) in v.iter().enumerate() {
            let x = frame.px(i as f64 - 0.3 + width * (g as f64 + 0.5));
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.py(m - s),
                frame.py(m + s),
                frame.py(m),
            );
        }
    }
    legend(&mut out, &groups.iter().map(|g| g.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart("t <1>", "x", "y", &[Series::new("a", vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t &lt;1&gt;"));
        assert!(!s.contains("NaN"));
        let h = histogram("h", "x", &[0.0, 0.5, 1.0], &[("a", &[1, 2])]);
        assert_eq!(h.matches("<rect").count(), 1 + 2 + 1);
        let e = error_bars("e", "layer", "IS", &[("base", vec![(1.0, 0.1), (2.0, 0.2)])]);
        assert_eq!(e.matches("<circle").count(), 2);
        // degenerate ranges still render
        let d = line_chart("d", "x", "y", &[Series::new("c", vec![(1.0, 1.0)])]);
        assert!(!d.contains("inf"));
    }
}
