//! Minimal hand-written SVG: heatmaps and scaling plots.

use std::fmt::Write;

const W: f64 = 560.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Piecewise-linear blue-white-red ramp on `[0, 1]`.
fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let stops = [(0.0, [49.0, 54.0, 149.0]), (0.5, [247.0, 247.0, 247.0]), (1.0, [165.0, 0.0, 38.0])];
    let (a, b) = if t <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let s = (t - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|k| (a.1[k] + s * (b.1[k] - a.1[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Row-major `n×n` values, block-averaged down to at most `max_px` pixels
/// per side.
pub fn heatmap(title: &str, n: usize, values: &[f64], max_px: usize) -> String {
    assert_eq!(values.len(), n * n);
    let block = n.div_ceil(max_px.max(1));
    let m = n.div_ceil(block);
    let mut img = vec![0.0; m * m];
    let mut counts = vec![0usize; m * m];
    for i in 0..n {
        for j in 0..n {
            let k = (i / block) * m + j / block;
            img[k] += values[i * n + j];
            counts[k] += 1;
        }
    }
    for (v, c) in img.iter_mut().zip(&counts) {
        *v /= *c as f64;
    }
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let side = (H - 2.0 * MARGIN).min(W - 2.0 * MARGIN - 80.0);
    let px = side / m as f64;
    let mut s = header(title);
    for i in 0..m {
        for j in 0..m {
            let t = if span > 0.0 { (img[i * m + j] - lo) / span } else { 0.5 };
            // row 0 at the bottom so the second axis points up
            let _ = writeln!(
                s,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
                MARGIN + j as f64 * px,
                MARGIN + (m - 1 - i) as f64 * px,
                px + 0.02,
                px + 0.02,
                color(t)
            );
        }
    }
    let x0 = MARGIN + side + 20.0;
    for k in 0..20 {
        let t = 1.0 - k as f64 / 19.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x0}\" y=\"{:.3}\" width=\"16\" height=\"{:.3}\" fill=\"{}\"/>",
            MARGIN + k as f64 * side / 20.0,
            side / 20.0 + 0.5,
            color(t)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", x0 + 20.0, MARGIN + 10.0, fmt_tick(hi));
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", x0 + 20.0, MARGIN + side, fmt_tick(lo));
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
}

/// Straight line in the plotted coordinates: `y = intercept + slope·x`
/// with both sides in log space when the axis is logarithmic.
#[derive(Clone, Debug)]
pub struct Line {
    pub label: String,
    pub slope: f64,
    pub intercept: f64,
    pub dashed: bool,
    pub color: &'static str,
}

#[derive(Clone, Debug)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub lines: Vec<Line>,
}

impl Plot {
    pub fn log_log(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: true,
            log_y: true,
            series: Vec::new(),
            lines: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let tx = |v: f64| if self.log_x { v.ln() } else { v };
        let ty = |v: f64| if self.log_y { v.ln() } else { v };
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), ty(y))))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        let mut s = header(&self.title);
        if pts.is_empty() {
            s.push_str("<text x=\"50%\" y=\"50%\" text-anchor=\"middle\">no finite data</text>\n</svg>\n");
            return s;
        }
        let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        let pad = |lo: &mut f64, hi: &mut f64| {
            let w = (*hi - *lo).max(1e-12 * (1.0 + hi.abs()));
            *lo -= 0.08 * w;
            *hi += 0.08 * w;
        };
        pad(&mut x_lo, &mut x_hi);
        pad(&mut y_lo, &mut y_hi);
        let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (W - 2.0 * MARGIN);
        let py = |y: f64| H - MARGIN - (y - y_lo) / (y_hi - y_lo) * (H - 2.0 * MARGIN);
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            W - 2.0 * MARGIN,
            H - 2.0 * MARGIN
        );
        for k in 0..=4 {
            let fx = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
            let fy = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
            let lx = if self.log_x { fx.exp() } else { fx };
            let ly = if self.log_y { fy.exp() } else { fy };
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", px(fx), H - MARGIN + 16.0, fmt_tick(lx));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", MARGIN - 4.0, py(fy) + 4.0, fmt_tick(ly));
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 18.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        let mut legend_y = MARGIN + 14.0;
        for line in &self.lines {
            let (a, b) = (x_lo, x_hi);
            let dash = if line.dashed { " stroke-dasharray=\"6,4\"" } else { "" };
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\"{dash}/>",
                px(a),
                py(line.intercept + line.slope * a).clamp(0.0, H),
                px(b),
                py(line.intercept + line.slope * b).clamp(0.0, H),
                line.color
            );
            let _ = writeln!(s, "<text x=\"{}\" y=\"{legend_y:.1}\" fill=\"{}\">{}</text>", W - MARGIN - 4.0 - 190.0, line.color, escape(&line.label));
            legend_y += 14.0;
        }
        for series in &self.series {
            for &(x, y) in &series.points {
                let (x, y) = (tx(x), ty(y));
                if x.is_finite() && y.is_finite() {
                    let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{}\"/>", px(x), py(y), series.color);
                }
            }
            let _ = writeln!(s, "<text x=\"{}\" y=\"{legend_y:.1}\" fill=\"{}\">{}</text>", W - MARGIN - 4.0 - 190.0, series.color, escape(&series.label));
            legend_y += 14.0;
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Reference line of the given slope through the geometric center of the
/// points, in log-log coordinates.
pub fn reference_through(points: &[(f64, f64)], slope: f64, label: &str) -> Line {
    let n = points.len().max(1) as f64;
    let mx = points.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    Line {
        label: label.into(),
        slope,
        intercept: my - slope * mx,
        dashed: true,
        color: "#888888",
    }
}
