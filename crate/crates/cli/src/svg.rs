//! Minimal SVG line plots and heatmaps.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 90.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
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

fn header(out: &mut String, title: &str, extra: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}"{extra}>"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(out, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#);
    let text = |out: &mut String, x: f64, y: f64, anchor: &str, s: &str| {
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#,
            escape(s)
        );
    };
    text(out, x0, y0 + 16.0, "middle", &format!("{:.3}", frame.x.0));
    text(out, x1, y0 + 16.0, "middle", &format!("{:.3}", frame.x.1));
    text(out, x0 - 6.0, y0, "end", &format!("{:.3}", frame.y.0));
    text(out, x0 - 6.0, y1 + 4.0, "end", &format!("{:.3}", frame.y.1));
    text(out, (x0 + x1) / 2.0, HEIGHT - 12.0, "middle", x_label);
    let _ = writeln!(
        out,
        r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn points(frame: &Frame, x: &[f64], y: &[f64]) -> String {
    x.iter().zip(y).map(|(&a, &b)| format!("{:.2},{:.2}", frame.px(a), frame.py(b))).collect::<Vec<_>>().join(" ")
}

/// Estimate with a shaded band and the band's bounds: three polylines.
pub fn line_plot(title: &str, x_label: &str, x: &[f64], estimate: &[f64], lower: &[f64], upper: &[f64]) -> String {
    let frame = Frame {
        x: range(x.iter().copied()),
        y: range(estimate.iter().chain(lower).chain(upper).copied()),
    };
    let mut out = String::new();
    header(&mut out, title, "");
    let band: Vec<String> = x
        .iter()
        .zip(upper)
        .map(|(&a, &b)| format!("{:.2},{:.2}", frame.px(a), frame.py(b)))
        .chain(x.iter().zip(lower).rev().map(|(&a, &b)| format!("{:.2},{:.2}", frame.px(a), frame.py(b))))
        .collect();
    let _ = writeln!(out, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.4" stroke="none"/>"##, band.join(" "));
    for (series, style) in [
        (lower, r##"stroke="#3182bd" stroke-dasharray="4 3""##),
        (upper, r##"stroke="#3182bd" stroke-dasharray="4 3""##),
        (estimate, r##"stroke="#08306b" stroke-width="2""##),
    ] {
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, points(&frame, x, series));
    }
    axes(&mut out, &frame, x_label, "estimate");
    out.push_str("</svg>\n");
    out
}

/// Piecewise-linear approximation of the viridis map on [0, 1].
fn color(u: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] =
        [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let h = u * (STOPS.len() - 1) as f64;
    let k = (h.floor() as usize).min(STOPS.len() - 2);
    let w = h - k as f64;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    let mix = |p: f64, q: f64| (p + w * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// `values[r][c]` drawn at row coordinate `y[r]` and column coordinate `x[c]`.
///
/// The color scale spans exactly the data minimum and maximum, which are
/// also recorded as `data-min` / `data-max` on the root element.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, x: &[f64], y: &[f64], values: &[Vec<f64>]) -> String {
    let (lo, hi) = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let frame = Frame { x: range(x.iter().copied()), y: range(y.iter().copied()) };
    let mut out = String::new();
    header(&mut out, title, &format!(r#" data-min="{lo}" data-max="{hi}""#));
    let (nx, ny) = (x.len(), y.len());
    let cell_w = (WIDTH - LEFT - RIGHT) / nx as f64;
    let cell_h = (HEIGHT - TOP - BOTTOM) / ny as f64;
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                LEFT + c as f64 * cell_w,
                HEIGHT - BOTTOM - (r + 1) as f64 * cell_h,
                cell_w + 0.3,
                cell_h + 0.3,
                color(u)
            );
        }
    }
    // legend
    let lx = WIDTH - RIGHT + 20.0;
    let steps = 32;
    let h = (HEIGHT - TOP - BOTTOM) / steps as f64;
    for k in 0..steps {
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{:.2}" width="16" height="{:.2}" fill="{}"/>"#,
            HEIGHT - BOTTOM - (k + 1) as f64 * h,
            h + 0.3,
            color((k as f64 + 0.5) / steps as f64)
        );
    }
    for (v, yy) in [(lo, HEIGHT - BOTTOM), (hi, TOP + 8.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{yy:.1}" font-family="sans-serif" font-size="10">{v:.3}</text>"#,
            lx + 20.0
        );
    }
    axes(&mut out, &frame, x_label, y_label);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_has_three_polylines() {
        let x = [0.0, 0.5, 1.0];
        let svg = line_plot("f", "t", &x, &[1.0, 2.0, 1.5], &[0.5, 1.5, 1.0], &[1.5, 2.5, 2.0]);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn heatmap_scale_spans_the_data() {
        let values = vec![vec![-1.25, 0.0], vec![3.5, 2.0]];
        let svg = heatmap("b", "t", "s", &[0.0, 1.0], &[0.0, 1.0], &values);
        assert!(svg.contains(r#"data-min="-1.25" data-max="3.5""#));
        assert!(svg.contains(&format!(r#"fill="{}""#, color(0.0))));
        assert!(svg.contains(&format!(r#"fill="{}""#, color(1.0))));
        assert_eq!(svg.matches("<rect").count(), 1 + 4 + 32);
    }

    #[test]
    fn labels_are_escaped() {
        let svg = line_plot("a<b & c", "t", &[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]);
        assert!(svg.contains("a&lt;b &amp; c"));
    }
}
