//! Static trajectory overlays in the ego frame: forward (+x) points up the
//! page and left (+y) points left, with a square grid labelled in meters.

use std::fmt::Write;

use cotdrive_core::domain::Point;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const GROUND_TRUTH_COLOR: &str = "#111111";

/// A polyline to draw, starting implicitly at the ego origin.
#[derive(Debug, Clone)]
pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [Point],
}

/// Smallest step from {1, 2, 5}·10^k giving at most `max_ticks` intervals.
fn tick_step(span: f64, max_ticks: f64) -> f64 {
    let raw = (span / max_ticks).max(1e-9);
    let magnitude = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * magnitude)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * magnitude)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders ground truth plus any number of predictions as an SVG document.
pub fn render_overlay(title: &str, ground_truth: &[Point], predictions: &[Series<'_>]) -> String {
    let all = std::iter::once(Point::new(0.0, 0.0))
        .chain(ground_truth.iter().copied())
        .chain(predictions.iter().flat_map(|s| s.points.iter().copied()))
        .filter(Point::is_finite);
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for p in all {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    // Square extent centred on the data, at least 10 m across.
    let span = (max_x - min_x).max(max_y - min_y).max(10.0) * 1.1;
    let step = tick_step(span, 8.0);
    let cx = (min_x + max_x) / 2.0;
    let cy = (min_y + max_y) / 2.0;
    let x_lo = ((cx - span / 2.0) / step).floor() * step;
    let y_lo = ((cy - span / 2.0) / step).floor() * step;
    let extent = ((span / step).ceil() + 1.0) * step;
    let scale = (SIZE - 2.0 * MARGIN) / extent;
    // Ego x runs up the page, ego y runs to the left.
    let sx = |y: f64| MARGIN + (y_lo + extent - y) * scale;
    let sy = |x: f64| MARGIN + (x_lo + extent - x) * scale;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{h}" viewBox="0 0 {SIZE} {h}" font-family="sans-serif" font-size="11">"#,
        h = SIZE + 20.0 * predictions.len() as f64 + 20.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#, escape(title));

    let ticks = (extent / step).round() as usize;
    for i in 0..=ticks {
        let v = i as f64 * step;
        let (gx, gy) = (x_lo + v, y_lo + v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{top:.2}" x2="{:.2}" y2="{bottom:.2}" stroke="#dddddd"/>"##,
            sx(gy),
            sx(gy),
            top = MARGIN,
            bottom = SIZE - MARGIN
        );
        let _ = writeln!(
            out,
            r##"<line x1="{left:.2}" y1="{:.2}" x2="{right:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            sy(gx),
            sy(gx),
            left = MARGIN,
            right = SIZE - MARGIN
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(gy),
            SIZE - MARGIN + 14.0,
            format_tick(gy)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            sy(gx) + 4.0,
            format_tick(gx)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">lateral y (m, left positive)</text>"#,
        SIZE / 2.0,
        SIZE - MARGIN + 30.0
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.2}" text-anchor="middle" transform="rotate(-90 12 {:.2})">forward x (m)</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );

    let polyline = |points: &[Point]| -> String {
        std::iter::once(Point::new(0.0, 0.0))
            .chain(points.iter().copied())
            .filter(Point::is_finite)
            .map(|p| format!("{:.2},{:.2}", sx(p.y), sy(p.x)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{GROUND_TRUTH_COLOR}" stroke-width="2.5" stroke-dasharray="6 3"/>"#,
        polyline(ground_truth)
    );
    for (i, series) in predictions.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            polyline(series.points),
            PALETTE[i % PALETTE.len()]
        );
    }
    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="black"/>"#, sx(0.0), sy(0.0));

    let mut ly = SIZE + 4.0;
    let legend = std::iter::once(("ground truth", GROUND_TRUTH_COLOR))
        .chain(predictions.iter().enumerate().map(|(i, s)| (s.label, PALETTE[i % PALETTE.len()])));
    for (label, color) in legend {
        let _ = writeln!(
            out,
            r#"<line x1="{MARGIN}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            MARGIN + 24.0,
            MARGIN + 30.0,
            ly + 4.0,
            escape(label)
        );
        ly += 20.0;
    }
    out.push_str("</svg>\n");
    out
}

fn format_tick(v: f64) -> String {
    let v = if v.abs() < 1e-9 { 0.0 } else { v };
    if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, dx: f64) -> Vec<Point> {
        (1..=n).map(|i| Point::new(i as f64 * dx, 0.0)).collect()
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(tick_step(11.0, 8.0), 2.0);
        assert_eq!(tick_step(40.0, 8.0), 5.0);
        assert_eq!(tick_step(70.0, 8.0), 10.0);
        assert_eq!(tick_step(3.0, 8.0), 0.5);
    }

    #[test]
    fn overlay_has_both_polylines_and_meter_labels() {
        let gt = line(6, 1.5);
        let pred = line(6, 1.4);
        let svg = render_overlay("frame <a&b>", &gt, &[Series { label: "model-x", points: &pred }]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("forward x (m)"));
        assert!(svg.contains("frame &lt;a&amp;b&gt;"));
        assert!(svg.contains(">model-x</text>"));
    }

    #[test]
    fn forward_motion_goes_up_the_page() {
        let gt = line(6, 2.0);
        let svg = render_overlay("f", &gt, &[]);
        let pts = svg.split("<polyline points=\"").nth(1).unwrap().split('"').next().unwrap();
        let ys: Vec<f64> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[1] < w[0]), "{ys:?}");
    }

    #[test]
    fn rendering_is_deterministic_and_survives_non_finite_points() {
        let gt = line(6, 1.0);
        let bad = vec![Point::new(f64::NAN, 0.0); 6];
        let a = render_overlay("f", &gt, &[Series { label: "m", points: &bad }]);
        let b = render_overlay("f", &gt, &[Series { label: "m", points: &bad }]);
        assert_eq!(a, b);
        assert!(!a.contains("NaN"));
    }
}
