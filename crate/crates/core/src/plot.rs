//! Minimal deterministic SVG line charts for the sweep and communication
//! figures. Pure text output, fixed layout, no timestamps.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
}

const COLORS: [&str; 6] = ["#2a9d3f", "#e0a800", "#d03030", "#3060d0", "#803090", "#508080"];

pub fn color(i: usize) -> &'static str {
    COLORS[i % COLORS.len()]
}

fn nice_ticks(min: f64, max: f64, n: usize) -> Vec<f64> {
    if !(max > min) {
        return vec![min];
    }
    let raw = (max - min) / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    } * mag;
    let start = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut v = start;
    while v <= max + 1e-12 * step {
        ticks.push(v);
        v += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if v.abs() >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders a single-panel line chart with legend. Layout is fixed so two
/// renders of the same data are byte-identical.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (80.0, 30.0, 50.0, 60.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min: f64 = 0.0;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for (x, y) in &s.points {
            x_min = x_min.min(*x);
            x_max = x_max.max(*x);
            y_min = y_min.min(*y);
            y_max = y_max.max(*y);
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_max = 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min) * pw;
    let sy = |y: f64| mt + ph - (y - y_min) / (y_max - y_min) * ph;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = write!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="28" text-anchor="middle" font-family="sans-serif" font-size="18">{}</text>"#,
        w / 2.0,
        title
    );
    for t in nice_ticks(x_min, x_max, 8) {
        let x = sx(t);
        let _ = write!(
            svg,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            mt,
            mt + ph
        );
        let _ = write!(
            svg,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            mt + ph + 18.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y_min, y_max, 6) {
        let y = sy(t);
        let _ = write!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            ml,
            ml + pw
        );
        let _ = write!(
            svg,
            r#"<text x="{:.2}" y="{y:.2}" text-anchor="end" font-family="sans-serif" font-size="12">{}</text>"#,
            ml - 8.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        svg,
        r##"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        ml + pw / 2.0,
        h - 14.0,
        x_label
    );
    let _ = write!(
        svg,
        r#"<text x="20" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14" transform="rotate(-90 20 {})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    );

    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (i, (x, y)) in s.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(*x), sy(*y));
        }
        let _ = write!(
            svg,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            d.trim_end(),
            s.color
        );
        for (x, y) in &s.points {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                sx(*x),
                sy(*y),
                s.color
            );
        }
    }
    // Legend.
    for (i, s) in series.iter().enumerate() {
        let y = mt + 16.0 + 18.0 * i as f64;
        let _ = write!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="3"/>"#,
            ml + pw - 150.0,
            ml + pw - 120.0,
            s.color
        );
        let _ = write!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            ml + pw - 112.0,
            y + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_wellformed() {
        let series = vec![
            Series {
                label: "a".into(),
                points: vec![(0.1, 3.0), (0.5, 9.0), (0.9, 1.0)],
                color: color(0),
            },
            Series {
                label: "b".into(),
                points: vec![(0.1, 5.0), (0.9, 5.0)],
                color: color(1),
            },
        ];
        let a = line_chart("t", "x", "y", &series);
        let b = line_chart("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<path").count(), 2);
    }
}
