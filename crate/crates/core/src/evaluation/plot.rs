//! Static SVG rendering of quantile curves.

use std::fmt::Write as _;

use super::QuantileCurve;

#[derive(Debug, Clone)]
pub struct PlotStyle {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: f64,
    pub height: f64,
}

impl PlotStyle {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            width: 640.0,
            height: 420.0,
        }
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders every quantile series of `curve` as a polyline, breaking the line
/// wherever a window is empty.
pub fn render_curve_svg(curve: &QuantileCurve, style: &PlotStyle) -> String {
    let (ml, mr, mt, mb) = (60.0, 110.0, 36.0, 48.0);
    let pw = style.width - ml - mr;
    let ph = style.height - mt - mb;
    let values: Vec<f64> = curve.quantiles.values().flatten().flatten().copied().collect();
    let (mut y0, mut y1) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.05;
        y1 += 0.05;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let x0 = curve.centers.first().copied().unwrap_or(0.0);
    let x1 = curve.centers.last().copied().unwrap_or(1.0).max(x0 + 1e-9);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = style.width,
        h = style.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        ml + pw / 2.0,
        escape(&style.title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=5 {
        let fx = x0 + (x1 - x0) * k as f64 / 5.0;
        let fy = y0 + (y1 - y0) * k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{x}" y1="{b}" x2="{x}" y2="{b2}" stroke="#444"/><text x="{x}" y="{t}" text-anchor="middle">{fx:.2}</text>"##,
            x = sx(fx),
            b = mt + ph,
            b2 = mt + ph + 4.0,
            t = mt + ph + 17.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{l}" y1="{y}" x2="{ml}" y2="{y}" stroke="#444"/><text x="{t}" y="{ty}" text-anchor="end">{fy:.3}</text>"##,
            l = ml - 4.0,
            y = sy(fy),
            t = ml - 6.0,
            ty = sy(fy) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        style.height - 10.0,
        escape(&style.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        mt + ph / 2.0,
        escape(&style.y_label)
    );

    let mut ordered: Vec<(f64, &String)> = curve
        .levels
        .iter()
        .map(|&p| (p, curve.quantiles.keys().find(|k| **k == super::quantile_label(p))))
        .filter_map(|(p, k)| k.map(|k| (p, k)))
        .collect();
    ordered.dedup_by(|a, b| a.1 == b.1);
    for (i, (_, label)) in ordered.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let series = &curve.quantiles[*label];
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, svg: &mut String| {
            if segment.len() > 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#,
                    segment.join(" ")
                );
            } else if let Some(p) = segment.first() {
                let (x, y) = p.split_once(',').expect("formatted point");
                let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="2" fill="{color}"/>"#);
            }
            segment.clear();
        };
        for (c, v) in curve.centers.iter().zip(series) {
            match v {
                Some(v) => segment.push(format!("{:.2},{:.2}", sx(*c), sy(*v))),
                None => flush(&mut segment, &mut svg),
            }
        }
        flush(&mut segment, &mut svg);
        let ly = mt + 14.0 + 18.0 * i as f64;
        let lx = ml + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::super::{quantile_curve, CurveConfig};
    use super::*;

    #[test]
    fn svg_has_one_series_per_level() {
        let points: Vec<(f64, f64)> = (0..60).map(|i| (i as f64 / 59.0, (i % 7) as f64 / 10.0)).collect();
        let curve = quantile_curve(&points, &CurveConfig::default()).unwrap();
        let svg = render_curve_svg(&curve, &PlotStyle::new("gap vs metric", "metric", "gap"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        for label in ["Q1", "median", "Q3", "Q90"] {
            assert!(svg.contains(&format!(">{label}</text>")));
        }
    }

    #[test]
    fn empty_curve_still_renders() {
        let curve = quantile_curve(&[], &CurveConfig::default()).unwrap();
        let svg = render_curve_svg(&curve, &PlotStyle::new("t", "x", "y"));
        assert_eq!(svg.matches("<polyline").count(), 0);
    }
}
