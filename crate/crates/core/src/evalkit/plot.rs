use std::fmt::Write as _;
use std::path::Path;

use super::PrCurve;
use crate::error::{Error, Result};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// The highlighted maximum-recall point, in curve coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotMarker {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

fn to_px(recall: f64, precision: f64) -> (f64, f64) {
    let span = SIZE - 2.0 * MARGIN;
    (MARGIN + recall * span, SIZE - MARGIN - precision * span)
}

/// Render the curve (recall on x, precision on y) as SVG with the
/// maximum-recall point marked.
pub fn emit_plot(curve: &PrCurve, path: &Path) -> Result<Option<PlotMarker>> {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, y1) = to_px(1.0, 1.0);
    let _ = writeln!(svg, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        let (gx, _) = to_px(t, 0.0);
        let (_, gy) = to_px(0.0, t);
        let _ = writeln!(svg, r##"<line x1="{gx}" y1="{y1}" x2="{gx}" y2="{y0}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{gy}" x2="{x1}" y2="{gy}" stroke="#ddd"/>"##);
        if i % 2 == 0 {
            let _ = writeln!(svg, r#"<text x="{gx}" y="{}" text-anchor="middle">{t:.1}</text>"#, y0 + 16.0);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{t:.1}</text>"#, x0 - 6.0, gy + 4.0);
        }
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, 0.5 * (x0 + x1), SIZE - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">precision</text>"#,
        0.5 * (y0 + y1),
        0.5 * (y0 + y1)
    );
    if !curve.points.is_empty() {
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| {
                let (x, y) = to_px(p.recall, p.precision);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" "));
        for p in &curve.points {
            let (x, y) = to_px(p.recall, p.precision);
            let _ = writeln!(svg, r##"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="#1f77b4"/>"##);
        }
    }
    let marker = curve.max_recall_index().map(|i| {
        let p = curve.points[i];
        PlotMarker {
            threshold: p.threshold,
            precision: p.precision,
            recall: p.recall,
        }
    });
    if let Some(m) = marker {
        let (x, y) = to_px(m.recall, m.precision);
        let _ = writeln!(
            svg,
            r##"<circle id="max-recall" cx="{x:.2}" cy="{y:.2}" r="6" fill="none" stroke="#d62728" stroke-width="2" data-recall="{}" data-precision="{}" data-threshold="{}"/>"##,
            m.recall, m.precision, m.threshold
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" fill="#d62728">R={:.2} P={:.2} @ t={:.2}</text>"##,
            (x - 120.0).max(MARGIN + 4.0),
            y - 10.0,
            m.recall,
            m.precision,
            m.threshold
        );
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    Ok(marker)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::PrPoint;

    #[test]
    fn writes_file_with_marker_at_max_recall() {
        let dir = tempfile::tempdir().unwrap();
        let curve = PrCurve {
            points: vec![
                PrPoint { threshold: 0.2, precision: 0.4, recall: 0.9 },
                PrPoint { threshold: 0.5, precision: 0.7, recall: 0.8 },
                PrPoint { threshold: 0.8, precision: 1.0, recall: 0.3 },
            ],
        };
        let p = dir.path().join("pr.svg");
        let m = emit_plot(&curve, &p).unwrap().unwrap();
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
        let i = curve.max_recall_index().unwrap();
        assert_eq!((m.recall, m.precision, m.threshold), (curve.points[i].recall, curve.points[i].precision, curve.points[i].threshold));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(r#"data-recall="0.9""#));
    }

    #[test]
    fn empty_curve_still_renders() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.svg");
        assert!(emit_plot(&PrCurve::default(), &p).unwrap().is_none());
        assert!(std::fs::metadata(&p).unwrap().len() > 0);
    }
}
