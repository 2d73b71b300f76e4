//! Standalone SVG scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const SIZE: f64 = 600.0;
const MARGIN: f64 = 0.05 * SIZE;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Renders `points` (`n × 2`) with one color per distinct group label, in
/// order of first appearance. Colors repeat after eight groups.
pub fn svg_scatter(points: &Matrix, groups: &[String], title: &str) -> Result<String> {
    if points.cols() != 2 {
        return Err(Error::Dimension(format!(
            "scatter needs 2 columns, got {}",
            points.cols()
        )));
    }
    if points.rows() == 0 {
        return Err(Error::InvalidInput(
            "scatter needs at least one point".into(),
        ));
    }
    if groups.len() != points.rows() {
        return Err(Error::Dimension(format!(
            "{} group labels for {} points",
            groups.len(),
            points.rows()
        )));
    }
    let mut names: Vec<&str> = Vec::new();
    for g in groups {
        if !names.contains(&g.as_str()) {
            names.push(g);
        }
    }
    let range = |col: usize| {
        let v = points.col(col);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let span = SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * span;
    let sy = |y: f64| SIZE - MARGIN - (y - y0) / (y1 - y0) * span;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="600" height="600" viewBox="0 0 600 600">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, xml_escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="600" height="600" fill="white"/>"#
    );
    for (row, g) in points.row_iter().zip(groups) {
        let k = names.iter().position(|n| n == g).expect("registered group");
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
            sx(row[0]),
            sy(row[1]),
            PALETTE[k % PALETTE.len()]
        );
    }
    let _ = writeln!(out, r#"<g font-family="sans-serif" font-size="12">"#);
    for (k, name) in names.iter().enumerate() {
        let y = 20.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.0}" y="{:.0}" width="10" height="10" fill="{}"/><text x="{:.0}" y="{:.0}">{}</text>"#,
            SIZE - 140.0,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            SIZE - 125.0,
            y,
            xml_escape(name)
        );
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

pub fn emit_svg_scatter(
    points: &Matrix,
    groups: &[String],
    title: &str,
    path: &Path,
) -> Result<()> {
    let svg = svg_scatter(points, groups, title)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
