//! Hand-rolled SVG emission: a 2-D latent scatter with prototype rays and
//! a class-similarity heatmap. Plain string templates, no plotting
//! dependency; every coordinate is formatted with fixed precision so the
//! files are byte-stable across reruns.

// Explicit \n keeps the emitted markup's line layout visible in the
// template strings.
#![allow(clippy::write_with_newline)]

use ndarray::Array2;
use std::fmt::Write as _;

/// Discrete class palette (cycled past six classes).
pub const PALETTE: [&str; 6] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377",
];

pub fn class_color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

const CANVAS: f64 = 840.0;
const MARGIN: f64 = 60.0;

/// Scatter of 2-D latent points colored by class, with one ray from the
/// origin per prototype row. The viewBox is fixed; data coordinates are
/// mapped through a symmetric extent covering every point and ray.
pub fn repr_scatter(
    points: &Array2<f64>,
    labels: &[usize],
    rays: Option<&Array2<f64>>,
    title: &str,
) -> String {
    assert_eq!(points.ncols(), 2, "scatter needs 2-D points");
    assert_eq!(points.nrows(), labels.len());

    let mut extent: f64 = 1.0;
    for &v in points.iter() {
        if v.is_finite() {
            extent = extent.max(v.abs());
        }
    }
    extent *= 1.1;
    let half = CANVAS / 2.0;
    let scale = (half - MARGIN) / extent;
    let px = |x: f64| half + x * scale;
    let py = |y: f64| half - y * scale;

    let mut s = String::with_capacity(64 * points.nrows() + 4096);
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CANVAS} {CANVAS}\" width=\"{CANVAS}\" height=\"{CANVAS}\">\n\
         <rect width=\"{CANVAS}\" height=\"{CANVAS}\" fill=\"#ffffff\"/>\n\
         <line x1=\"{m:.1}\" y1=\"{h:.1}\" x2=\"{e:.1}\" y2=\"{h:.1}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n\
         <line x1=\"{h:.1}\" y1=\"{m:.1}\" x2=\"{h:.1}\" y2=\"{e:.1}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
        m = MARGIN,
        e = CANVAS - MARGIN,
        h = half,
    );
    let _ = write!(
        s,
        "<text x=\"{h:.1}\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"20\" fill=\"#333333\">{}</text>\n",
        xml_escape(title),
        h = half,
    );

    for (row, &label) in points.outer_iter().zip(labels.iter()) {
        let (x, y) = (row[0], row[1]);
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let _ = write!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.55\"/>\n",
            px(x),
            py(y),
            class_color(label),
        );
    }

    if let Some(rays) = rays {
        assert_eq!(rays.ncols(), 2, "rays need 2-D directions");
        for (c, row) in rays.outer_iter().enumerate() {
            let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
            if n < 1e-12 {
                continue;
            }
            // Unit direction stretched to the plot edge.
            let (dx, dy) = (row[0] / n * extent, row[1] / n * extent);
            let _ = write!(
                s,
                "<line x1=\"{h:.1}\" y1=\"{h:.1}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{}\" stroke-width=\"2.5\"/>\n",
                px(dx),
                py(dy),
                class_color(c),
                h = half,
            );
            let _ = write!(
                s,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\" fill=\"{}\">{c}</text>\n",
                px(dx * 1.04),
                py(dy * 1.04) + 5.0,
                class_color(c),
            );
        }
    }

    s.push_str("</svg>\n");
    s
}

/// C x C heatmap of a similarity matrix with per-cell numeric labels,
/// diverging blue (-1) / white (0) / red (+1).
pub fn similarity_heatmap(m: &Array2<f64>, title: &str) -> String {
    let c = m.nrows();
    assert_eq!(c, m.ncols(), "similarity matrix must be square");
    let cell = 90.0;
    let (x0, y0) = (80.0, 70.0);
    let width = x0 + cell * c as f64 + 30.0;
    let height = y0 + cell * c as f64 + 30.0;

    let mut s = String::with_capacity(256 * c * c + 2048);
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {height:.0}\" width=\"{width:.0}\" height=\"{height:.0}\">\n\
         <rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>\n"
    );
    let _ = write!(
        s,
        "<text x=\"{:.1}\" y=\"32\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"20\" fill=\"#333333\">{}</text>\n",
        width / 2.0,
        xml_escape(title),
    );

    for i in 0..c {
        // Row and column index labels.
        let _ = write!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\" fill=\"#333333\">{i}</text>\n",
            x0 + cell * (i as f64 + 0.5),
            y0 - 12.0,
        );
        let _ = write!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\" fill=\"#333333\">{i}</text>\n",
            x0 - 24.0,
            y0 + cell * (i as f64 + 0.5) + 6.0,
        );
        for j in 0..c {
            let v = m[[i, j]];
            let (fill, text) = cell_colors(v);
            let (cx, cy) = (x0 + cell * j as f64, y0 + cell * i as f64);
            let _ = write!(
                s,
                "<rect x=\"{cx:.1}\" y=\"{cy:.1}\" width=\"{cell:.0}\" height=\"{cell:.0}\" fill=\"{fill}\" stroke=\"#ffffff\" stroke-width=\"1\"/>\n",
            );
            let shown = if v.is_finite() {
                format!("{v:.3}")
            } else {
                "n/a".to_string()
            };
            let _ = write!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\" fill=\"{text}\">{shown}</text>\n",
                cx + cell / 2.0,
                cy + cell / 2.0 + 5.0,
            );
        }
    }

    s.push_str("</svg>\n");
    s
}

/// Cell fill plus a readable text color for a similarity in [-1, 1].
fn cell_colors(v: f64) -> (String, &'static str) {
    if !v.is_finite() {
        return ("#bbbbbb".to_string(), "#333333");
    }
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        let t = v;
        (255.0, 255.0 - 195.0 * t, 255.0 - 195.0 * t)
    } else {
        let t = -v;
        (255.0 - 195.0 * t, 255.0 - 115.0 * t, 255.0)
    };
    let fill = format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8);
    let text = if v.abs() > 0.6 { "#ffffff" } else { "#333333" };
    (fill, text)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
