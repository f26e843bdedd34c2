//! Static SVG strips of 2-d shape sequences.
//!
//! Each frame is drawn in data coordinates under a per-frame transform, so the numbers in
//! the `d`, `cx`/`cy` and `x1`/`y1` attributes are the mesh coordinates themselves.

use std::fmt::Write as _;

use longdef::shape::format_g17;
use longdef::{Points, Shape};

pub struct Frame<'a> {
    pub shape: &'a Shape,
    pub control_points: Option<&'a Points>,
    /// One arrow per control point, drawn from the control point.
    pub arrows: Option<&'a Points>,
}

pub struct Row<'a> {
    pub label: String,
    pub frames: Vec<Frame<'a>>,
}

const PANEL: f64 = 180.0;
const PAD: f64 = 12.0;
const LABEL: f64 = 18.0;

fn bounds(rows: &[Row<'_>], arrow_scale: f64) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut add = |p: &[f64]| {
        b.0 = b.0.min(p[0]);
        b.1 = b.1.min(p[1]);
        b.2 = b.2.max(p[0]);
        b.3 = b.3.max(p[1]);
    };
    for f in rows.iter().flat_map(|r| &r.frames) {
        f.shape.vertices().iter().for_each(&mut add);
        if let Some(c) = f.control_points {
            c.iter().for_each(&mut add);
            if let Some(a) = f.arrows {
                for (p, m) in c.iter().zip(a.iter()) {
                    add(&[p[0] + arrow_scale * m[0], p[1] + arrow_scale * m[1]]);
                }
            }
        }
    }
    if !b.0.is_finite() {
        return (0.0, 0.0, 1.0, 1.0);
    }
    b
}

/// Renders rows of frames side by side. Only the first two coordinates are used.
pub fn render(rows: &[Row<'_>], arrow_scale: f64) -> String {
    let (x0, y0, x1, y1) = bounds(rows, arrow_scale);
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let s = (PANEL - 2.0 * PAD) / span;
    let ncols = rows.iter().map(|r| r.frames.len()).max().unwrap_or(0).max(1);
    let width = ncols as f64 * PANEL;
    let height = rows.len().max(1) as f64 * (PANEL + LABEL);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        out,
        r#"<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" markerHeight="6" orient="auto-start-reverse"><path d="M 0 0 L 10 5 L 0 10 z" fill="firebrick"/></marker></defs>"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (ri, row) in rows.iter().enumerate() {
        let top = ri as f64 * (PANEL + LABEL);
        let _ = writeln!(out, r#"<text x="4" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, top + 13.0, row.label);
        for (k, f) in row.frames.iter().enumerate() {
            let tx = k as f64 * PANEL + PAD;
            let ty = top + LABEL + PAD;
            let _ = writeln!(
                out,
                r#"<g class="frame" data-row="{ri}" data-frame="{k}" transform="translate({tx} {ty}) scale({s} {}) translate({} {})">"#,
                -s,
                -x0,
                -y1
            );
            let mut d = String::new();
            for cell in f.shape.cells() {
                for (j, &v) in cell.iter().enumerate() {
                    let p = f.shape.vertices().point(v);
                    let _ = write!(d, "{} {} {} ", if j == 0 { "M" } else { "L" }, format_g17(p[0]), format_g17(p[1]));
                }
                if cell.len() > 2 {
                    d.push_str("Z ");
                }
            }
            let _ = writeln!(
                out,
                r#"<path class="mesh" d="{}" fill="none" stroke="steelblue" stroke-width="2" vector-effect="non-scaling-stroke"/>"#,
                d.trim_end()
            );
            if let Some(c) = f.control_points {
                for (i, p) in c.iter().enumerate() {
                    if let Some(a) = f.arrows {
                        let m = a.point(i);
                        let _ = writeln!(
                            out,
                            r#"<line class="momentum" x1="{}" y1="{}" x2="{}" y2="{}" stroke="firebrick" stroke-width="1.5" vector-effect="non-scaling-stroke" marker-end="url(#arrow)"/>"#,
                            format_g17(p[0]),
                            format_g17(p[1]),
                            format_g17(p[0] + arrow_scale * m[0]),
                            format_g17(p[1] + arrow_scale * m[1])
                        );
                    }
                    let _ = writeln!(
                        out,
                        r#"<circle class="control-point" cx="{}" cy="{}" r="{}" fill="darkorange"/>"#,
                        format_g17(p[0]),
                        format_g17(p[1]),
                        format_g17(3.0 / s)
                    );
                }
            }
            let _ = writeln!(out, "</g>");
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Vertex coordinates of each mesh path, by row and frame, as drawn in `svg`.
pub fn mesh_paths(svg: &str) -> Vec<Vec<[f64; 2]>> {
    svg.lines()
        .filter(|l| l.starts_with(r#"<path class="mesh""#))
        .map(|l| {
            let d = l.split(r#" d=""#).nth(1).and_then(|r| r.split('"').next()).unwrap_or("");
            let nums: Vec<f64> = d.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            nums.chunks(2).map(|c| [c[0], c[1]]).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_are_written_verbatim() {
        let shape = Shape::polyline(&[[0.1, 0.2], [0.3, -0.7], [1.0 / 3.0, 2.0]]).unwrap();
        let cps = Points::new(2, vec![0.0, 0.0]).unwrap();
        let arrows = Points::new(2, vec![0.5, 0.0]).unwrap();
        let rows = [Row {
            label: "g".into(),
            frames: vec![Frame { shape: &shape, control_points: Some(&cps), arrows: Some(&arrows) }],
        }];
        let svg = render(&rows, 1.0);
        let paths = mesh_paths(&svg);
        assert_eq!(paths.len(), 1);
        let expected = [[0.1, 0.2], [0.3, -0.7], [0.3, -0.7], [1.0 / 3.0, 2.0]];
        assert_eq!(paths[0], expected);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches(r#"class="momentum""#).count(), 1);
    }
}
