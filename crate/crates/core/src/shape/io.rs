//! ASCII mesh format:
//!
//! ```text
//! SHAPE <dim> <n_vertices> <n_cells>
//! <dim floats per vertex line, printed with %.17g>
//! <dim zero-based indices per cell line>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::Shape;
use crate::error::{Error, Result};
use crate::points::Points;

/// C-style `%.17g` formatting (17 significant digits, shortest of fixed/exponent form).
pub fn format_g17(v: f64) -> String {
    const PREC: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PREC - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= PREC {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (PREC - 1 - exp) as usize, v)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_shape_string(shape: &Shape) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "SHAPE {} {} {}", shape.dim(), shape.n_vertices(), shape.n_cells());
    for p in shape.vertices().iter() {
        let line: Vec<String> = p.iter().map(|&v| format_g17(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    for c in shape.cells() {
        let line: Vec<String> = c.iter().map(|i| i.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_shape(shape: &Shape, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_shape_string(shape))?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

pub fn read_shape_str(text: &str) -> Result<Shape> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "SHAPE" {
        return Err(parse_err(hl, "expected header `SHAPE <dim> <n_vertices> <n_cells>`"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(hl, format!("invalid header field `{s}`")));
    let (dim, nv, nc) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if dim != 2 && dim != 3 {
        return Err(parse_err(hl, format!("dimension must be 2 or 3, got {dim}")));
    }

    let mut coords = Vec::with_capacity(nv * dim);
    for k in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(hl, format!("missing vertex {k}")))?;
        let vals: Vec<&str> = l.split_whitespace().collect();
        if vals.len() != dim {
            return Err(parse_err(ln, format!("expected {dim} coordinates, found {}", vals.len())));
        }
        for v in vals {
            let x: f64 = v.parse().map_err(|_| parse_err(ln, format!("invalid coordinate `{v}`")))?;
            if !x.is_finite() {
                return Err(parse_err(ln, "non-finite coordinate"));
            }
            coords.push(x);
        }
    }

    let mut cells = Vec::with_capacity(nc * dim);
    for k in 0..nc {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(hl, format!("missing cell {k}")))?;
        let vals: Vec<&str> = l.split_whitespace().collect();
        if vals.len() != dim {
            return Err(parse_err(ln, format!("expected {dim} indices, found {}", vals.len())));
        }
        for v in vals {
            let i: usize = v.parse().map_err(|_| parse_err(ln, format!("invalid index `{v}`")))?;
            if i >= nv {
                return Err(parse_err(ln, format!("cell index {i} out of range for {nv} vertices")));
            }
            cells.push(i);
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln, "unexpected trailing content"));
    }
    let vertices = Points::new(dim, coords).expect("dimension checked");
    Shape::new(vertices, cells).map_err(|e| parse_err(hl, e.to_string()))
}

pub fn read_shape(path: impl AsRef<Path>) -> Result<Shape> {
    read_shape_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g17_matches_c_printf() {
        // reference strings produced by C printf("%.17g")
        let cases = [
            (0.1, "0.10000000000000001"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1e-5, "1.0000000000000001e-05"),
            (123456.789, "123456.789"),
            (1e17, "1e+17"),
            (1e16, "10000000000000000"),
            (0.0001, "0.0001"),
            (1.0 / 3.0, "0.33333333333333331"),
            (70.0, "70"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g17(v), s, "{v}");
        }
    }

    #[test]
    fn round_trip_2d_and_3d() {
        let s = Shape::polyline(&[[0.1, 0.2], [1.0 / 3.0, -7e-9], [2.0, 1e20]]).unwrap();
        let text = write_shape_string(&s);
        assert!(text.starts_with("SHAPE 2 3 2\n"));
        assert_eq!(read_shape_str(&text).unwrap(), s);

        let t = Shape::new(
            Points::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            vec![0, 1, 2, 0, 1, 3, 0, 2, 3, 1, 2, 3],
        )
        .unwrap();
        let back = read_shape_str(&write_shape_string(&t)).unwrap();
        assert_eq!(back.n_vertices(), 4);
        assert_eq!(back.n_cells(), 4);
        assert_eq!(back, t);
    }

    #[test]
    fn reports_line_of_bad_index() {
        let text = "SHAPE 2 2 1\n0 0\n1 0\n0 5\n";
        match read_shape_str(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("out of range"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_shape_str("SHAPE 2 2 1\n0 x\n1 0\n0 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_shape_str("MESH 2 2 1\n"), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn vertex_text_round_trips_bitwise(xs in proptest::collection::vec(-1e6f64..1e6, 6)) {
            let v = Points::new(2, xs.clone()).unwrap();
            let s = Shape::new(v, vec![0, 1, 1, 2]);
            prop_assume!(s.is_ok());
            let s = s.unwrap();
            let back = read_shape_str(&write_shape_string(&s)).unwrap();
            for (a, b) in back.vertices().as_slice().iter().zip(&xs) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn g17_parses_back_exactly(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            prop_assert_eq!(format_g17(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
