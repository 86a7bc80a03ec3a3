use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::MeshError;

/// Parses `v` and `f` records. Polygons are fan-triangulated; texture and
/// normal references (`f 1/2/3`) are ignored, negative indices are relative.
pub fn parse_obj(text: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>), MeshError> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line_no = ln + 1;
        let err = |message: String| MeshError::Parse {
            line: line_no,
            message,
        };
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for (k, slot) in p.iter_mut().enumerate() {
                    let tok = it
                        .next()
                        .ok_or_else(|| err(format!("vertex needs 3 coordinates, got {k}")))?;
                    *slot = tok
                        .parse::<f64>()
                        .map_err(|e| err(format!("bad coordinate {tok:?}: {e}")))?;
                    if !slot.is_finite() {
                        return Err(err(format!("non-finite coordinate {tok:?}")));
                    }
                }
                verts.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let head = tok.split('/').next().unwrap_or("");
                    let raw: i64 = head
                        .parse()
                        .map_err(|e| err(format!("bad face index {tok:?}: {e}")))?;
                    let i = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        verts.len() as i64 + raw
                    } else {
                        return Err(err("face index 0 is invalid".into()));
                    };
                    if i < 0 || i as usize >= verts.len() {
                        return Err(err(format!(
                            "face index {raw} out of range ({} vertices so far)",
                            verts.len()
                        )));
                    }
                    idx.push(i as usize);
                }
                if idx.len() < 3 {
                    return Err(err(format!(
                        "face needs at least 3 vertices, got {}",
                        idx.len()
                    )));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((verts, faces))
}

pub fn read_obj(path: &Path) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>), MeshError> {
    parse_obj(&std::fs::read_to_string(path)?)
}

/// Shortest round-trip formatting, so reading the text back is lossless.
pub fn obj_to_string(positions: &[[f64; 3]], faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(positions.len() * 40 + faces.len() * 20);
    for p in positions {
        let _ = writeln!(s, "v {:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(
    w: &mut impl Write,
    positions: &[[f64; 3]],
    faces: &[[usize; 3]],
) -> std::io::Result<()> {
    w.write_all(obj_to_string(positions, faces).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quad_is_fanned() {
        let (v, f) = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n").unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(f, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn negative_indices_are_relative() {
        let (_, f) = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(f, vec![[0, 1, 2]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_obj("v 0 0 0\n\nf 1 2 9\n").unwrap_err();
        assert!(matches!(e, MeshError::Parse { line: 3, .. }), "{e}");
        let e = parse_obj("v 0 x 0\n").unwrap_err();
        assert!(e.to_string().contains("line 1"));
    }

    #[test]
    fn round_trip_is_exact() {
        let v = vec![
            [0.1, -1.0 / 3.0, 1e-17],
            [std::f64::consts::PI, 2.0, -0.0],
            [5.0e8, 1.0, 0.5],
        ];
        let f = vec![[0, 1, 2]];
        let (v2, f2) = parse_obj(&obj_to_string(&v, &f)).unwrap();
        assert_eq!(v, v2);
        assert_eq!(f, f2);
    }
}
