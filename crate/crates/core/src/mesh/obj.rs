use std::fmt::Write;

use super::{Mesh, MeshError, MeshKind, Vec3};

/// Parses the `v`/`f` subset of Wavefront OBJ.
///
/// Face entries may carry `/vt/vn` suffixes, which are dropped. Polygons are
/// fan-triangulated around their first vertex. All other statements are
/// ignored.
pub fn parse_obj(text: &str, kind: MeshKind) -> Result<Mesh, MeshError> {
    let mut vertices = Vec::new();
    // indices are kept 1-based until the range check
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| MeshError::Parse {
                            line,
                            msg: format!("bad vertex coordinate `{t}`"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 {
                    return Err(MeshError::Parse {
                        line,
                        msg: "vertex needs 3 coordinates".into(),
                    });
                }
                if coords.iter().any(|c| !c.is_finite()) {
                    return Err(MeshError::Parse {
                        line,
                        msg: "non-finite vertex coordinate".into(),
                    });
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<i64>().map_err(|_| MeshError::Parse {
                            line,
                            msg: format!("bad face index `{t}`"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        msg: format!("face needs at least 3 vertices, got {}", idx.len()),
                    });
                }
                faces.push((line, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::new();
    for (line, idx) in faces {
        if let Some(bad) = idx.iter().find(|&&i| i < 1 || i > n) {
            return Err(MeshError::Validation(format!(
                "line {line}: face index {bad} out of range 1..={n}"
            )));
        }
        let z: Vec<usize> = idx.iter().map(|&i| (i - 1) as usize).collect();
        for k in 1..z.len() - 1 {
            triangles.push([z[0], z[k], z[k + 1]]);
        }
    }
    Mesh::new(vertices, triangles, kind)
}

/// Writes `v` and `f` lines; coordinates use the shortest representation
/// that parses back to the same f64.
pub fn serialize_obj(mesh: &Mesh) -> String {
    serialize_positions(&mesh.vertices, &mesh.triangles)
}

pub(crate) fn serialize_positions(vertices: &[Vec3], triangles: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + triangles.len() * 20);
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for t in triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}
