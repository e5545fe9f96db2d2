use std::collections::HashMap;

use super::{Mesh, MeshKind, Vec3};

/// Flat `nx x nz` vertex grid in the XZ plane, centered at the origin, with
/// one diagonal per quad. Triangles are wound so normals point along +Y.
pub fn grid_cloth(nx: usize, nz: usize, width: f64, depth: f64) -> Mesh {
    assert!(nx >= 2 && nz >= 2, "grid needs at least 2x2 vertices");
    let dx = width / (nx - 1) as f64;
    let dz = depth / (nz - 1) as f64;
    let mut vertices = Vec::with_capacity(nx * nz);
    for j in 0..nz {
        for i in 0..nx {
            vertices.push(Vec3::new(
                i as f64 * dx - 0.5 * width,
                0.0,
                j as f64 * dz - 0.5 * depth,
            ));
        }
    }
    let id = |i: usize, j: usize| j * nx + i;
    let mut triangles = Vec::with_capacity(2 * (nx - 1) * (nz - 1));
    for j in 0..nz - 1 {
        for i in 0..nx - 1 {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            triangles.push([v00, v01, v10]);
            triangles.push([v10, v01, v11]);
        }
    }
    Mesh {
        vertices,
        triangles,
        kind: MeshKind::Garment,
    }
}

/// Subdivided icosahedron projected onto a sphere, outward winding.
pub fn icosphere(subdivisions: usize, radius: f64, center: Vec3) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Mesh {
        vertices: verts.into_iter().map(|v| center + v * radius).collect(),
        triangles: faces,
        kind: MeshKind::Body,
    }
}

/// Capsule with its axis along X: an icosphere whose two halves are pushed
/// apart by `half_length` on either side of the YZ plane, centered at the
/// origin.
pub fn capsule(subdivisions: usize, radius: f64, half_length: f64) -> Mesh {
    let mut m = icosphere(subdivisions, radius, Vec3::zeros());
    for v in &mut m.vertices {
        v.x += if v.x >= 0.0 { half_length } else { -half_length };
    }
    m
}
