use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{triangle_normal, Mesh, MeshError, Vec3};

/// The two triangles sharing an interior edge, as the edge endpoints and the
/// vertex opposite the edge in each triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DihedralPair {
    pub edge: [usize; 2],
    pub opposite: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// Unordered edges stored as `[lo, hi]`, sorted lexicographically.
    pub edges: Vec<[usize; 2]>,
    /// Sorted neighbor list per vertex.
    pub adjacency: Vec<Vec<usize>>,
    pub dihedral_pairs: Vec<DihedralPair>,
    /// Edges shared by more than two triangles; they get no bending term.
    pub non_manifold_edges: usize,
    pub boundary_edges: usize,
}

pub fn build_topology(mesh: &Mesh) -> Topology {
    let mut incident: BTreeMap<[usize; 2], Vec<usize>> = BTreeMap::new();
    for tri in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let c = tri[(k + 2) % 3];
            if a == b {
                continue;
            }
            incident.entry([a.min(b), a.max(b)]).or_default().push(c);
        }
    }
    let mut adjacency = vec![Vec::new(); mesh.vertices.len()];
    let mut edges = Vec::with_capacity(incident.len());
    let mut dihedral_pairs = Vec::new();
    let (mut non_manifold_edges, mut boundary_edges) = (0, 0);
    for (edge, opp) in incident {
        edges.push(edge);
        adjacency[edge[0]].push(edge[1]);
        adjacency[edge[1]].push(edge[0]);
        match opp.len() {
            1 => boundary_edges += 1,
            2 => dihedral_pairs.push(DihedralPair {
                edge,
                opposite: [opp[0], opp[1]],
            }),
            _ => non_manifold_edges += 1,
        }
    }
    for nbrs in &mut adjacency {
        nbrs.sort_unstable();
    }
    Topology {
        edges,
        adjacency,
        dihedral_pairs,
        non_manifold_edges,
        boundary_edges,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestState {
    /// Meters, aligned with `Topology::edges`.
    pub edge_rest_lengths: Vec<f64>,
    /// Kilograms per vertex (one-third lumping of incident triangle area).
    pub vertex_masses: Vec<f64>,
    /// Radians in `[0, 2pi)`, aligned with `Topology::dihedral_pairs`.
    pub rest_dihedral_angles: Vec<f64>,
    pub total_area: f64,
    pub density: f64,
}

impl RestState {
    pub fn total_mass(&self) -> f64 {
        self.vertex_masses.iter().sum()
    }
}

/// Dihedral angle at edge `a-b` between the triangles `(a, b, c)` and
/// `(a, b, d)`: `pi` when flat, measured through the edge. `None` when either
/// triangle is degenerate.
pub fn dihedral_angle(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> Option<f64> {
    let u = b - a;
    let n1 = u.cross(&(c - a));
    let n2 = (d - a).cross(&u);
    let scale = u.norm_squared();
    if n1.norm() <= 1e-14 * scale || n2.norm() <= 1e-14 * scale || scale == 0.0 {
        return None;
    }
    let s = n1.cross(&n2).dot(&u) / u.norm();
    let c = n1.dot(&n2);
    let theta = PI - s.atan2(c);
    Some(if theta >= 2.0 * PI { theta - 2.0 * PI } else { theta })
}

pub fn compute_rest_quantities(mesh: &Mesh, topo: &Topology, density: f64) -> Result<RestState, MeshError> {
    if density.is_nan() || density <= 0.0 {
        return Err(MeshError::Validation(format!("density must be > 0, got {density}")));
    }
    let p = &mesh.vertices;
    let mut vertex_masses = vec![0.0; p.len()];
    let mut total_area = 0.0;
    for (t, &tri) in mesh.triangles.iter().enumerate() {
        let area = 0.5 * triangle_normal(p, tri).norm();
        let longest = (0..3)
            .map(|k| (p[tri[k]] - p[tri[(k + 1) % 3]]).norm_squared())
            .fold(0.0, f64::max);
        if area <= 1e-12 * longest || area == 0.0 {
            return Err(MeshError::Validation(format!(
                "triangle {t} ({}, {}, {}) has zero area at rest",
                tri[0] + 1,
                tri[1] + 1,
                tri[2] + 1
            )));
        }
        total_area += area;
        for &v in &tri {
            vertex_masses[v] += density * area / 3.0;
        }
    }
    if let Some(v) = vertex_masses.iter().position(|&m| m <= 0.0) {
        return Err(MeshError::Validation(format!(
            "vertex {} belongs to no triangle",
            v + 1
        )));
    }
    let edge_rest_lengths = topo.edges.iter().map(|&[i, j]| (p[i] - p[j]).norm()).collect();
    let rest_dihedral_angles = topo
        .dihedral_pairs
        .iter()
        .map(|d| {
            dihedral_angle(&p[d.edge[0]], &p[d.edge[1]], &p[d.opposite[0]], &p[d.opposite[1]])
                .ok_or_else(|| MeshError::Validation(format!("degenerate dihedral at edge {:?}", d.edge)))
        })
        .collect::<Result<_, _>>()?;
    Ok(RestState {
        edge_rest_lengths,
        vertex_masses,
        rest_dihedral_angles,
        total_area,
        density,
    })
}
