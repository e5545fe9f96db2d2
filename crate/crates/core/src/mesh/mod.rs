//! Triangle meshes: OBJ I/O, topology, rest-state quantities, procedural
//! generators and the proximity-based world edges between garment and body.

mod generate;
mod obj;
mod spatial;
mod topology;

pub use generate::{capsule, grid_cloth, icosphere};
pub use obj::{parse_obj, serialize_obj};
pub use spatial::{build_world_edges, build_world_edges_brute_force, WorldEdgeSet};
pub use topology::{build_topology, compute_rest_quantities, dihedral_angle, DihedralPair, RestState, Topology};

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid mesh: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    Garment,
    Body,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub kind: MeshKind,
}

impl Mesh {
    /// Checks index ranges and the minimum vertex count.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, kind: MeshKind) -> Result<Self, MeshError> {
        if vertices.len() < 3 {
            return Err(MeshError::Validation(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(MeshError::Validation(format!(
                    "triangle {t} references vertex {} but the mesh has {n} vertices",
                    bad + 1
                )));
            }
        }
        Ok(Self {
            vertices,
            triangles,
            kind,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn mean_edge_length(&self, topo: &Topology) -> f64 {
        if topo.edges.is_empty() {
            return 0.0;
        }
        topo.edges
            .iter()
            .map(|&[i, j]| (self.vertices[i] - self.vertices[j]).norm())
            .sum::<f64>()
            / topo.edges.len() as f64
    }
}

/// Unnormalized triangle normal `(b - a) x (c - a)`; its norm is twice the area.
pub fn triangle_normal(p: &[Vec3], tri: [usize; 3]) -> Vec3 {
    (p[tri[1]] - p[tri[0]]).cross(&(p[tri[2]] - p[tri[0]]))
}

/// Area-weighted unit vertex normals. Vertices with no incident area get a
/// zero normal.
pub fn vertex_normals(positions: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); positions.len()];
    for &tri in triangles {
        let n = triangle_normal(positions, tri);
        for &v in &tri {
            acc[v] += n;
        }
    }
    for n in &mut acc {
        let len = n.norm();
        if len > 0.0 {
            *n /= len;
        }
    }
    acc
}
