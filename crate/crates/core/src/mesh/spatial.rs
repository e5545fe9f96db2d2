use std::collections::HashMap;

use super::Vec3;

/// Garment-body vertex pairs closer than `radius`, sorted by
/// `(garment, body)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldEdgeSet {
    pub pairs: Vec<(usize, usize)>,
    pub radius: f64,
}

impl WorldEdgeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps, per garment vertex, only the pair with the closest body
    /// vertex (lowest body index on ties). Contact terms use this subset so
    /// body vertices on the far side of a thin part never count.
    pub fn nearest(&self, garment: &[Vec3], body: &[Vec3]) -> WorldEdgeSet {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut best = f64::INFINITY;
        for &(g, b) in &self.pairs {
            let d = (garment[g] - body[b]).norm_squared();
            match pairs.last_mut() {
                Some(last) if last.0 == g => {
                    if d < best {
                        *last = (g, b);
                        best = d;
                    }
                }
                _ => {
                    pairs.push((g, b));
                    best = d;
                }
            }
        }
        WorldEdgeSet {
            pairs,
            radius: self.radius,
        }
    }
}

fn cell_of(p: &Vec3, inv: f64) -> [i64; 3] {
    [
        (p.x * inv).floor() as i64,
        (p.y * inv).floor() as i64,
        (p.z * inv).floor() as i64,
    ]
}

/// Uniform spatial hash over the body vertices with cell size `radius`;
/// each garment vertex probes its own cell and the 26 around it.
pub fn build_world_edges(garment: &[Vec3], body: &[Vec3], radius: f64) -> WorldEdgeSet {
    assert!(radius > 0.0, "world-edge radius must be positive");
    let inv = 1.0 / radius;
    let r2 = radius * radius;
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (b, p) in body.iter().enumerate() {
        cells.entry(cell_of(p, inv)).or_default().push(b);
    }
    let mut pairs = Vec::new();
    let mut found = Vec::new();
    for (g, p) in garment.iter().enumerate() {
        let c = cell_of(p, inv);
        found.clear();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        found.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&b| (p - body[b]).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        found.sort_unstable();
        pairs.extend(found.iter().map(|&b| (g, b)));
    }
    WorldEdgeSet { pairs, radius }
}

/// O(n*m) reference used to validate the hash.
pub fn build_world_edges_brute_force(garment: &[Vec3], body: &[Vec3], radius: f64) -> WorldEdgeSet {
    let r2 = radius * radius;
    let mut pairs = Vec::new();
    for (g, p) in garment.iter().enumerate() {
        for (b, q) in body.iter().enumerate() {
            if (p - q).norm_squared() <= r2 {
                pairs.push((g, b));
            }
        }
    }
    WorldEdgeSet { pairs, radius }
}
