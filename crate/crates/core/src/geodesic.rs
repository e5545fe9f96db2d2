//! Graph-geodesic distances over the garment mesh and their reduction to
//! per-vertex Euclidean coordinates by stress majorization (SMACOF).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::mesh::{RestState, Topology};

#[derive(Debug, thiserror::Error)]
pub enum GeodesicError {
    #[error(
        "mesh is disconnected: {components} components; smallest has {size} vertices \
         (lowest vertex index {first}) and is unreachable from the rest"
    )]
    Disconnected {
        components: usize,
        size: usize,
        first: usize,
    },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense symmetric matrix of pairwise geodesic distances in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = f(i, j);
            }
        }
        Self { n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties broken by vertex index
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-vertex weighted neighbor lists, weights being rest edge lengths.
fn weighted_adjacency(topo: &Topology, rest: &RestState) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); topo.adjacency.len()];
    for (&[i, j], &w) in topo.edges.iter().zip(&rest.edge_rest_lengths) {
        adj[i].push((j, w));
        adj[j].push((i, w));
    }
    adj
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem {
        dist: 0.0,
        vertex: source,
    });
    while let Some(HeapItem { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(HeapItem { dist: nd, vertex: v });
            }
        }
    }
    dist
}

/// Connected components as vertex lists, each sorted, ordered by lowest index.
pub fn connected_components(topo: &Topology) -> Vec<Vec<usize>> {
    let n = topo.adjacency.len();
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut k = 0;
        while k < comp.len() {
            let u = comp[k];
            k += 1;
            for &v in &topo.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// All-pairs shortest paths over mesh edges weighted by rest length, one
/// binary-heap Dijkstra per source.
pub fn geodesic_distances(topo: &Topology, rest: &RestState) -> Result<DistanceMatrix, GeodesicError> {
    let comps = connected_components(topo);
    if comps.len() > 1 {
        let smallest = comps
            .iter()
            .min_by_key(|c| (c.len(), c[0]))
            .expect("at least two components");
        return Err(GeodesicError::Disconnected {
            components: comps.len(),
            size: smallest.len(),
            first: smallest[0],
        });
    }
    let adj = weighted_adjacency(topo, rest);
    let n = adj.len();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(&adj, s)).collect();
    let mut d = Vec::with_capacity(n * n);
    for r in rows {
        d.extend(r);
    }
    // the two searches can disagree in the last ulp
    for i in 0..n {
        for j in i + 1..n {
            let m = d[i * n + j].min(d[j * n + i]);
            d[i * n + j] = m;
            d[j * n + i] = m;
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// Raw stress: sum over ordered pairs `i != j` of
/// `(d_ij - |x_i - x_j|)^2`, so each unordered pair counts twice.
pub fn stress(coords: &[Vec<f64>], dist: &DistanceMatrix) -> f64 {
    assert_eq!(coords.len(), dist.n(), "embedding rows must match the distance matrix");
    let n = coords.len();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let e = euclid(&coords[i], &coords[j]);
                    (dist.get(i, j) - e).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdsInit {
    /// Torgerson scaling: top-`k` eigenvectors of the double-centered
    /// squared-distance matrix.
    Classical,
    /// Uniform in `[0, max distance)` per coordinate, drawn from the seed.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdsOptions {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: MdsInit,
}

impl Default for MdsOptions {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 300,
            tol: 1e-9,
            seed: 0,
            init: MdsInit::Classical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicEmbedding {
    pub k: usize,
    /// One row of `k` coordinates per vertex.
    pub coords: Vec<Vec<f64>>,
    pub final_stress: f64,
    /// Stress of the initial configuration followed by every accepted
    /// iterate.
    pub stress_history: Vec<f64>,
}

impl GeodesicEmbedding {
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn iterations(&self) -> usize {
        self.stress_history.len().saturating_sub(1)
    }

    /// Per-dimension zero mean and unit variance; constant dimensions are
    /// only centered.
    pub fn standardized(&self) -> Vec<Vec<f64>> {
        let n = self.coords.len().max(1) as f64;
        let mut out = self.coords.clone();
        for c in 0..self.k {
            let mean = self.coords.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = self.coords.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for r in &mut out {
                r[c] = (r[c] - mean) * inv;
            }
        }
        out
    }
}

/// Classical (Torgerson) scaling into `k` dimensions. Dimensions beyond the
/// number of positive eigenvalues are zero.
pub fn classical_scaling(dist: &DistanceMatrix, k: usize) -> Vec<Vec<f64>> {
    let n = dist.n();
    let sq = DMatrix::from_fn(n, n, |i, j| dist.get(i, j).powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let total_mean = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + total_mean)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut coords = vec![vec![0.0; k]; n];
    for (c, &e) in order.iter().take(k).enumerate() {
        let lambda = eig.eigenvalues[e];
        if lambda <= 0.0 {
            break;
        }
        let s = lambda.sqrt();
        // fix the eigenvector sign so the output does not depend on solver
        // internals: largest-magnitude component positive
        let v = eig.eigenvectors.column(e);
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][c] = sign * v[i] * s;
        }
    }
    coords
}

/// One Guttman transform: `x_i <- (1/n) sum_{j != i} d_ij (x_i - x_j) / |x_i - x_j|`.
fn guttman_transform(coords: &[Vec<f64>], dist: &DistanceMatrix) -> Vec<Vec<f64>> {
    let n = coords.len();
    let k = coords.first().map_or(0, Vec::len);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0; k];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let e = euclid(&coords[i], &coords[j]);
                if e > 0.0 {
                    let w = dist.get(i, j) / e;
                    for c in 0..k {
                        out[c] += w * (coords[i][c] - coords[j][c]);
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= n as f64);
            out
        })
        .collect()
}

/// SMACOF stress majorization. Iterates until the relative stress decrease
/// drops below `tol` or `max_iters` is reached. An iterate that does not
/// lower the stress (possible only through rounding at convergence) ends the
/// run and is discarded, so the recorded history is non-increasing.
pub fn mds_embed(dist: &DistanceMatrix, opts: &MdsOptions) -> Result<GeodesicEmbedding, GeodesicError> {
    let init = match opts.init {
        MdsInit::Classical => {
            validate_mds(dist, opts)?;
            classical_scaling(dist, opts.k)
        }
        MdsInit::Random => {
            validate_mds(dist, opts)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let span = dist.max().max(f64::MIN_POSITIVE);
            (0..dist.n())
                .map(|_| (0..opts.k).map(|_| rng.gen::<f64>() * span).collect())
                .collect()
        }
    };
    mds_embed_from(dist, init, opts)
}

fn validate_mds(dist: &DistanceMatrix, opts: &MdsOptions) -> Result<(), GeodesicError> {
    if opts.k == 0 {
        return Err(GeodesicError::Validation("embedding dimension k must be >= 1".into()));
    }
    if opts.k > dist.n() {
        return Err(GeodesicError::Validation(format!(
            "embedding dimension k = {} exceeds vertex count n = {}",
            opts.k,
            dist.n()
        )));
    }
    if opts.max_iters == 0 {
        return Err(GeodesicError::Validation("max_iters must be >= 1".into()));
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(GeodesicError::Validation(format!("tol must be > 0, got {}", opts.tol)));
    }
    Ok(())
}

/// SMACOF from a caller-supplied starting configuration.
pub fn mds_embed_from(
    dist: &DistanceMatrix,
    init: Vec<Vec<f64>>,
    opts: &MdsOptions,
) -> Result<GeodesicEmbedding, GeodesicError> {
    validate_mds(dist, opts)?;
    if init.len() != dist.n() || init.iter().any(|r| r.len() != opts.k) {
        return Err(GeodesicError::Validation("initial configuration has the wrong shape".into()));
    }
    let scale: f64 = dist.as_slice().iter().map(|d| d * d).sum();
    let exact = 1e-20 * scale.max(f64::MIN_POSITIVE);
    let mut coords = init;
    let mut current = stress(&coords, dist);
    let mut history = vec![current];
    for _ in 0..opts.max_iters {
        if current <= exact {
            break;
        }
        let next = guttman_transform(&coords, dist);
        let s = stress(&next, dist);
        if s > current {
            break;
        }
        let decrease = current - s;
        coords = next;
        current = s;
        history.push(current);
        if decrease < opts.tol * history[history.len() - 2] {
            break;
        }
    }
    debug_assert!(history.windows(2).all(|w| w[1] <= w[0]));
    Ok(GeodesicEmbedding {
        k: opts.k,
        coords,
        final_stress: current,
        stress_history: history,
    })
}

const GEO_MAGIC: &[u8] = b"ESLR-GEO1";

/// Layout: magic, `u64` n, `u64` k, `n*k` little-endian f64 coordinates
/// (row-major), then a `u8` flag; when the flag is 1 the `n*n` distance
/// matrix follows.
pub fn write_geo<W: Write>(
    mut w: W,
    embedding: &GeodesicEmbedding,
    distances: Option<&DistanceMatrix>,
) -> Result<(), GeodesicError> {
    w.write_all(GEO_MAGIC)?;
    w.write_all(&(embedding.n() as u64).to_le_bytes())?;
    w.write_all(&(embedding.k as u64).to_le_bytes())?;
    for row in &embedding.coords {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match distances {
        Some(d) => {
            if d.n() != embedding.n() {
                return Err(GeodesicError::Validation("distance matrix size differs from embedding".into()));
            }
            w.write_all(&[1])?;
            for v in d.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => w.write_all(&[0])?,
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoFile {
    pub coords: Vec<Vec<f64>>,
    pub k: usize,
    pub distances: Option<DistanceMatrix>,
}

pub fn read_geo<R: Read>(mut r: R) -> Result<GeoFile, GeodesicError> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if magic != GEO_MAGIC {
        return Err(GeodesicError::Format("bad magic, not an ESLR-GEO1 file".into()));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let k = u64::from_le_bytes(b8) as usize;
    if n > 1 << 24 || k > 1 << 16 {
        return Err(GeodesicError::Format(format!("implausible sizes n={n} k={k}")));
    }
    let mut read_f64 = |r: &mut R| -> Result<f64, GeodesicError> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push((0..k).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let distances = match flag[0] {
        0 => None,
        1 => {
            let d = (0..n * n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
            Some(DistanceMatrix { n, d })
        }
        f => return Err(GeodesicError::Format(format!("bad distance flag {f}"))),
    };
    Ok(GeoFile { coords, k, distances })
}
