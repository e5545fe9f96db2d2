//! Encoder and the short-range processor: message passing over mesh and
//! world edges followed by parameter-free Laplacian propagation of vertex
//! features along the garment mesh.

use std::sync::Arc;

use rand::Rng;

use crate::mesh::{vertex_normals, Vec3, WorldEdgeSet};
use crate::tensor::{BoundParams, Mlp, ModelParams, Result, Tape, Tensor, TensorError, Var};

/// Width of the raw per-vertex input: type one-hot, velocity, normal.
pub const VERTEX_INPUT: usize = 8;
/// Width of the raw mesh-edge input: relative position and its norm, at the
/// current and at the rest configuration.
pub const MESH_EDGE_INPUT: usize = 8;
/// Width of the raw world-edge input: relative position and its norm.
pub const WORLD_EDGE_INPUT: usize = 4;

/// Connectivity of one simulation graph. Vertices `0..n_garment` are garment
/// vertices, the rest are body vertices. Every mesh and world edge is stored
/// as two directed edges, `i -> j` then `j -> i`; an edge's features belong
/// to its receiver `dst`.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub n_garment: usize,
    pub n_body: usize,
    pub mesh_src: Arc<[usize]>,
    pub mesh_dst: Arc<[usize]>,
    /// Body endpoints are offset by `n_garment`.
    pub world_src: Arc<[usize]>,
    pub world_dst: Arc<[usize]>,
    /// `n_total x 1`, one where a vertex has no mesh neighbour.
    isolated: Tensor,
}

fn directed(pairs: impl Iterator<Item = (usize, usize)>) -> (Arc<[usize]>, Arc<[usize]>) {
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (i, j) in pairs {
        src.extend([i, j]);
        dst.extend([j, i]);
    }
    (src.into(), dst.into())
}

impl GraphIndex {
    /// `mesh_edges` are undirected garment edges; `world` holds
    /// `(garment, body)` pairs with body indices local to the body mesh.
    pub fn new(
        n_garment: usize,
        n_body: usize,
        mesh_edges: &[[usize; 2]],
        world: &[(usize, usize)],
    ) -> Result<Self> {
        let n = n_garment + n_body;
        if let Some(e) = mesh_edges.iter().find(|e| e[0] >= n_garment || e[1] >= n_garment || e[0] == e[1]) {
            return Err(TensorError::Invalid {
                op: "graph_index",
                msg: format!("mesh edge {e:?} invalid for {n_garment} garment vertices"),
            });
        }
        if let Some(p) = world.iter().find(|p| p.0 >= n_garment || p.1 >= n_body) {
            return Err(TensorError::Invalid {
                op: "graph_index",
                msg: format!("world edge {p:?} out of range ({n_garment} garment, {n_body} body)"),
            });
        }
        let (mesh_src, mesh_dst) = directed(mesh_edges.iter().map(|e| (e[0], e[1])));
        let (world_src, world_dst) = directed(world.iter().map(|p| (p.0, p.1 + n_garment)));
        let mut has_nbr = vec![false; n];
        for &d in mesh_dst.iter() {
            has_nbr[d] = true;
        }
        let isolated = Tensor::new(
            vec![n, 1],
            has_nbr.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect(),
        )?;
        Ok(Self {
            n_garment,
            n_body,
            mesh_src,
            mesh_dst,
            world_src,
            world_dst,
            isolated,
        })
    }

    pub fn n_total(&self) -> usize {
        self.n_garment + self.n_body
    }

    /// Directed mesh edge count (twice the undirected count).
    pub fn n_mesh_edges(&self) -> usize {
        self.mesh_src.len()
    }

    /// Directed world edge count (twice the pair count).
    pub fn n_world_edges(&self) -> usize {
        self.world_src.len()
    }

    /// Ids of the garment rows, for slicing latent vertex features.
    pub fn garment_rows(&self) -> Arc<[usize]> {
        (0..self.n_garment).collect()
    }
}

/// Latent features on a simulation graph, as handles on a tape.
#[derive(Debug, Clone)]
pub struct LatentGraph {
    pub vertex_feats: Var,
    pub mesh_edge_feats: Var,
    pub world_edge_feats: Var,
    pub index: Arc<GraphIndex>,
}

/// Raw (pre-encoder) features for one frame.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub index: Arc<GraphIndex>,
    pub vertex: Tensor,
    pub mesh_edge: Tensor,
    pub world_edge: Tensor,
}

/// Everything the feature assembly reads for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameGeometry<'a> {
    pub garment_pos: &'a [Vec3],
    pub garment_vel: &'a [Vec3],
    pub garment_rest: &'a [Vec3],
    pub garment_triangles: &'a [[usize; 3]],
    pub garment_edges: &'a [[usize; 2]],
    pub body_pos: &'a [Vec3],
    pub body_vel: &'a [Vec3],
    pub body_triangles: &'a [[usize; 3]],
    pub world: &'a WorldEdgeSet,
    pub dt: f64,
    /// Lengths are divided by this (mean garment rest edge length).
    pub length_scale: f64,
}

/// Builds the raw features. Positions enter only as differences, divided by
/// the length scale; velocities enter as per-frame displacement over the
/// same scale.
///
/// Only body vertices with at least one world edge become graph nodes, in
/// ascending body index order. The others have no path to any garment vertex,
/// so dropping them leaves every garment output unchanged.
pub fn assemble_inputs(f: &FrameGeometry<'_>) -> Result<GraphInputs> {
    let ng = f.garment_pos.len();
    let mut slot = vec![usize::MAX; f.body_pos.len()];
    for &(_, b) in &f.world.pairs {
        slot[b] = 0;
    }
    let mut kept = Vec::new();
    for (b, s) in slot.iter_mut().enumerate() {
        if *s == 0 {
            *s = kept.len();
            kept.push(b);
        }
    }
    let nb = kept.len();
    let pairs: Vec<(usize, usize)> = f.world.pairs.iter().map(|&(g, b)| (g, slot[b])).collect();
    let index = GraphIndex::new(ng, nb, f.garment_edges, &pairs)?;
    let inv = 1.0 / f.length_scale;
    let vel = f.dt * inv;
    let gn = vertex_normals(f.garment_pos, f.garment_triangles);
    let bn_all = vertex_normals(f.body_pos, f.body_triangles);
    let bn: Vec<Vec3> = kept.iter().map(|&b| bn_all[b]).collect();
    let bv: Vec<Vec3> = kept.iter().map(|&b| f.body_vel[b]).collect();
    let bp: Vec<Vec3> = kept.iter().map(|&b| f.body_pos[b]).collect();

    let mut vertex = Vec::with_capacity((ng + nb) * VERTEX_INPUT);
    for (kind, pos_vel_n) in [
        (0, (f.garment_vel, &gn)),
        (1, (&bv[..], &bn)),
    ] {
        let (q, n) = pos_vel_n;
        for (qi, ni) in q.iter().zip(n.iter()) {
            let onehot = if kind == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            vertex.extend_from_slice(&onehot);
            vertex.extend_from_slice(&[qi.x * vel, qi.y * vel, qi.z * vel]);
            vertex.extend_from_slice(&[ni.x, ni.y, ni.z]);
        }
    }

    // relative vectors point from receiver to sender
    let mut mesh_edge = Vec::with_capacity(index.n_mesh_edges() * MESH_EDGE_INPUT);
    for (&s, &r) in index.mesh_src.iter().zip(index.mesh_dst.iter()) {
        let d = (f.garment_pos[s] - f.garment_pos[r]) * inv;
        let d0 = (f.garment_rest[s] - f.garment_rest[r]) * inv;
        mesh_edge.extend_from_slice(&[d.x, d.y, d.z, d.norm(), d0.x, d0.y, d0.z, d0.norm()]);
    }

    let all_pos = |i: usize| if i < ng { f.garment_pos[i] } else { bp[i - ng] };
    let mut world_edge = Vec::with_capacity(index.n_world_edges() * WORLD_EDGE_INPUT);
    for (&s, &r) in index.world_src.iter().zip(index.world_dst.iter()) {
        let d = (all_pos(s) - all_pos(r)) * inv;
        world_edge.extend_from_slice(&[d.x, d.y, d.z, d.norm()]);
    }

    Ok(GraphInputs {
        vertex: Tensor::new(vec![ng + nb, VERTEX_INPUT], vertex)?,
        mesh_edge: Tensor::new(vec![index.n_mesh_edges(), MESH_EDGE_INPUT], mesh_edge)?,
        world_edge: Tensor::new(vec![index.n_world_edges(), WORLD_EDGE_INPUT], world_edge)?,
        index: Arc::new(index),
    })
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub vertex: Mlp,
    pub mesh_edge: Mlp,
    pub world_edge: Mlp,
}

impl Encoder {
    pub fn new<R: Rng>(params: &mut ModelParams, rng: &mut R, hidden: usize, hidden_layers: usize) -> Result<Self> {
        Ok(Self {
            vertex: Mlp::new(params, rng, "encoder.vertex", VERTEX_INPUT, hidden, hidden_layers, hidden, false)?,
            mesh_edge: Mlp::new(params, rng, "encoder.mesh_edge", MESH_EDGE_INPUT, hidden, hidden_layers, hidden, false)?,
            world_edge: Mlp::new(params, rng, "encoder.world_edge", WORLD_EDGE_INPUT, hidden, hidden_layers, hidden, false)?,
        })
    }
}

pub fn encode(tape: &mut Tape, bound: &BoundParams, enc: &Encoder, inputs: &GraphInputs) -> Result<LatentGraph> {
    let v = tape.constant(inputs.vertex.clone());
    let em = tape.constant(inputs.mesh_edge.clone());
    let ew = tape.constant(inputs.world_edge.clone());
    Ok(LatentGraph {
        vertex_feats: enc.vertex.apply(tape, bound, v)?,
        mesh_edge_feats: enc.mesh_edge.apply(tape, bound, em)?,
        world_edge_feats: enc.world_edge.apply(tape, bound, ew)?,
        index: inputs.index.clone(),
    })
}

/// Parameters of one processor layer.
#[derive(Debug, Clone)]
pub struct LsdmpLayer {
    pub f_e_mesh: Mlp,
    pub f_e_world: Mlp,
    pub f_v: Mlp,
    pub f_v_prime: Mlp,
}

impl LsdmpLayer {
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        rng: &mut R,
        prefix: &str,
        hidden: usize,
        hidden_layers: usize,
    ) -> Result<Self> {
        let h = hidden;
        Ok(Self {
            f_e_mesh: Mlp::new(params, rng, &format!("{prefix}.f_e_mesh"), 3 * h, h, hidden_layers, h, true)?,
            f_e_world: Mlp::new(params, rng, &format!("{prefix}.f_e_world"), 3 * h, h, hidden_layers, h, true)?,
            f_v: Mlp::new(params, rng, &format!("{prefix}.f_v"), 3 * h, h, hidden_layers, h, true)?,
            f_v_prime: Mlp::new(params, rng, &format!("{prefix}.f_v_prime"), h, h, hidden_layers, h, true)?,
        })
    }

    /// Zeroes the last linear layer of all four MLPs.
    pub fn zero_output_layers(&self, params: &mut ModelParams) {
        for m in [&self.f_e_mesh, &self.f_e_world, &self.f_v, &self.f_v_prime] {
            m.zero_output_layer(params);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lsdmp {
    pub layers: Vec<LsdmpLayer>,
    pub smoothing_steps: usize,
}

impl Lsdmp {
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        rng: &mut R,
        hidden: usize,
        hidden_layers: usize,
        n_layers: usize,
        smoothing_steps: usize,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| LsdmpLayer::new(params, rng, &format!("lsdmp.layer{i}"), hidden, hidden_layers))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            smoothing_steps,
        })
    }
}

fn edge_update(
    tape: &mut Tape,
    bound: &BoundParams,
    f_e: &Mlp,
    v: Var,
    e: Var,
    src: &Arc<[usize]>,
    dst: &Arc<[usize]>,
) -> Result<Var> {
    let vi = tape.gather_rows(v, src.clone())?;
    let vj = tape.gather_rows(v, dst.clone())?;
    let x = tape.concat(&[e, vi, vj])?;
    let upd = f_e.apply(tape, bound, x)?;
    tape.add(upd, e)
}

/// Edge update on mesh and world edges with their own MLPs, each with a
/// residual. Returns `(mesh, world)` features.
pub fn mp_edge_update(tape: &mut Tape, bound: &BoundParams, layer: &LsdmpLayer, lg: &LatentGraph) -> Result<(Var, Var)> {
    let ix = &lg.index;
    let em = edge_update(tape, bound, &layer.f_e_mesh, lg.vertex_feats, lg.mesh_edge_feats, &ix.mesh_src, &ix.mesh_dst)?;
    let ew = edge_update(
        tape,
        bound,
        &layer.f_e_world,
        lg.vertex_feats,
        lg.world_edge_feats,
        &ix.world_src,
        &ix.world_dst,
    )?;
    Ok((em, ew))
}

/// Vertex update from the sums of incoming mesh and world edges, with a
/// residual.
pub fn mp_vertex_update(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: &LsdmpLayer,
    lg: &LatentGraph,
    e_mesh: Var,
    e_world: Var,
) -> Result<Var> {
    let ix = &lg.index;
    let n = ix.n_total();
    let sm = tape.segment_sum(e_mesh, ix.mesh_dst.clone(), n)?;
    let sw = tape.segment_sum(e_world, ix.world_dst.clone(), n)?;
    let x = tape.concat(&[lg.vertex_feats, sm, sw])?;
    let upd = layer.f_v.apply(tape, bound, x)?;
    tape.add(upd, lg.vertex_feats)
}

/// `v_i <- mean_j (v_j + e_ji)` over incoming garment mesh edges `j -> i`; vertices
/// without mesh neighbours (including all body vertices) keep their value.
pub fn laplacian_smooth_step(tape: &mut Tape, index: &GraphIndex, v: Var, e_mesh: Var) -> Result<Var> {
    let nb = tape.gather_rows(v, index.mesh_src.clone())?;
    let msg = tape.add(nb, e_mesh)?;
    let mean = tape.segment_mean(msg, index.mesh_dst.clone(), index.n_total())?;
    let mask = tape.constant(index.isolated.clone());
    let keep = tape.mul_col(v, mask)?;
    tape.add(mean, keep)
}

/// One processor layer: message passing, `s` smoothing steps, then
/// `V = f'_v(V^p) + V^a`. The message-passing mesh and world edge features
/// are carried forward.
pub fn lsdmp_layer(
    tape: &mut Tape,
    bound: &BoundParams,
    layer: &LsdmpLayer,
    lg: &LatentGraph,
    smoothing_steps: usize,
) -> Result<LatentGraph> {
    let (em, ew) = mp_edge_update(tape, bound, layer, lg)?;
    let va = mp_vertex_update(tape, bound, layer, lg, em, ew)?;
    let mut vp = va;
    for _ in 0..smoothing_steps {
        vp = laplacian_smooth_step(tape, &lg.index, vp, em)?;
    }
    let out = layer.f_v_prime.apply(tape, bound, vp)?;
    let v = tape.add(out, va)?;
    Ok(LatentGraph {
        vertex_feats: v,
        mesh_edge_feats: em,
        world_edge_feats: ew,
        index: lg.index.clone(),
    })
}

pub fn lsdmp_forward(tape: &mut Tape, bound: &BoundParams, net: &Lsdmp, lg: &LatentGraph) -> Result<LatentGraph> {
    let mut cur = lg.clone();
    for layer in &net.layers {
        cur = lsdmp_layer(tape, bound, layer, &cur, net.smoothing_steps)?;
    }
    Ok(cur)
}
