//! One prediction step (encode, both processors, fuse, decode, integrate)
//! and autoregressive rollouts against a procedurally animated body.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gsa::{standardize_columns, GsaError};
use crate::lsdmp::{assemble_inputs, FrameGeometry, GraphInputs};
use crate::mesh::{
    build_topology, build_world_edges, capsule, compute_rest_quantities, icosphere, serialize_obj, vertex_normals,
    Mesh, MeshError, MeshKind, RestState, Topology, Vec3,
};
use crate::model::{ForwardOutput, Model};
use crate::physics::{friction_contacts, max_penetration, total_loss, Contact, LossBreakdown, PhysicsConfig, StepContext};
use crate::tensor::{BoundParams, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("non-finite state at frame {frame}")]
    NonFinite { frame: usize },
    #[error(
        "garment `{garment}` has no usable embedding ({reason}); run `preprocess` on it first"
    )]
    Embedding { garment: String, reason: String },
    #[error("model expects embedding width {expected}, garment `{garment}` provides {found}")]
    EmbedWidth {
        garment: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown body preset `{0}` (expected static_sphere, translating_capsule or swinging_capsule)")]
    UnknownPreset(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Gsa(#[from] GsaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A garment mesh with its precomputed rest state and geodesic embedding.
#[derive(Debug, Clone)]
pub struct Garment {
    pub name: String,
    pub mesh: Mesh,
    pub topo: Topology,
    pub rest: RestState,
    /// Mean rest edge length, m.
    pub length_scale: f64,
    /// `n x k`.
    pub embedding: Tensor,
    pub embedding_source: String,
}

impl Garment {
    pub fn new(
        name: impl Into<String>,
        mesh: Mesh,
        density: f64,
        embedding: &[Vec<f64>],
        embedding_source: impl Into<String>,
    ) -> Result<Self, SimError> {
        let name = name.into();
        let embedding_source = embedding_source.into();
        let topo = build_topology(&mesh);
        let rest = compute_rest_quantities(&mesh, &topo, density)?;
        if embedding.len() != mesh.vertex_count() {
            return Err(GsaError::RowMismatch {
                mesh: name,
                embedding: embedding_source,
                mesh_rows: mesh.vertex_count(),
                embed_rows: embedding.len(),
            }
            .into());
        }
        let embedding = Tensor::from_rows(embedding)?;
        Ok(Self {
            length_scale: mesh.mean_edge_length(&topo),
            name,
            mesh,
            topo,
            rest,
            embedding,
            embedding_source,
        })
    }

    pub fn n(&self) -> usize {
        self.mesh.vertex_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPreset {
    StaticSphere,
    TranslatingCapsule,
    SwingingCapsule,
}

impl FromStr for MotionPreset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "static_sphere" => Ok(Self::StaticSphere),
            "translating_capsule" => Ok(Self::TranslatingCapsule),
            "swinging_capsule" => Ok(Self::SwingingCapsule),
            other => Err(SimError::UnknownPreset(other.to_string())),
        }
    }
}

impl fmt::Display for MotionPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StaticSphere => "static_sphere",
            Self::TranslatingCapsule => "translating_capsule",
            Self::SwingingCapsule => "swinging_capsule",
        })
    }
}

/// Procedural body animation. For the translating capsule `amplitude` is a
/// speed along +Z in m/s; for the swinging capsule it is the swing angle in
/// radians, with `frequency` in Hz and a phase drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyMotion {
    pub preset: MotionPreset,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BodyMotion {
    pub fn new(preset: MotionPreset, amplitude: f64, frequency: f64, seed: u64) -> Self {
        Self {
            preset,
            amplitude,
            frequency,
            seed,
        }
    }

    pub fn static_sphere() -> Self {
        Self::new(MotionPreset::StaticSphere, 0.0, 0.0, 0)
    }
}

/// Body shapes. Every preset rests with its highest point at `y = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyConfig {
    pub sphere_radius: f64,
    pub capsule_radius: f64,
    pub capsule_half_length: f64,
    pub subdivisions: usize,
    /// Height of the swing pivot above the capsule axis, m.
    pub pivot_height: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            sphere_radius: 0.35,
            capsule_radius: 0.2,
            capsule_half_length: 0.3,
            subdivisions: 3,
            pivot_height: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Body {
    pub rest: Mesh,
    pub motion: BodyMotion,
    pivot: Vec3,
    phase: f64,
}

impl Body {
    pub fn new(motion: BodyMotion, cfg: &BodyConfig) -> Self {
        let (rest, pivot) = match motion.preset {
            MotionPreset::StaticSphere => (
                icosphere(cfg.subdivisions, cfg.sphere_radius, Vec3::new(0.0, -cfg.sphere_radius, 0.0)),
                Vec3::zeros(),
            ),
            MotionPreset::TranslatingCapsule | MotionPreset::SwingingCapsule => {
                let mut m = capsule(cfg.subdivisions, cfg.capsule_radius, cfg.capsule_half_length);
                for v in &mut m.vertices {
                    v.y -= cfg.capsule_radius;
                }
                (m, Vec3::new(0.0, cfg.pivot_height - cfg.capsule_radius, 0.0))
            }
        };
        let phase = ChaCha8Rng::seed_from_u64(motion.seed).gen_range(0.0..2.0 * PI);
        Self {
            rest,
            motion,
            pivot,
            phase,
        }
    }

    pub fn n(&self) -> usize {
        self.rest.vertex_count()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.rest.triangles
    }
}

/// Analytic body positions and velocities at time `t`.
pub fn body_motion_eval(body: &Body, t: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let m = &body.motion;
    let rest = &body.rest.vertices;
    match m.preset {
        MotionPreset::StaticSphere => (rest.clone(), vec![Vec3::zeros(); rest.len()]),
        MotionPreset::TranslatingCapsule => {
            let v = Vec3::new(0.0, 0.0, m.amplitude);
            (rest.iter().map(|p| p + v * t).collect(), vec![v; rest.len()])
        }
        MotionPreset::SwingingCapsule => {
            let w = 2.0 * PI * m.frequency;
            let theta = m.amplitude * (w * t + body.phase).sin();
            let dtheta = m.amplitude * w * (w * t + body.phase).cos();
            let rot = Rotation3::from_axis_angle(&Vec3::x_axis(), theta);
            let mut pos = Vec::with_capacity(rest.len());
            let mut vel = Vec::with_capacity(rest.len());
            for p in rest {
                let r = rot * (p - body.pivot);
                pos.push(body.pivot + r);
                vel.push(Vec3::x().cross(&r) * dtheta);
            }
            (pos, vel)
        }
    }
}

/// Rigid transform taking garment rest coordinates to the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl Placement {
    /// Rotates by `yaw` about +Y, then centers the garment over the origin in
    /// XZ with its lowest vertex `height` above `body_top`.
    pub fn above(rest: &[Vec3], yaw: f64, body_top: f64, height: f64) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::y()), yaw);
        let rotated: Vec<Vec3> = rest.iter().map(|p| rotation * p).collect();
        let n = rotated.len().max(1) as f64;
        let cx = rotated.iter().map(|p| p.x).sum::<f64>() / n;
        let cz = rotated.iter().map(|p| p.z).sum::<f64>() / n;
        let ymin = rotated.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        Self {
            rotation,
            translation: Vec3::new(-cx, body_top + height - ymin, -cz),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub frame: usize,
    /// Body animation time, s.
    pub time: f64,
    pub dt: f64,
    pub garment_pos: Vec<Vec3>,
    pub garment_vel: Vec<Vec3>,
    pub body_pos: Vec<Vec3>,
    pub body_vel: Vec<Vec3>,
}

impl SimState {
    pub fn is_finite(&self) -> bool {
        let ok = |v: &[Vec3]| v.iter().all(|p| p.iter().all(|x| x.is_finite()));
        self.time.is_finite()
            && ok(&self.garment_pos)
            && ok(&self.garment_vel)
            && ok(&self.body_pos)
            && ok(&self.body_vel)
    }
}

/// Rigid placement of the garment over the body at time `t0`, at rest.
/// Returns a warning when the placed garment already penetrates the body by
/// more than twice the collision margin.
pub fn initial_state(
    garment: &Garment,
    body: &Body,
    placement: &Placement,
    t0: f64,
    dt: f64,
    margin: f64,
) -> (SimState, Option<String>) {
    let (body_pos, body_vel) = body_motion_eval(body, t0);
    let garment_pos: Vec<Vec3> = garment.mesh.vertices.iter().map(|p| placement.apply(p)).collect();
    let normals = vertex_normals(&body_pos, body.triangles());
    let depth = max_penetration(&garment_pos, &body_pos, &normals);
    let warning = (depth > 2.0 * margin).then(|| {
        format!(
            "garment `{}` starts {depth:.4} m inside the body (more than 2x the {margin} m margin)",
            garment.name
        )
    });
    let state = SimState {
        frame: 0,
        time: t0,
        dt,
        garment_vel: vec![Vec3::zeros(); garment_pos.len()],
        garment_pos,
        body_pos,
        body_vel,
    };
    (state, warning)
}

/// Inputs to one step that do not depend on the network.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub graph: GraphInputs,
    pub embedding: Tensor,
    pub body_next: Vec<Vec3>,
    pub body_next_vel: Vec<Vec3>,
    pub body_next_normals: Vec<Vec3>,
    pub contacts: Vec<Contact>,
    pub radius: f64,
}

/// Builds world edges at the current positions, the raw features, and the
/// body configuration at the end of the step.
pub fn prepare_step(
    model: &Model,
    garment: &Garment,
    body: &Body,
    state: &SimState,
    phys: &PhysicsConfig,
    radius_factor: f64,
) -> Result<StepInputs, SimError> {
    let k = garment.embedding.cols();
    if k != model.config.embed_dim {
        return Err(SimError::EmbedWidth {
            garment: garment.name.clone(),
            expected: model.config.embed_dim,
            found: k,
        });
    }
    let radius = radius_factor * garment.length_scale;
    let world = build_world_edges(&state.garment_pos, &state.body_pos, radius);
    let graph = assemble_inputs(&FrameGeometry {
        garment_pos: &state.garment_pos,
        garment_vel: &state.garment_vel,
        garment_rest: &garment.mesh.vertices,
        garment_triangles: &garment.mesh.triangles,
        garment_edges: &garment.topo.edges,
        body_pos: &state.body_pos,
        body_vel: &state.body_vel,
        body_triangles: body.triangles(),
        world: &world,
        dt: state.dt,
        length_scale: garment.length_scale,
    })?;
    let (body_next, body_next_vel) = body_motion_eval(body, state.time + state.dt);
    let body_next_normals = vertex_normals(&body_next, body.triangles());
    let normals_curr = vertex_normals(&state.body_pos, body.triangles());
    let contacts = friction_contacts(
        &state.garment_pos,
        &state.body_pos,
        &body_next,
        &normals_curr,
        &world.nearest(&state.garment_pos, &state.body_pos),
        phys.collision_margin,
    );
    let embedding = if model.config.standardize_embedding {
        standardize_columns(&garment.embedding)
    } else {
        garment.embedding.clone()
    };
    Ok(StepInputs {
        graph,
        embedding,
        body_next,
        body_next_vel,
        body_next_normals,
        contacts,
        radius,
    })
}

/// Runs the network for one step on `tape`.
pub fn forward_step(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &Model,
    inputs: &StepInputs,
) -> Result<ForwardOutput, SimError> {
    let embed = tape.constant(inputs.embedding.clone());
    Ok(model.forward(tape, bound, &inputs.graph, embed)?)
}

fn to_vec3(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Semi-implicit Euler: `q' = q + a dt`, `x' = x + q' dt`.
pub fn integrate(state: &SimState, accel: &[Vec3], inputs: &StepInputs) -> SimState {
    let dt = state.dt;
    let garment_vel: Vec<Vec3> = state.garment_vel.iter().zip(accel).map(|(q, a)| q + a * dt).collect();
    let garment_pos = state.garment_pos.iter().zip(&garment_vel).map(|(x, q)| x + q * dt).collect();
    SimState {
        frame: state.frame + 1,
        time: state.time + dt,
        dt,
        garment_pos,
        garment_vel,
        body_pos: inputs.body_next.clone(),
        body_vel: inputs.body_next_vel.clone(),
    }
}

/// Physics objective of a predicted next state, with its gradient with
/// respect to the garment positions and the degenerate hinge count.
pub fn step_loss(
    garment: &Garment,
    state: &SimState,
    next: &SimState,
    inputs: &StepInputs,
    phys: &PhysicsConfig,
) -> (LossBreakdown, Vec<Vec3>, usize) {
    let ctx = StepContext {
        topo: &garment.topo,
        rest: &garment.rest,
        x_curr: &state.garment_pos,
        q_curr: &state.garment_vel,
        body_next: &inputs.body_next,
        body_next_normals: &inputs.body_next_normals,
        contacts: &inputs.contacts,
        world_radius: inputs.radius,
    };
    total_loss(&next.garment_pos, &ctx, phys)
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub accel: Vec<Vec3>,
    pub next: SimState,
    pub losses: LossBreakdown,
    pub max_penetration: f64,
}

pub fn step(
    model: &Model,
    garment: &Garment,
    body: &Body,
    state: &SimState,
    phys: &PhysicsConfig,
    radius_factor: f64,
) -> Result<StepOutput, SimError> {
    let inputs = prepare_step(model, garment, body, state, phys, radius_factor)?;
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let out = forward_step(&mut tape, &bound, model, &inputs)?;
    let accel = to_vec3(tape.value(out.accel));
    let next = integrate(state, &accel, &inputs);
    let (losses, _, _) = step_loss(garment, state, &next, &inputs, phys);
    let max_penetration = max_penetration(&next.garment_pos, &next.body_pos, &inputs.body_next_normals);
    Ok(StepOutput {
        accel,
        next,
        losses,
        max_penetration,
    })
}

/// Builds the differentiable training objective for one step on `tape`:
/// returns the loss handle, the breakdown and the predicted next state.
pub fn training_step(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &Model,
    garment: &Garment,
    body: &Body,
    state: &SimState,
    phys: &PhysicsConfig,
    radius_factor: f64,
) -> Result<(Var, LossBreakdown, SimState), SimError> {
    let inputs = prepare_step(model, garment, body, state, phys, radius_factor)?;
    let out = forward_step(tape, bound, model, &inputs)?;
    let accel = to_vec3(tape.value(out.accel));
    let next = integrate(state, &accel, &inputs);
    let (losses, grad_x, _) = step_loss(garment, state, &next, &inputs, phys);
    // x' depends on a through dt^2
    let dt2 = state.dt * state.dt;
    let grad_a = Tensor::new(
        vec![garment.n(), 3],
        grad_x.iter().flat_map(|g| [g.x * dt2, g.y * dt2, g.z * dt2]).collect(),
    )?;
    let loss = tape.external_scalar(out.accel, losses.total, grad_a)?;
    Ok((loss, losses, next))
}

/// Per-frame metrics record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub stretch: f64,
    pub bending: f64,
    pub inertia: f64,
    pub collision: f64,
    pub friction: f64,
    pub gravity: f64,
    pub total: f64,
    pub max_penetration: f64,
}

impl FrameMetrics {
    fn new(frame: usize, l: &LossBreakdown, max_penetration: f64) -> Self {
        Self {
            frame,
            stretch: l.stretch,
            bending: l.bending,
            inertia: l.inertia,
            collision: l.collision,
            friction: l.friction,
            gravity: l.gravity,
            total: l.total,
            max_penetration,
        }
    }

    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            stretch: self.stretch,
            bending: self.bending,
            inertia: self.inertia,
            collision: self.collision,
            friction: self.friction,
            gravity: self.gravity,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// States after each step; `states[t]` is frame `t`.
    pub states: Vec<SimState>,
    pub metrics: Vec<FrameMetrics>,
}

impl Rollout {
    pub fn mean_losses(&self) -> LossBreakdown {
        let all: Vec<LossBreakdown> = self.metrics.iter().map(FrameMetrics::losses).collect();
        LossBreakdown::mean(&all)
    }
}

/// `frames` sequential steps from `initial`. With `out_dir`, writes
/// `frame_{t:05}.obj` per frame and appends one record per frame to
/// `metrics.jsonl`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &Model,
    garment: &Garment,
    body: &Body,
    initial: &SimState,
    phys: &PhysicsConfig,
    radius_factor: f64,
    frames: usize,
    out_dir: Option<&Path>,
) -> Result<Rollout, SimError> {
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut state = initial.clone();
    let mut states = Vec::with_capacity(frames);
    let mut metrics = Vec::with_capacity(frames);
    for t in 0..frames {
        let out = step(model, garment, body, &state, phys, radius_factor)?;
        if !out.next.is_finite() || !out.losses.is_finite() {
            return Err(SimError::NonFinite { frame: t });
        }
        let rec = FrameMetrics::new(t, &out.losses, out.max_penetration);
        if let (Some(dir), Some(f)) = (out_dir, metrics_file.as_mut()) {
            let mesh = Mesh {
                vertices: out.next.garment_pos.clone(),
                triangles: garment.mesh.triangles.clone(),
                kind: MeshKind::Garment,
            };
            std::fs::write(dir.join(format!("frame_{t:05}.obj")), serialize_obj(&mesh))?;
            serde_json::to_writer(&mut *f, &rec).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        metrics.push(rec);
        state = out.next;
        states.push(state.clone());
    }
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }
    Ok(Rollout { states, metrics })
}
