//! Scene evaluation, the loss report, and the scaling benchmark.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{grid, ConfigError, RunConfig, Scene, SceneSpec};
use crate::gsa::gsa_forward;
use crate::lsdmp::{encode, lsdmp_forward};
use crate::model::{Model, ModelConfig};
use crate::physics::{LossBreakdown, LossWeights};
use crate::sim::{initial_state, prepare_step, rollout, step, BodyMotion, Garment, Placement, Rollout, SimError, SimState};
use crate::tensor::{load_checkpoint, CheckpointHeader, Tape};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::tensor::TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Model and run configuration restored from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, RunConfig, CheckpointHeader), EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (header, named) = load_checkpoint(std::io::BufReader::new(file))?;
    let cfg = RunConfig::from_toml(&header.config)?;
    let mut model = Model::new(cfg.model.clone(), 0)?;
    model.params.load_named(named)?;
    Ok((model, cfg, header))
}

/// Rigid placement of the scene's garment over its body at time zero.
pub fn scene_start(cfg: &RunConfig, scene: &Scene) -> SimState {
    let p = Placement::above(&scene.garment.mesh.vertices, scene.yaw, 0.0, cfg.scene.placement_height);
    initial_state(&scene.garment, &scene.body, &p, 0.0, cfg.physics.dt, cfg.physics.collision_margin).0
}

pub fn evaluate_scene(model: &Model, cfg: &RunConfig, scene: &Scene, frames: usize) -> Result<Rollout, SimError> {
    let start = scene_start(cfg, scene);
    rollout(model, &scene.garment, &scene.body, &start, &cfg.physics, cfg.mesh.radius_factor, frames, None)
}

/// Contents of an `eval --scenes` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalScenes {
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
}

fn default_frames() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene: String,
    /// Per-term means over the rollout frames.
    pub losses: LossBreakdown,
}

/// Rolls every scene out (in parallel) and averages each term over frames.
pub fn evaluate(model: &Model, cfg: &RunConfig, scenes: &[Scene], specs: &[SceneSpec], frames: usize) -> Result<Vec<ReportRow>, SimError> {
    scenes
        .par_iter()
        .zip(specs.par_iter())
        .map(|(scene, spec)| {
            let r = evaluate_scene(model, cfg, scene, frames)?;
            Ok(ReportRow {
                scene: format!("{} / {}", spec.garment, spec.body.preset),
                losses: r.mean_losses(),
            })
        })
        .collect()
}

const COLUMNS: [&str; 7] = ["Stretch", "Bending", "Inertia", "Collision", "Friction", "Gravity", "Total"];

pub fn format_report(rows: &[ReportRow], w: &LossWeights, frames: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# per-frame means over {frames}-frame rollouts");
    let _ = writeln!(s, "# Stretch   = sum_edges (k_s/2) (|x_i - x_j| - L_ij)^2 / L_ij");
    let _ = writeln!(s, "# Bending   = sum_hinges (k_b/2) (theta - theta_rest)^2");
    let _ = writeln!(s, "# Inertia   = sum_i m_i/(2 dt^2) |x_next - (x + dt q)|^2");
    let _ = writeln!(s, "# Collision = sum_contacts k_c max(0, eps - (x_g - x_b).n_b)^3");
    let _ = writeln!(s, "# Friction  = mu sum_contacts m_i huber(|tangential slide|) / dt");
    let _ = writeln!(s, "# Gravity   = sum_i m_i g y_i");
    let _ = writeln!(
        s,
        "# Total     = {:E}*Stretch + {:E}*Bending + {:E}*Inertia + {:E}*Collision + {:E}*Friction + {:E}*Gravity",
        w.stretch, w.bending, w.inertia, w.collision, w.friction, w.gravity
    );
    let _ = write!(s, "{:<32}", "Scene");
    for c in COLUMNS {
        let _ = write!(s, " {c:>20}");
    }
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = write!(s, "{:<32}", r.scene);
        for v in [l.stretch, l.bending, l.inertia, l.collision, l.friction, l.gravity, l.total] {
            let _ = write!(s, " {v:>20.12E}");
        }
        s.push('\n');
    }
    s
}

/// Splits a report back into rows of column values (scene name dropped).
pub fn parse_report(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("Scene"))
        .map(|l| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            fields[fields.len() - COLUMNS.len()..].iter().map(|f| f.parse().unwrap_or(f64::NAN)).collect()
        })
        .collect()
}

/// A `side x side`-ish grid with roughly `n` vertices over a static sphere,
/// with a zero embedding of the model's width.
pub fn bench_scene(cfg: &RunConfig, n: usize, k: usize) -> Result<Scene, SimError> {
    let nx = ((n as f64).sqrt().round() as usize).max(2);
    let nz = ((n as f64 / nx as f64).round() as usize).max(2);
    let mesh = grid(nx, nz, cfg.mesh.grid_size);
    let zeros = vec![vec![0.0; k]; mesh.vertex_count()];
    let garment = Garment::new(format!("grid:{nx}x{nz}"), mesh, cfg.physics.density, &zeros, "zeros")?;
    Ok(Scene {
        garment: Arc::new(garment),
        body: cfg.body(BodyMotion::static_sphere()),
        yaw: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub vertices: usize,
    pub edges: usize,
    pub layers: usize,
    /// Fastest of the repeats, in seconds; scheduling noise only adds time.
    pub lsdmp: f64,
    pub gsa: f64,
    pub step: f64,
}

fn fastest(v: Vec<f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

/// Times the processor stack, the attention stack and a full step.
pub fn bench_one(model: &Model, cfg: &RunConfig, scene: &Scene, repeats: usize) -> Result<BenchRow, SimError> {
    let state = scene_start(cfg, scene);
    let inputs = prepare_step(model, &scene.garment, &scene.body, &state, &cfg.physics, cfg.mesh.radius_factor)?;
    let (mut tl, mut tg, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repeats.max(1) {
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let lg = encode(&mut tape, &bound, &model.encoder, &inputs.graph)?;
        let t0 = Instant::now();
        let out = lsdmp_forward(&mut tape, &bound, &model.lsdmp, &lg)?;
        tl.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(tape.value(out.vertex_feats));

        let rows = inputs.graph.index.garment_rows();
        let enc = tape.gather_rows(lg.vertex_feats, rows)?;
        // the attention stack gets its own tape, away from the processor's
        // activations
        let enc = tape.value(enc).clone();
        drop(tape);
        let mut gt = Tape::new();
        let gb = model.params.bind_frozen(&mut gt);
        let (enc, e) = (gt.constant(enc), gt.constant(inputs.embedding.clone()));
        let t0 = Instant::now();
        let g = gsa_forward(&mut gt, &gb, &model.gsa, enc, e).map_err(SimError::from)?;
        tg.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(gt.value(g));
        drop(gt);

        let t0 = Instant::now();
        let out = step(model, &scene.garment, &scene.body, &state, &cfg.physics, cfg.mesh.radius_factor)?;
        ts.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(BenchRow {
        vertices: scene.garment.n(),
        edges: scene.garment.topo.edges.len(),
        layers: model.config.lsdmp_layers,
        lsdmp: fastest(tl),
        gsa: fastest(tg),
        step: fastest(ts),
    })
}

/// A model with the given processor depth and fresh weights, or the
/// checkpoint's weights when its depth matches.
pub fn bench_model(base: &ModelConfig, ckpt: Option<&Model>, layers: usize, seed: u64) -> Result<Model, SimError> {
    if let Some(m) = ckpt {
        if m.config.lsdmp_layers == layers {
            return Ok(m.clone());
        }
    }
    let cfg = ModelConfig {
        lsdmp_layers: layers,
        ..base.clone()
    };
    Ok(Model::new(cfg, seed)?)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>8} {:>6} {:>12} {:>12} {:>12}",
        "vertices", "edges", "layers", "lsdmp_ms", "gsa_ms", "step_ms"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>6} {:>12.3} {:>12.3} {:>12.3}",
            r.vertices,
            r.edges,
            r.layers,
            r.lsdmp * 1e3,
            r.gsa * 1e3,
            r.step * 1e3
        );
    }
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layers).collect();
    layers.dedup();
    let _ = writeln!(s, "\nscaling ratios between consecutive sizes");
    let _ = writeln!(
        s,
        "{:>6} {:>8} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "layers", "from", "to", "n_ratio", "lsdmp", "gsa", "step"
    );
    for l in layers {
        let same: Vec<&BenchRow> = rows.iter().filter(|r| r.layers == l).collect();
        for w in same.windows(2) {
            let _ = writeln!(
                s,
                "{:>6} {:>8} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
                l,
                w[0].vertices,
                w[1].vertices,
                w[1].vertices as f64 / w[0].vertices as f64,
                w[1].lsdmp / w[0].lsdmp,
                w[1].gsa / w[0].gsa,
                w[1].step / w[0].step
            );
        }
    }
    s
}

/// Zero-embedding tensor check used by `simulate`: the garment's width must
/// match the model's.
pub fn check_embedding(model: &Model, garment: &Garment) -> Result<(), SimError> {
    let found = garment.embedding.cols();
    if found != model.config.embed_dim {
        return Err(SimError::EmbedWidth {
            garment: garment.name.clone(),
            expected: model.config.embed_dim,
            found,
        });
    }
    Ok(())
}
