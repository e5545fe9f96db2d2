//! Unsupervised training: sample a scene, predict one step, minimize the
//! physics objective of the prediction with Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Scene};
use crate::model::Model;
use crate::physics::LossBreakdown;
use crate::sim::{initial_state, Placement, SimError, SimState};
use crate::tensor::{save_checkpoint, CheckpointHeader, ModelParams, ParamGrads, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("scene list is empty")]
    EmptyScenes,
    #[error("non-finite loss at iteration {iteration}; last checkpoint kept{}", checkpoint.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    NonFinite {
        iteration: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState, hyper: &AdamConfig) {
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.t as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSample {
    pub scene: usize,
    pub time_offset: f64,
}

pub fn sample_scene(n_scenes: usize, max_time_offset: f64, rng: &mut ChaCha8Rng) -> Result<SceneSample, TrainError> {
    if n_scenes == 0 {
        return Err(TrainError::EmptyScenes);
    }
    let scene = rng.gen_range(0..n_scenes);
    let time_offset = if max_time_offset > 0.0 {
        rng.gen_range(0.0..max_time_offset)
    } else {
        0.0
    };
    Ok(SceneSample { scene, time_offset })
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub stretch: f64,
    pub bending: f64,
    pub inertia: f64,
    pub collision: f64,
    pub friction: f64,
    pub gravity: f64,
    pub total: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

impl TrainRecord {
    fn new(iteration: usize, l: &LossBreakdown, wall_time: f64) -> Self {
        Self {
            iteration,
            stretch: l.stretch,
            bending: l.bending,
            inertia: l.inertia,
            collision: l.collision,
            friction: l.friction,
            gravity: l.gravity,
            total: l.total,
            wall_time,
        }
    }
}

/// Mean total over the `window` iterations ending at `iteration` (1-based).
pub fn smoothed_total(log: &[TrainRecord], iteration: usize, window: usize) -> f64 {
    let end = iteration.min(log.len());
    let start = end.saturating_sub(window);
    let slice = &log[start..end];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len().max(1) as f64
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn write_checkpoint(path: &Path, iteration: usize, cfg: &RunConfig, model: &Model) -> Result<(), TrainError> {
    let header = CheckpointHeader {
        iteration: iteration as u64,
        seed: cfg.trainer.seed,
        config: cfg.to_toml(),
    };
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    save_checkpoint(&mut w, &header, &model.params)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// The model a training run starts from.
pub fn initial_model(cfg: &RunConfig) -> Result<Model, TensorError> {
    let mut model = Model::new(cfg.model.clone(), cfg.trainer.seed)?;
    if cfg.trainer.zero_init_decoder {
        model.zero_decoder_output();
    }
    Ok(model)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainRecord>,
}

struct Episode {
    scene: usize,
    state: SimState,
    frames: usize,
}

fn start_episode(cfg: &RunConfig, scenes: &[Scene], rng: &mut ChaCha8Rng) -> Result<Episode, TrainError> {
    let t = &cfg.trainer;
    let s = sample_scene(scenes.len(), t.max_time_offset, rng)?;
    let scene = &scenes[s.scene];
    let placement = Placement::above(&scene.garment.mesh.vertices, scene.yaw, 0.0, cfg.scene.placement_height);
    let (mut state, _) = initial_state(
        &scene.garment,
        &scene.body,
        &placement,
        s.time_offset,
        cfg.physics.dt,
        cfg.physics.collision_margin,
    );
    let warm = cfg.trainer.warmup_frames as f64 * state.dt;
    if warm > 0.0 {
        let (pos, vel) = crate::sim::body_motion_eval(&scene.body, state.time + warm);
        state.time += warm;
        state.body_pos = pos;
        state.body_vel = vel;
    }
    Ok(Episode {
        scene: s.scene,
        state,
        frames: 0,
    })
}

/// Trains a fresh model from `cfg`. Each episode places a garment over its
/// body, lets `warmup_frames` of zero-acceleration time pass, then takes one
/// optimizer step per predicted frame, continuing from the (detached)
/// prediction for `episode_frames` frames. With `out_dir`, the log and a
/// checkpoint every `checkpoint_interval` iterations (and at the end) are
/// written there.
pub fn train(
    cfg: &RunConfig,
    scenes: &[Scene],
    out_dir: Option<&Path>,
    mut on_iter: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome, TrainError> {
    let tc = &cfg.trainer;
    if scenes.is_empty() {
        return Err(TrainError::EmptyScenes);
    }
    let mut model = initial_model(cfg)?;
    let mut adam = AdamState::new(&model.params);
    let hyper = AdamConfig {
        lr: tc.learning_rate,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.adam_eps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);

    let ckpt = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut saved: Option<PathBuf> = None;
    let start = Instant::now();
    let mut log = Vec::with_capacity(tc.iterations);
    let mut episode: Option<Episode> = None;

    for it in 1..=tc.iterations {
        let ep = match episode.take() {
            Some(ep) if ep.frames < tc.episode_frames => ep,
            _ => start_episode(cfg, scenes, &mut rng)?,
        };
        let scene = &scenes[ep.scene];
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let (loss, breakdown, next) = crate::sim::training_step(
            &mut tape,
            &bound,
            &model,
            &scene.garment,
            &scene.body,
            &ep.state,
            &cfg.physics,
            cfg.mesh.radius_factor,
        )?;
        if !breakdown.is_finite() || !next.is_finite() {
            if let Some(f) = log_file.as_mut() {
                f.flush()?;
            }
            return Err(TrainError::NonFinite {
                iteration: it,
                checkpoint: saved,
            });
        }
        let grads = tape.backward(loss)?;
        let pg = bound.collect(&model.params, &grads);
        adam_step(&mut model.params, &pg, &mut adam, &hyper);

        let rec = TrainRecord::new(it, &breakdown, start.elapsed().as_secs_f64());
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        on_iter(&rec);
        log.push(rec);

        if let Some(path) = &ckpt {
            if it % tc.checkpoint_interval == 0 || it == tc.iterations {
                if let Some(f) = log_file.as_mut() {
                    f.flush()?;
                }
                write_checkpoint(path, it, cfg, &model)?;
                saved = Some(path.clone());
            }
        }
        episode = Some(Episode {
            scene: ep.scene,
            state: next,
            frames: ep.frames + 1,
        });
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    Ok(TrainOutcome { model, log })
}
