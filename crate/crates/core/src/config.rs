//! Run configuration shared by every subcommand, and loading of the garments
//! and scenes it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geodesic::{geodesic_distances, mds_embed, read_geo, GeodesicError, MdsInit, MdsOptions};
use crate::mesh::{build_topology, compute_rest_quantities, grid_cloth, parse_obj, Mesh, MeshKind};
use crate::model::ModelConfig;
use crate::physics::PhysicsConfig;
use crate::sim::{Body, BodyConfig, BodyMotion, Garment};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Validation(String),
    #[error("garment `{garment}`: no embedding at {}; run `preprocess --garment {garment} --out {}` first", path.display(), path.display())]
    MissingEmbedding { garment: String, path: PathBuf },
    #[error("garment `{garment}`: {source}")]
    Garment {
        garment: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn garment(name: &str, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        Self::Garment {
            garment: name.to_string(),
            source: Box::new(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// World-edge radius as a multiple of the mean rest edge length.
    pub radius_factor: f64,
    /// Side length of generated `grid:NxM` garments along X, m.
    pub grid_size: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            radius_factor: 1.5,
            grid_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub random_init: bool,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        let d = MdsOptions::default();
        Self {
            max_iters: d.max_iters,
            tol: d.tol,
            seed: d.seed,
            random_init: false,
        }
    }
}

impl GeodesicConfig {
    pub fn options(&self, k: usize) -> MdsOptions {
        MdsOptions {
            k,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            init: if self.random_init { MdsInit::Random } else { MdsInit::Classical },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Gap between the garment's lowest vertex and the body's top, m.
    pub placement_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { placement_height: 0.02 }
    }
}

/// One garment/motion pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// An OBJ path or `grid:NxM`.
    pub garment: String,
    /// Embedding file; defaults to the OBJ path with a `.geo` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
    pub body: BodyMotion,
    /// Rotation of the garment about +Y before placement, radians.
    #[serde(default)]
    pub yaw: f64,
}

impl SceneSpec {
    pub fn grid_over(body: BodyMotion, n: usize) -> Self {
        Self {
            garment: format!("grid:{n}x{n}"),
            embedding: None,
            body,
            yaw: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Zero-acceleration frames after placement, before an episode starts.
    pub warmup_frames: usize,
    /// Training steps rolled forward from one placement before resampling.
    pub episode_frames: usize,
    /// Body animation start times are drawn from `[0, max_time_offset)`, s.
    pub max_time_offset: f64,
    pub checkpoint_interval: usize,
    /// Start from a zeroed decoder output layer, so the first predictions
    /// are all zero acceleration.
    pub zero_init_decoder: bool,
    pub scenes: Vec<SceneSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            warmup_frames: 5,
            episode_frames: 40,
            max_time_offset: 2.0,
            checkpoint_interval: 500,
            zero_init_decoder: true,
            scenes: vec![SceneSpec::grid_over(BodyMotion::static_sphere(), 10)],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    pub geodesic: GeodesicConfig,
    pub model: ModelConfig,
    pub physics: PhysicsConfig,
    pub body: BodyConfig,
    pub scene: SceneConfig,
    pub trainer: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = |m: String| ConfigError::Validation(m);
        self.model.validate().map_err(v)?;
        self.physics.validate().map_err(v)?;
        if !(self.mesh.radius_factor > 0.0) {
            return Err(v("mesh.radius_factor must be > 0".into()));
        }
        if !(self.mesh.grid_size > 0.0) {
            return Err(v("mesh.grid_size must be > 0".into()));
        }
        if !(self.body.sphere_radius > 0.0 && self.body.capsule_radius > 0.0) {
            return Err(v("body radii must be > 0".into()));
        }
        let t = &self.trainer;
        if t.iterations == 0 {
            return Err(v("trainer.iterations must be >= 1".into()));
        }
        if !(t.learning_rate >= 0.0) {
            return Err(v("trainer.learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(v("trainer.beta1 and trainer.beta2 must lie in [0, 1)".into()));
        }
        if t.episode_frames == 0 || t.checkpoint_interval == 0 {
            return Err(v("trainer.episode_frames and trainer.checkpoint_interval must be >= 1".into()));
        }
        if !(t.max_time_offset >= 0.0) {
            return Err(v("trainer.max_time_offset must be >= 0".into()));
        }
        Ok(())
    }

    pub fn body(&self, motion: BodyMotion) -> Body {
        Body::new(motion, &self.body)
    }

    /// Builds the garment named by `spec`. Generated grids get their
    /// embedding computed here; OBJ garments must have been preprocessed.
    /// Relative paths resolve against `base`.
    pub fn load_garment(&self, spec: &str, embedding: Option<&Path>, base: &Path) -> Result<Garment, ConfigError> {
        let density = self.physics.density;
        if let Some(dims) = spec.strip_prefix("grid:") {
            let (nx, nz) = parse_grid(dims).ok_or_else(|| {
                ConfigError::Validation(format!("`{spec}`: expected grid:NxM with N, M >= 2"))
            })?;
            let mesh = grid(nx, nz, self.mesh.grid_size);
            let coords = match embedding {
                Some(p) => read_embedding(spec, &base.join(p))?,
                None => self.embed(spec, &mesh)?,
            };
            let src = embedding.map_or_else(|| "generated".to_string(), |p| p.display().to_string());
            return Garment::new(spec, mesh, density, &coords, src).map_err(|e| ConfigError::garment(spec, e));
        }
        let path = base.join(spec);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        let mesh = parse_obj(&text, MeshKind::Garment).map_err(|e| ConfigError::garment(spec, e))?;
        let geo = match embedding {
            Some(p) => base.join(p),
            None => path.with_extension("geo"),
        };
        let coords = read_embedding(spec, &geo)?;
        Garment::new(spec, mesh, density, &coords, geo.display().to_string()).map_err(|e| ConfigError::garment(spec, e))
    }

    fn embed(&self, name: &str, mesh: &Mesh) -> Result<Vec<Vec<f64>>, ConfigError> {
        let topo = build_topology(mesh);
        let rest = compute_rest_quantities(mesh, &topo, self.physics.density).map_err(|e| ConfigError::garment(name, e))?;
        let dist = geodesic_distances(&topo, &rest).map_err(|e| ConfigError::garment(name, e))?;
        let emb = mds_embed(&dist, &self.geodesic.options(self.model.embed_dim)).map_err(|e| ConfigError::garment(name, e))?;
        Ok(emb.coords)
    }

    /// Loads every distinct garment once, returning one scene per spec.
    pub fn load_scenes(&self, specs: &[SceneSpec], base: &Path) -> Result<Vec<Scene>, ConfigError> {
        let mut loaded: Vec<(String, Option<PathBuf>, std::sync::Arc<Garment>)> = Vec::new();
        let mut scenes = Vec::with_capacity(specs.len());
        for s in specs {
            let hit = loaded.iter().find(|(g, e, _)| *g == s.garment && *e == s.embedding);
            let garment = match hit {
                Some((_, _, g)) => g.clone(),
                None => {
                    let g = std::sync::Arc::new(self.load_garment(&s.garment, s.embedding.as_deref(), base)?);
                    loaded.push((s.garment.clone(), s.embedding.clone(), g.clone()));
                    g
                }
            };
            scenes.push(Scene {
                garment,
                body: self.body(s.body),
                yaw: s.yaw,
            });
        }
        Ok(scenes)
    }
}

/// A loaded scene: shared garment plus its animated body.
#[derive(Debug, Clone)]
pub struct Scene {
    pub garment: std::sync::Arc<Garment>,
    pub body: Body,
    pub yaw: f64,
}

/// Parses the `NxM` part of a `grid:NxM` garment name.
pub fn parse_grid(dims: &str) -> Option<(usize, usize)> {
    let (a, b) = dims.split_once('x')?;
    let (nx, nz) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
    (nx >= 2 && nz >= 2).then_some((nx, nz))
}

/// Square-celled grid `size` meters wide along X.
pub fn grid(nx: usize, nz: usize, size: f64) -> Mesh {
    let depth = size * (nz - 1) as f64 / (nx - 1) as f64;
    grid_cloth(nx, nz, size, depth)
}

fn read_embedding(garment: &str, path: &Path) -> Result<Vec<Vec<f64>>, ConfigError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::MissingEmbedding {
                garment: garment.to_string(),
                path: path.to_path_buf(),
            })
        }
        Err(source) => {
            return Err(ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let geo = read_geo(std::io::BufReader::new(file)).map_err(|e: GeodesicError| ConfigError::garment(garment, e))?;
    Ok(geo.coords)
}
