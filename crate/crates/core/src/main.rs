use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use garment_sim::config::{grid, parse_grid, ConfigError, RunConfig, SceneSpec};
use garment_sim::eval::{
    bench_model, bench_one, bench_scene, check_embedding, evaluate, format_bench, format_report, load_model,
    scene_start, EvalError, EvalScenes,
};
use garment_sim::geodesic::{connected_components, geodesic_distances, mds_embed, write_geo, GeodesicError};
use garment_sim::mesh::{build_topology, compute_rest_quantities, parse_obj, Mesh, MeshKind};
use garment_sim::sim::{rollout, BodyMotion, MotionPreset, SimError};
use garment_sim::trainer::{train, TrainError, CHECKPOINT_FILE, LOG_FILE};

#[derive(Parser)]
#[command(name = "garment-sim", version, about = "Learned garment simulation driven by physics losses")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute and store the geodesic embedding of a garment mesh.
    Preprocess(PreprocessArgs),
    /// Train a model on the scenes listed in a config file.
    Train(TrainArgs),
    /// Roll a trained model out over a body animation.
    Simulate(SimulateArgs),
    /// Report per-term physics losses of a model over a list of scenes.
    Eval(EvalArgs),
    /// Time the processor, attention and full step over grid sizes.
    Bench(BenchArgs),
}

#[derive(clap::Args, Serialize)]
struct PreprocessArgs {
    /// OBJ file, or `grid:NxM` for a generated cloth.
    #[arg(long)]
    garment: String,
    #[arg(long = "embed-dim")]
    embed_dim: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also store the geodesic distance matrix.
    #[arg(long = "keep-distances")]
    keep_distances: bool,
    /// Seed for the random MDS start (used with --random-init).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "random-init")]
    random_init: bool,
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Run config supplying mesh, density and MDS defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many iterations.
    #[arg(long = "log-every", default_value_t = 100)]
    log_every: usize,
}

#[derive(clap::Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// OBJ file, or `grid:NxM`.
    #[arg(long)]
    garment: String,
    /// Embedding file; defaults to the OBJ path with a `.geo` extension.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// static_sphere, translating_capsule or swinging_capsule.
    #[arg(long)]
    body: String,
    #[arg(long, default_value_t = 0.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.0)]
    frequency: f64,
    /// Seed of the body animation phase.
    #[arg(long, alias = "body-seed", default_value_t = 0)]
    seed: u64,
    /// Garment rotation about +Y, radians.
    #[arg(long, default_value_t = 0.0)]
    yaw: f64,
    #[arg(long)]
    frames: usize,
    /// Time step, s; defaults to the checkpoint's.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// TOML file with `frames` and a `[[scenes]]` list.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(clap::Args, Serialize)]
struct BenchArgs {
    /// Comma-separated approximate vertex counts.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated processor depths; defaults to the model's.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Seed for the weights of models not taken from the checkpoint.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad input rather than a failure while running.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    fn config(e: &ConfigError) -> bool {
        match e {
            ConfigError::Parse(_) | ConfigError::Validation(_) | ConfigError::MissingEmbedding { .. } => true,
            ConfigError::Garment { source, .. } => {
                source.downcast_ref::<GeodesicError>().is_some_and(geodesic)
                    || source.downcast_ref::<SimError>().is_some_and(sim)
            }
            ConfigError::Io { .. } => false,
        }
    }
    fn geodesic(e: &GeodesicError) -> bool {
        matches!(e, GeodesicError::Disconnected { .. } | GeodesicError::Validation(_))
    }
    fn sim(e: &SimError) -> bool {
        matches!(e, SimError::EmbedWidth { .. } | SimError::Embedding { .. } | SimError::UnknownPreset(_))
    }
    err.chain().any(|c| {
        c.is::<Invalid>()
            || c.downcast_ref::<ConfigError>().is_some_and(config)
            || c.downcast_ref::<GeodesicError>().is_some_and(geodesic)
            || c.downcast_ref::<SimError>().is_some_and(sim)
            || matches!(c.downcast_ref::<EvalError>(), Some(EvalError::Config(e)) if config(e))
            || matches!(c.downcast_ref::<EvalError>(), Some(EvalError::Sim(e)) if sim(e))
            || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Sim(e)) if sim(e))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Preprocess(a) => preprocess(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}

fn echo(title: &str, toml_text: &str) {
    println!("# effective {title} config");
    print!("{toml_text}");
    if !toml_text.ends_with('\n') {
        println!();
    }
    println!();
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    match path {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((cfg, base))
        }
        None => Ok((RunConfig::default(), PathBuf::from("."))),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(n) = a.max_iters {
        cfg.geodesic.max_iters = n;
    }
    if let Some(t) = a.tol {
        cfg.geodesic.tol = t;
    }
    cfg.geodesic.seed = a.seed;
    cfg.geodesic.random_init |= a.random_init;
    echo("preprocess", &toml::to_string(&a).expect("args serialize"));

    let mesh = garment_mesh(&cfg, &a.garment)?;
    let topo = build_topology(&mesh);
    eprintln!(
        "{}: {} vertices, {} edges, {} boundary edges, {} non-manifold edges",
        a.garment,
        mesh.vertex_count(),
        topo.edges.len(),
        topo.boundary_edges,
        topo.non_manifold_edges
    );
    let n = mesh.vertex_count();
    if a.embed_dim == 0 || a.embed_dim > n {
        bail!(invalid(format!("--embed-dim must lie in 1..={n} for this mesh, got {}", a.embed_dim)));
    }
    let comps = connected_components(&topo);
    if comps.len() > 1 {
        let sizes: Vec<String> = comps.iter().map(|c| format!("{} (from vertex {})", c.len(), c[0])).collect();
        bail!(invalid(format!(
            "mesh is disconnected into {} components of sizes {}",
            comps.len(),
            sizes.join(", ")
        )));
    }
    let rest = compute_rest_quantities(&mesh, &topo, cfg.physics.density)?;
    let dist = geodesic_distances(&topo, &rest)?;
    let emb = mds_embed(&dist, &cfg.geodesic.options(a.embed_dim))?;

    let mut buf = Vec::new();
    write_geo(&mut buf, &emb, a.keep_distances.then_some(&dist))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_file(&a.out, buf)?;
    println!("stress {:.6e}", emb.final_stress);
    println!("iterations {}", emb.iterations());
    Ok(())
}

fn garment_mesh(cfg: &RunConfig, spec: &str) -> Result<Mesh> {
    if let Some(dims) = spec.strip_prefix("grid:") {
        let (nx, nz) = parse_grid(dims).ok_or_else(|| invalid(format!("`{spec}`: expected grid:NxM with N, M >= 2")))?;
        return Ok(grid(nx, nz, cfg.mesh.grid_size));
    }
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
    Ok(parse_obj(&text, MeshKind::Garment).with_context(|| format!("parsing {spec}"))?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut cfg, base) = load_config(a.config.as_deref())?;
    if let Some(n) = a.iters {
        cfg.trainer.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.trainer.seed = s;
    }
    cfg.validate()?;
    let text = cfg.to_toml();
    echo("train", &text);

    let scenes = cfg.load_scenes(&cfg.trainer.scenes, &base)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("config.toml"), &text)?;

    let every = a.log_every.max(1);
    let total = cfg.trainer.iterations;
    let outcome = train(&cfg, &scenes, Some(&a.out), |r| {
        if r.iteration % every == 0 || r.iteration == total {
            eprintln!(
                "iter {:>6}/{total}  total {:>12.5e}  stretch {:.3e}  collision {:.3e}  gravity {:.3e}  {:.1}s",
                r.iteration, r.total, r.stretch, r.collision, r.gravity, r.wall_time
            );
        }
    })?;
    println!(
        "wrote {} and {} ({} iterations)",
        a.out.join(CHECKPOINT_FILE).display(),
        a.out.join(LOG_FILE).display(),
        outcome.log.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateEcho<'a> {
    simulate: &'a SimulateArgs,
    run: &'a RunConfig,
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let (model, mut cfg, _) = load_model(&a.ckpt)?;
    let preset: MotionPreset = a.body.parse()?;
    if a.frames == 0 {
        bail!(invalid("--frames must be >= 1"));
    }
    if let Some(dt) = a.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            bail!(invalid(format!("--dt must be > 0, got {dt}")));
        }
        cfg.physics.dt = dt;
    }
    let text = toml::to_string(&SimulateEcho { simulate: &a, run: &cfg }).expect("config serializes");
    echo("simulate", &text);

    let motion = BodyMotion::new(preset, a.amplitude, a.frequency, a.seed);
    let spec = SceneSpec {
        garment: a.garment.clone(),
        embedding: a.embedding.clone(),
        body: motion,
        yaw: a.yaw,
    };
    let scene = cfg
        .load_scenes(std::slice::from_ref(&spec), Path::new("."))?
        .pop()
        .expect("one scene per spec");
    check_embedding(&model, &scene.garment)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("config.toml"), &text)?;
    let start = scene_start(&cfg, &scene);
    let r = rollout(
        &model,
        &scene.garment,
        &scene.body,
        &start,
        &cfg.physics,
        cfg.mesh.radius_factor,
        a.frames,
        Some(&a.out),
    )?;
    let worst = r.metrics.iter().map(|m| m.max_penetration).fold(0.0, f64::max);
    println!(
        "{} frames to {}; mean total {:.6e}; max penetration {:.4e} m",
        r.metrics.len(),
        a.out.display(),
        r.mean_losses().total,
        worst
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, cfg, _) = load_model(&a.ckpt)?;
    let text = std::fs::read_to_string(&a.scenes).with_context(|| format!("reading {}", a.scenes.display()))?;
    let mut list: EvalScenes = toml::from_str(&text).map_err(ConfigError::from)?;
    if let Some(f) = a.frames {
        list.frames = f;
    }
    if list.frames == 0 {
        bail!(invalid("frames must be >= 1"));
    }
    echo("eval", &format!("{}\n{}", toml::to_string(&list).expect("scenes serialize"), cfg.to_toml()));

    let base = a.scenes.parent().map(Path::to_path_buf).unwrap_or_default();
    let scenes = cfg.load_scenes(&list.scenes, &base)?;
    for s in &scenes {
        check_embedding(&model, &s.garment)?;
    }
    let rows = evaluate(&model, &cfg, &scenes, &list.scenes, list.frames)?;
    let report = format_report(&rows, &cfg.physics.weights, list.frames);
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_file(&a.report, &report)?;
    print!("{report}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.sizes.iter().any(|&n| n < 4) {
        bail!(invalid("--sizes entries must be >= 4"));
    }
    let (ckpt, cfg) = match &a.ckpt {
        Some(p) => {
            let (m, c, _) = load_model(p)?;
            (Some(m), c)
        }
        None => (None, RunConfig::default()),
    };
    let layers = if a.layers.is_empty() {
        vec![cfg.model.lsdmp_layers]
    } else {
        a.layers.clone()
    };
    if layers.contains(&0) {
        bail!(invalid("--layers entries must be >= 1"));
    }
    echo("bench", &format!("{}\n[model]\n{}", toml::to_string(&a).expect("args serialize"), toml::to_string(&cfg.model).expect("model serializes")));

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let rows = pool.install(|| -> Result<Vec<_>> {
        let mut rows = Vec::new();
        for &l in &layers {
            let model = bench_model(&cfg.model, ckpt.as_ref(), l, a.seed)?;
            for &n in &a.sizes {
                let scene = bench_scene(&cfg, n, cfg.model.embed_dim)?;
                rows.push(bench_one(&model, &cfg, &scene, a.repeats)?);
            }
        }
        Ok(rows)
    })?;
    let table = format_bench(&rows);
    print!("{table}");
    if let Some(p) = &a.out {
        let mut f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        f.write_all(table.as_bytes())?;
    }
    Ok(())
}
