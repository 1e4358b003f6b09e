//! `dualsds` command-line interface.
//!
//! Exit codes: 0 success, 2 unreadable or invalid input (config, scene,
//! checkpoint), 3 runtime failure, 4 empty mesh.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualsds::app::{self, exit, Overrides, Profile, RunConfig};
use dualsds::camera::CameraPose;
use dualsds::checkpoint;
use dualsds::field::RadianceField;
use dualsds::image::Image;
use dualsds::render::{render, QuadratureConfig, Sampling};
use dualsds::scene::SyntheticScene;
use dualsds::scores::{GroundTruth, PathologyKind};
use dualsds::{Error, Result};

#[derive(Parser)]
#[command(name = "dualsds", version, about = "Dual score distillation of radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a field against a scene's oracles.
    Distill(DistillArgs),
    /// Extract, normalize and write a mesh plus its front view.
    Mesh(MeshArgs),
    /// Evaluate a checkpoint against a scene.
    Eval(EvalArgs),
    /// Compare lambda_i = 0 and 1 under oracle pathologies.
    Ablation(AblationArgs),
    /// Render a checkpoint from one orbit pose.
    RenderSnapshot(SnapshotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (TOML). Without it the profile defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    gamma_text: Option<f64>,
    #[arg(long)]
    gamma_image: Option<f64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, pathology: Option<&str>, amplitude: Option<f64>) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::for_profile(Profile::Smoke),
        };
        config.apply(&Overrides {
            profile: self.profile.as_deref().map(str::parse::<Profile>).transpose()?,
            seed: self.seed,
            steps: self.steps,
            lambda_t: self.lambda_t,
            lambda_i: self.lambda_i,
            gamma_text: self.gamma_text,
            gamma_image: self.gamma_image,
            snapshot_every: self.snapshot_every,
            pathology: pathology.map(str::parse::<PathologyKind>).transpose()?,
            amplitude,
        })?;
        Ok(config)
    }
}

#[derive(Args)]
struct DistillArgs {
    /// Scene file (TOML).
    #[arg(long)]
    scene: PathBuf,
    /// Run directory; defaults to `$DUALSDS_OUTPUT_ROOT/<scene>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Text-path oracle pathology (hue_drift, ghost_content, attenuation).
    #[arg(long)]
    pathology: Option<String>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output OBJ; the front view is written next to it as PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = dualsds::mesh::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = dualsds::mesh::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, default_value_t = 256)]
    image_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Pathologies to run, comma separated. The clean-oracle row is always run.
    #[arg(long, value_delimiter = ',')]
    pathology: Vec<String>,
    /// Run cells concurrently.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SnapshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    azimuth: f64,
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    elevation: f64,
    #[arg(long, default_value_t = 2.2)]
    distance: f64,
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 256)]
    samples: usize,
}

/// An error with the exit code it maps to.
struct Failure(i32, Error);

trait Stage<T> {
    fn input(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn input(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure(exit::CONFIG, e))
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| match e {
            Error::EmptyMesh(_) => Failure(exit::EMPTY_MESH, e),
            e => Failure(exit::RUNTIME, e),
        })
    }
}

fn default_run_dir(kind: &str, scene: &Path, seed: u64) -> PathBuf {
    let stem = scene.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    app::output_root().join(format!("{kind}-{stem}-seed{seed}"))
}

fn load_field(path: &Path) -> std::result::Result<RadianceField, Failure> {
    checkpoint::load(path).input()
}

fn distill(a: DistillArgs) -> std::result::Result<(), Failure> {
    let config = a.config.resolve(a.pathology.as_deref(), a.amplitude).input()?;
    SyntheticScene::load(&a.scene).input()?;
    let out = a
        .out
        .unwrap_or_else(|| default_run_dir("distill", &a.scene, config.distill.seed));
    log::info!("resolved config:\n{}", config.to_toml());
    let manifest = app::cmd_distill(&config, &a.scene, &out).runtime()?;
    println!("{}", out.join("manifest.json").display());
    if let Some(m) = manifest.metrics {
        println!("{}", m.display());
    }
    Ok(())
}

fn mesh(a: MeshArgs) -> std::result::Result<(), Failure> {
    let field = load_field(&a.checkpoint)?;
    let config = app::MeshConfig {
        threshold: a.threshold,
        resolution: a.resolution,
        image_size: a.image_size,
    };
    let (mesh, png) = app::export_mesh(&field, &config, &a.out).runtime()?;
    println!(
        "{} ({} vertices, {} faces)\n{}",
        a.out.display(),
        mesh.vertices.len(),
        mesh.triangles.len(),
        png.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let config = a.config.resolve(None, None).input()?;
    let scene = SyntheticScene::load(&a.scene).input()?;
    let field = load_field(&a.checkpoint)?;
    let gt = GroundTruth::new(scene);
    let metrics = app::compute_metrics(&field, &gt, &config, &[]).runtime()?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{text}\n")).map_err(|e| Failure(exit::RUNTIME, Error::Io {
            path: out.clone(),
            source: e,
        }))?;
    }
    println!("{text}");
    Ok(())
}

fn ablation(a: AblationArgs) -> std::result::Result<(), Failure> {
    let config = a.config.resolve(None, None).input()?;
    let kinds = a
        .pathology
        .iter()
        .map(|s| s.parse::<PathologyKind>())
        .collect::<Result<Vec<_>>>()
        .input()?;
    SyntheticScene::load(&a.scene).input()?;
    let out = a
        .out
        .unwrap_or_else(|| default_run_dir("ablation", &a.scene, config.distill.seed));
    let rows = app::cmd_ablation(&config, &a.scene, &kinds, a.parallel, &out).runtime()?;
    print!("{}", app::ablation_table(&rows));
    println!("{}", out.display());
    Ok(())
}

fn render_snapshot(a: SnapshotArgs) -> std::result::Result<(), Failure> {
    let field = load_field(&a.checkpoint)?;
    let pose = CameraPose::orbit(a.azimuth, a.elevation, a.distance, a.fov, a.resolution, a.resolution)
        .input()?;
    let quad = QuadratureConfig {
        samples: a.samples,
        bounding_radius: 3f64.sqrt(),
        ..QuadratureConfig::default()
    };
    let image: Image = render(&field, &pose, &quad, Sampling::Midpoint, false)
        .runtime()?
        .rgb;
    image.save_png(&a.out).runtime()?;
    println!("{}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Distill(a) => distill(a),
        Command::Mesh(a) => mesh(a),
        Command::Eval(a) => eval(a),
        Command::Ablation(a) => ablation(a),
        Command::RenderSnapshot(a) => render_snapshot(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(Failure(code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code as u8)
        }
    }
}
