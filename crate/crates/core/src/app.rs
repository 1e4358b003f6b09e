//! Run configuration, artifact layout and the command implementations
//! behind the `dualsds` binary.
//!
//! A run config is TOML with five optional sections:
//!
//! ```toml
//! [run]
//! profile = "smoke"        # "smoke" or "full"; supplies every default below
//! snapshot_every = 50      # default 50 for smoke, 500 for full
//!
//! [distill]                # any DistillationConfig key, nested tables allowed
//! total_steps = 300
//! lambda_i = 1.0
//!
//! [oracle]
//! pathology = "hue_drift"  # omit for the clean multi-view oracle
//! amplitude = 90.0         # omit for the pathology's standard amplitude
//!
//! [eval]
//! held_out_poses = 4
//! resolution = 32
//!
//! [mesh]
//! threshold = 2.5
//! resolution = 128
//! ```
//!
//! Unknown keys anywhere are errors. A run directory holds
//!
//! ```text
//! config.toml              resolved config echo
//! manifest.json            RunManifest
//! metrics.json             MetricsReport
//! snapshots/step_NNNNNN.png
//! checkpoints/step_NNNNNN.ckpt
//! checkpoints/final.ckpt
//! mesh.obj, mesh.png       when the final field has a writable surface
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::checkpoint;
use crate::distill::{held_out_poses, run, DistillationConfig, RunSink, Scores, StepReport};
use crate::error::{Error, Result};
use crate::eval::{eval_cross_view_consistency, eval_density_iou, eval_psnr, mean_psnr};
use crate::field::{RadianceField, VolumeSource};
use crate::image::Image;
use crate::mesh::{self, TriangleMesh};
use crate::render::{render, QuadratureConfig, Sampling};
use crate::scene::SyntheticScene;
use crate::scores::{
    GroundTruth, GtMultiView, MultiViewScore, NovelViewOracle, Pathology, PathologyKind,
    PerturbedMultiView, GT_SAMPLES,
};

/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_ENV: &str = "DUALSDS_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
    pub const EMPTY_MESH: i32 = 4;
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Smoke,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected smoke or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub profile: Profile,
    /// Steps between snapshots; the profile decides when unset.
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub pathology: Option<PathologyKind>,
    pub amplitude: Option<f64>,
}

impl OracleConfig {
    pub fn pathology(&self) -> Option<Pathology> {
        self.pathology.map(|kind| {
            let mut p = Pathology::standard(kind);
            if let Some(a) = self.amplitude {
                p.amplitude = a;
            }
            p
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub held_out_poses: usize,
    /// Square render size for PSNR, consistency and snapshots.
    pub resolution: usize,
    pub iou_resolution: usize,
    pub iou_threshold: f64,
    /// Azimuth offset from each held-out pose to its consistency partner.
    pub pair_offset_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out_poses: 4,
            resolution: 32,
            iou_resolution: 32,
            iou_threshold: 1.0,
            pair_offset_deg: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub threshold: f64,
    pub resolution: usize,
    /// Side of the front-view PNG.
    pub image_size: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            threshold: mesh::DEFAULT_THRESHOLD,
            resolution: mesh::DEFAULT_RESOLUTION,
            image_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub distill: DistillationConfig,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
    pub mesh: MeshConfig,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lambda_t: Option<f64>,
    pub lambda_i: Option<f64>,
    pub gamma_text: Option<f64>,
    pub gamma_image: Option<f64>,
    pub snapshot_every: Option<usize>,
    pub pathology: Option<PathologyKind>,
    pub amplitude: Option<f64>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let distill = match profile {
            Profile::Smoke => DistillationConfig::smoke(),
            Profile::Full => DistillationConfig::default(),
        };
        Self {
            run: RunSection {
                profile,
                snapshot_every: None,
            },
            distill,
            ..Self::default()
        }
    }

    /// Parses a config document. Keys left out take the chosen profile's
    /// values. Errors carry `path` and, for syntax and key errors, the line.
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        // Strict pass first: it reports unknown keys and type errors with
        // their line numbers.
        toml::from_str::<RunConfig>(text).map_err(|e| parse_err(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let profile = table
            .get("run")
            .and_then(|r| r.get("profile"))
            .and_then(|p| p.as_str())
            .map(Profile::from_str)
            .transpose()
            .map_err(|e| parse_err(e.to_string()))?
            .unwrap_or_default();
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| parse_err(e.to_string()))?;
        merge(&mut merged, table);
        let config: RunConfig = merged.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        config.validate().map_err(|e| parse_err(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        if self.eval.held_out_poses == 0 || self.eval.resolution == 0 {
            return Err(Error::Config("eval needs at least one pose and a positive resolution".into()));
        }
        if self.eval.iou_resolution < 16 {
            return Err(Error::Config("eval.iou_resolution must be at least 16".into()));
        }
        if !(self.eval.iou_threshold > 0.0) || !(self.mesh.threshold > 0.0) {
            return Err(Error::Config("density thresholds must be positive".into()));
        }
        if self.mesh.resolution < 8 || self.mesh.image_size == 0 {
            return Err(Error::Config("mesh.resolution must be at least 8".into()));
        }
        if let Some(a) = self.oracle.amplitude {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config("oracle.amplitude must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = o.profile {
            if p != self.run.profile {
                let mut fresh = Self::for_profile(p);
                fresh.oracle = self.oracle;
                fresh.eval = self.eval;
                fresh.mesh = self.mesh;
                *self = fresh;
            }
        }
        let d = &mut self.distill;
        if let Some(v) = o.seed {
            d.seed = v;
        }
        if let Some(v) = o.steps {
            d.total_steps = v;
        }
        if let Some(v) = o.lambda_t {
            d.lambda_t = v;
        }
        if let Some(v) = o.lambda_i {
            d.lambda_i = v;
        }
        if let Some(v) = o.gamma_text {
            d.gamma_text = v;
        }
        if let Some(v) = o.gamma_image {
            d.gamma_image = v;
        }
        if let Some(v) = o.snapshot_every {
            self.run.snapshot_every = Some(v);
        }
        if let Some(v) = o.pathology {
            self.oracle.pathology = Some(v);
        }
        if let Some(v) = o.amplitude {
            self.oracle.amplitude = Some(v);
        }
        self.validate()
    }

    pub fn snapshot_every(&self) -> usize {
        self.run.snapshot_every.unwrap_or(match self.run.profile {
            Profile::Smoke => 50,
            Profile::Full => 500,
        })
    }

    /// Text-path oracle for this config.
    pub fn text_oracle(&self, gt: Arc<GroundTruth>) -> Box<dyn MultiViewScore> {
        match self.oracle.pathology() {
            Some(p) => Box::new(PerturbedMultiView::new(gt, p)),
            None => Box::new(GtMultiView::new(gt)),
        }
    }

    pub fn eval_poses(&self) -> Result<Vec<CameraPose>> {
        held_out_poses(&self.distill, self.eval.held_out_poses, self.eval.resolution)
    }

    /// Each held-out pose paired with the same pose rotated by the pair offset.
    pub fn consistency_pairs(&self) -> Result<Vec<(CameraPose, CameraPose)>> {
        self.eval_poses()?
            .into_iter()
            .map(|p| {
                let partner = CameraPose::orbit(
                    p.azimuth_deg() + self.eval.pair_offset_deg,
                    p.elevation_deg(),
                    p.position.norm(),
                    p.fov_deg,
                    p.width,
                    p.height,
                )?;
                Ok((p, partner))
            })
            .collect()
    }
}

/// Per-pose PSNR; `db` is `None` when the render matched exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrEntry {
    pub db: Option<f64>,
    pub exact_match: bool,
}

impl PsnrEntry {
    pub fn new(v: f64) -> Self {
        if v.is_finite() {
            Self {
                db: Some(v),
                exact_match: false,
            }
        } else {
            Self {
                db: None,
                exact_match: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub step: usize,
    pub text: f64,
    pub image: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_pose_psnr: Vec<PsnrEntry>,
    /// Mean over finite entries; `None` when every pose matched exactly.
    pub mean_psnr: Option<f64>,
    pub density_iou: f64,
    pub consistency: f64,
    pub residuals: Vec<ResidualPoint>,
}

pub fn compute_metrics<S: VolumeSource + ?Sized>(
    source: &S,
    gt: &GroundTruth,
    config: &RunConfig,
    reports: &[StepReport],
) -> Result<MetricsReport> {
    let psnr = eval_psnr(source, gt, &config.eval_poses()?)?;
    let mean = mean_psnr(&psnr);
    Ok(MetricsReport {
        per_pose_psnr: psnr.iter().map(|v| PsnrEntry::new(*v)).collect(),
        mean_psnr: mean.is_finite().then_some(mean),
        density_iou: eval_density_iou(source, gt, config.eval.iou_resolution, config.eval.iou_threshold)?,
        consistency: eval_cross_view_consistency(source, gt, &config.consistency_pairs()?)?.score,
        residuals: reports
            .iter()
            .map(|r| ResidualPoint {
                step: r.step,
                text: r.sds_text_residual_norm,
                image: r.sds_image_residual_norm,
                grad_norm: r.grad_norm,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub error: Option<String>,
    pub seed: u64,
    pub scene: PathBuf,
    pub config: RunConfig,
    pub config_echo: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub snapshots: Vec<PathBuf>,
    pub mesh: Option<PathBuf>,
    pub mesh_image: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders `poses` with the field's own quadrature and tiles them in a row.
pub fn snapshot_image<S: VolumeSource + ?Sized>(source: &S, poses: &[CameraPose]) -> Result<Image> {
    let quad = QuadratureConfig::with_samples(GT_SAMPLES);
    let views = poses
        .iter()
        .map(|p| Ok(render(source, p, &quad, Sampling::Midpoint, false)?.rgb))
        .collect::<Result<Vec<_>>>()?;
    Image::tile(&views, views.len()).ok_or_else(|| Error::Config("no snapshot poses".into()))
}

struct DiskSink<'a> {
    dir: &'a Path,
    poses: Vec<CameraPose>,
    reports: Vec<StepReport>,
    snapshots: Vec<PathBuf>,
    checkpoints: Vec<PathBuf>,
}

impl RunSink for DiskSink<'_> {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        log::info!(
            "step {} text {:.4} image {:.4} grad {:.3}",
            report.step,
            report.sds_text_residual_norm,
            report.sds_image_residual_norm,
            report.grad_norm
        );
        self.reports.push(report.clone());
        Ok(())
    }

    fn on_snapshot(&mut self, step: usize, field: &RadianceField) -> Result<()> {
        let png = self.dir.join(format!("snapshots/step_{step:06}.png"));
        snapshot_image(field, &self.poses)?.save_png(&png)?;
        let ckpt = self.dir.join(format!("checkpoints/step_{step:06}.ckpt"));
        checkpoint::save(field, &ckpt)?;
        self.snapshots.push(png);
        self.checkpoints.push(ckpt);
        Ok(())
    }
}

/// Extracts, normalizes and writes the mesh and its front view. Returns the
/// OBJ and PNG paths, or `EmptyMesh` when nothing crosses the threshold.
pub fn export_mesh<S: VolumeSource + ?Sized>(
    source: &S,
    config: &MeshConfig,
    obj: &Path,
) -> Result<(TriangleMesh, PathBuf)> {
    let raw = mesh::extract_mesh(source, config.resolution, config.threshold)?;
    if raw.is_empty() {
        return Err(Error::EmptyMesh(format!(
            "no surface at density threshold {}",
            config.threshold
        )));
    }
    let normalized = mesh::normalize_mesh(&raw)?;
    mesh::write_obj(&normalized, obj)?;
    let png = obj.with_extension("png");
    mesh::capture_front_view_mesh(&normalized, config.image_size, config.image_size)?.save_png(&png)?;
    Ok((normalized, png))
}

/// A full distillation run into `out_dir`. The manifest is written before
/// the first step and again at the end, marked failed if the run aborts.
pub fn cmd_distill(config: &RunConfig, scene_path: &Path, out_dir: &Path) -> Result<RunManifest> {
    let scene = SyntheticScene::load(scene_path)?;
    create_dir(&out_dir.join("snapshots"))?;
    create_dir(&out_dir.join("checkpoints"))?;
    let echo = out_dir.join("config.toml");
    std::fs::write(&echo, config.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = RunManifest {
        status: RunStatus::Running,
        error: None,
        seed: config.distill.seed,
        scene: scene_path.to_path_buf(),
        config: config.clone(),
        config_echo: echo,
        checkpoints: Vec::new(),
        final_checkpoint: None,
        snapshots: Vec::new(),
        mesh: None,
        mesh_image: None,
        metrics: None,
    };
    manifest.save(&manifest_path)?;

    let result = distill_into(config, scene, out_dir, &mut manifest);
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Completed;
            manifest.save(&manifest_path)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.save(&manifest_path)?;
            Err(e)
        }
    }
}

fn distill_into(
    config: &RunConfig,
    scene: SyntheticScene,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let gt = Arc::new(GroundTruth::new(scene));
    let text = config.text_oracle(gt.clone());
    let image = NovelViewOracle::new(gt.clone());
    let scores = Scores {
        text: text.as_ref(),
        image: &image,
    };
    let mut sink = DiskSink {
        dir: out_dir,
        poses: config.eval_poses()?,
        reports: Vec::new(),
        snapshots: Vec::new(),
        checkpoints: Vec::new(),
    };
    let outcome = run(&config.distill, &scores, config.snapshot_every(), &mut [&mut sink]);
    manifest.snapshots = std::mem::take(&mut sink.snapshots);
    manifest.checkpoints = std::mem::take(&mut sink.checkpoints);
    let field = outcome?;

    let final_ckpt = out_dir.join("checkpoints/final.ckpt");
    checkpoint::save(&field, &final_ckpt)?;
    manifest.final_checkpoint = Some(final_ckpt);

    let metrics = compute_metrics(&field, &gt, config, &sink.reports)?;
    let metrics_path = out_dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    manifest.metrics = Some(metrics_path);

    let obj = out_dir.join("mesh.obj");
    match export_mesh(&field, &config.mesh, &obj) {
        Ok((_, png)) => {
            manifest.mesh = Some(obj);
            manifest.mesh_image = Some(png);
        }
        Err(e @ (Error::EmptyMesh(_) | Error::FaceCap { .. })) => {
            log::warn!("mesh not written: {e}");
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Which metric a pathology is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    /// Density IoU, higher is better.
    Iou,
    /// Cross-view inconsistency, lower is better.
    Consistency,
    /// Held-out PSNR, higher is better.
    Psnr,
}

impl TargetMetric {
    pub fn for_pathology(kind: Option<PathologyKind>) -> Self {
        match kind {
            Some(PathologyKind::Attenuation | PathologyKind::GhostContent) => TargetMetric::Iou,
            Some(PathologyKind::HueDrift) => TargetMetric::Consistency,
            None => TargetMetric::Psnr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub lambda_i: f64,
    pub mean_psnr: Option<f64>,
    pub density_iou: f64,
    pub consistency: f64,
    #[serde(skip)]
    pub view: Option<Image>,
}

impl CellMetrics {
    pub fn value(&self, metric: TargetMetric) -> f64 {
        match metric {
            TargetMetric::Iou => self.density_iou,
            TargetMetric::Consistency => self.consistency,
            TargetMetric::Psnr => self.mean_psnr.unwrap_or(f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pathology: Option<PathologyKind>,
    pub seed: u64,
    pub target: TargetMetric,
    pub without_image: CellMetrics,
    pub with_image: CellMetrics,
}

impl AblationRow {
    /// Whether the image path improved the target metric.
    pub fn improved(&self) -> bool {
        let (a, b) = (
            self.without_image.value(self.target),
            self.with_image.value(self.target),
        );
        match self.target {
            TargetMetric::Iou | TargetMetric::Psnr => b > a,
            TargetMetric::Consistency => b < a,
        }
    }

    pub fn label(&self) -> &'static str {
        self.pathology.map_or("clean", PathologyKind::name)
    }
}

/// One distillation run and its metrics, with the oracle and lambda_i
/// given here rather than in `config`.
pub fn ablation_cell(
    config: &RunConfig,
    gt: &Arc<GroundTruth>,
    pathology: Option<PathologyKind>,
    lambda_i: f64,
) -> Result<CellMetrics> {
    let mut c = config.clone();
    c.distill.lambda_i = lambda_i;
    c.oracle.pathology = pathology;
    let text = c.text_oracle(gt.clone());
    let image = NovelViewOracle::new(gt.clone());
    let field = run(
        &c.distill,
        &Scores {
            text: text.as_ref(),
            image: &image,
        },
        0,
        &mut [],
    )?;
    let m = compute_metrics(&field, gt, &c, &[])?;
    let poses = c.eval_poses()?;
    Ok(CellMetrics {
        lambda_i,
        mean_psnr: m.mean_psnr,
        density_iou: m.density_iou,
        consistency: m.consistency,
        view: Some(snapshot_image(&field, &poses[..1])?),
    })
}

/// Runs `lambda_i = 0` and `lambda_i = 1` with the same seed.
pub fn ablation_row(
    config: &RunConfig,
    gt: &Arc<GroundTruth>,
    pathology: Option<PathologyKind>,
    parallel: bool,
) -> Result<AblationRow> {
    let (without_image, with_image) = if parallel {
        let (a, b) = rayon::join(
            || ablation_cell(config, gt, pathology, 0.0),
            || ablation_cell(config, gt, pathology, 1.0),
        );
        (a?, b?)
    } else {
        (
            ablation_cell(config, gt, pathology, 0.0)?,
            ablation_cell(config, gt, pathology, 1.0)?,
        )
    };
    Ok(AblationRow {
        pathology,
        seed: config.distill.seed,
        target: TargetMetric::for_pathology(pathology),
        without_image,
        with_image,
    })
}

/// The clean-oracle row followed by one row per pathology.
pub fn run_ablation(
    config: &RunConfig,
    gt: &Arc<GroundTruth>,
    pathologies: &[PathologyKind],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let rows: Vec<Option<PathologyKind>> =
        std::iter::once(None).chain(pathologies.iter().copied().map(Some)).collect();
    if parallel {
        rows.par_iter().map(|p| ablation_row(config, gt, *p, true)).collect()
    } else {
        rows.iter().map(|p| ablation_row(config, gt, *p, false)).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("inf".into(), |v| format!("{v:.2}"))
}

/// Markdown comparison table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| pathology | target | lambda_i | PSNR (dB) | IoU | inconsistency | improved |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for row in rows {
        for cell in [&row.without_image, &row.with_image] {
            let improved = if cell.lambda_i > 0.0 {
                if row.improved() { "yes" } else { "no" }
            } else {
                ""
            };
            writeln!(
                out,
                "| {} | {:?} | {} | {} | {:.3} | {:.4} | {} |",
                row.label(),
                row.target,
                cell.lambda_i,
                fmt_opt(cell.mean_psnr),
                cell.density_iou,
                cell.consistency,
                improved
            )
            .expect("writing to a String");
        }
    }
    out
}

/// Image grid: one row per pathology, columns for lambda_i = 0, lambda_i = 1
/// and the ground truth, all from the first held-out pose.
pub fn ablation_grid(rows: &[AblationRow], gt: &GroundTruth, config: &RunConfig) -> Result<Image> {
    let reference = snapshot_image(gt.scene(), &config.eval_poses()?[..1])?;
    let mut tiles = Vec::new();
    for row in rows {
        for cell in [&row.without_image, &row.with_image] {
            tiles.push(cell.view.clone().unwrap_or_else(|| Image::filled(reference.width, reference.height, [1.0; 3])));
        }
        tiles.push(reference.clone());
    }
    Image::tile(&tiles, 3).ok_or_else(|| Error::Config("ablation produced no rows".into()))
}

/// Runs the ablation and writes `table.md`, `ablation.json` and `grid.png`.
pub fn cmd_ablation(
    config: &RunConfig,
    scene_path: &Path,
    pathologies: &[PathologyKind],
    parallel: bool,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let gt = Arc::new(GroundTruth::new(SyntheticScene::load(scene_path)?));
    create_dir(out_dir)?;
    let echo = out_dir.join("config.toml");
    std::fs::write(&echo, config.to_toml()).map_err(|e| Error::io(&echo, e))?;
    let rows = run_ablation(config, &gt, pathologies, parallel)?;
    let table = ablation_table(&rows);
    let table_path = out_dir.join("table.md");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    write_json(&out_dir.join("ablation.json"), &rows)?;
    ablation_grid(&rows, &gt, config)?.save_png(&out_dir.join("grid.png"))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_layers_over_profile() {
        let c = RunConfig::from_toml_str("[distill]\nlambda_i = 0.0\n", Path::new("c.toml")).unwrap();
        assert_eq!(c.distill.lambda_i, 0.0);
        assert_eq!(c.distill.total_steps, 300);
        assert_eq!(c.snapshot_every(), 50);
        let full = RunConfig::from_toml_str("[run]\nprofile = \"full\"\n", Path::new("c.toml")).unwrap();
        assert_eq!(full.distill, DistillationConfig::default());
        assert_eq!(full.snapshot_every(), 500);
        let nested = "[distill.field]\nhidden_width = 8\n";
        let c = RunConfig::from_toml_str(nested, Path::new("c.toml")).unwrap();
        assert_eq!(c.distill.field.hidden_width, 8);
        assert_eq!(c.distill.field.grid_resolution, 32);
    }

    #[test]
    fn config_errors_name_path_and_line() {
        let err = RunConfig::from_toml_str("[distill]\nlambda_i = 1.0\nlamda_t = 2.0\n", Path::new("run.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("run.toml") && err.contains("line 3"), "{err}");
        let err = RunConfig::from_toml_str("[oracle]\npathology = \"blur\"\n", Path::new("o.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("o.toml") && err.contains("line 2"), "{err}");
        assert!(RunConfig::from_toml_str("[distill]\nlambda_i = -1.0\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn config_echo_round_trips() {
        let mut c = RunConfig::for_profile(Profile::Smoke);
        c.apply(&Overrides {
            lambda_i: Some(0.0),
            pathology: Some(PathologyKind::HueDrift),
            ..Overrides::default()
        })
        .unwrap();
        let echo = c.to_toml();
        assert!(echo.contains("lambda_i = 0.0"), "{echo}");
        assert_eq!(RunConfig::from_toml_str(&echo, Path::new("echo.toml")).unwrap(), c);
    }

    #[test]
    fn improvement_direction_follows_the_metric() {
        let cell = |iou: f64, cons: f64| CellMetrics {
            lambda_i: 0.0,
            mean_psnr: Some(10.0),
            density_iou: iou,
            consistency: cons,
            view: None,
        };
        let row = |p, a, b| AblationRow {
            pathology: p,
            seed: 0,
            target: TargetMetric::for_pathology(p),
            without_image: a,
            with_image: b,
        };
        assert!(row(Some(PathologyKind::Attenuation), cell(0.2, 0.1), cell(0.3, 0.2)).improved());
        assert!(!row(Some(PathologyKind::HueDrift), cell(0.2, 0.1), cell(0.3, 0.2)).improved());
        assert!(row(Some(PathologyKind::HueDrift), cell(0.2, 0.1), cell(0.1, 0.05)).improved());
    }
}
