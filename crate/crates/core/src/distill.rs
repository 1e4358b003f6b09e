//! Dual score distillation: the optimization loop.
//!
//! Each step renders a set of reference views and a batch of novel-view
//! pairs, asks the text-path oracle for guided predictions of the reference
//! views and the image-path oracle for guided predictions of each target
//! view (conditioned on the field's own render of the reference), and pushes
//! `w(t) (x - x_hat)` back through the renderer. The two path gradients are
//! combined as `lambda_t * g_text + lambda_i * g_image`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_novel_view_pair, sample_reference_views, CameraPose, ViewSamplingConfig};
use crate::diffusion::{forward_sample, DiffusionSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, ParamGradient, RadianceField};
use crate::image::Image;
use crate::optim::{apply_adamw_step, AdamWConfig, AdamWState};
use crate::render::{render, render_backward, QuadratureConfig, RenderedView, Sampling};
use crate::scores::{guided, ImageCondition, MultiViewScore, NovelViewScore, TextCondition};

/// Per-timestep weight applied to the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(t) = 1`.
    #[default]
    Uniform,
    /// `w(t) = 1 - alpha_bar(t)`.
    OneMinusAlphaBar,
}

impl Weighting {
    pub fn weight(self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::OneMinusAlphaBar => 1.0 - schedule.alpha_bar(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    pub total_steps: usize,
    pub seed: u64,
    pub lambda_t: f64,
    pub lambda_i: f64,
    pub gamma_text: f64,
    pub gamma_image: f64,
    /// Upper end of the timestep range at step 0 (fraction of T).
    pub t_max_start: f64,
    pub t_max_end: f64,
    pub t_min: f64,
    /// Lower end of the range at step 0; equal to `t_min` keeps it fixed.
    pub t_min_start: f64,
    pub t_anneal_steps: usize,
    pub resolution_start: usize,
    pub resolution_end: usize,
    pub resolution_switch_step: usize,
    pub batch_text_start: usize,
    pub batch_image_start: usize,
    pub batch_text_end: usize,
    pub batch_image_end: usize,
    pub batch_switch_step: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub samples_per_ray: usize,
    pub weighting: Weighting,
    pub views: ViewSamplingConfig,
    pub field: FieldConfig,
    pub optimizer: AdamWConfig,
    pub diffusion: ScheduleConfig,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            total_steps: 10_000,
            seed: 0,
            lambda_t: 1.0,
            lambda_i: 1.0,
            gamma_text: 50.0,
            gamma_image: 3.0,
            t_max_start: 0.98,
            t_max_end: 0.5,
            t_min: 0.02,
            t_min_start: 0.02,
            t_anneal_steps: 8000,
            resolution_start: 64,
            resolution_end: 256,
            resolution_switch_step: 5000,
            batch_text_start: 8,
            batch_image_start: 12,
            batch_text_end: 4,
            batch_image_end: 4,
            batch_switch_step: 5000,
            grad_clip: 10.0,
            samples_per_ray: 64,
            weighting: Weighting::Uniform,
            views: ViewSamplingConfig::default(),
            field: FieldConfig::default(),
            optimizer: AdamWConfig::default(),
            diffusion: ScheduleConfig::default(),
        }
    }
}

impl DistillationConfig {
    /// 300 steps at 32x32 with two reference views and two pairs, on a
    /// narrower field.
    pub fn smoke() -> Self {
        Self {
            total_steps: 300,
            field: FieldConfig {
                hidden_width: 16,
                ..FieldConfig::default()
            },
            resolution_start: 32,
            resolution_end: 32,
            batch_text_start: 2,
            batch_image_start: 2,
            batch_text_end: 2,
            batch_image_end: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("t_max_start", self.t_max_start)?;
        unit("t_max_end", self.t_max_end)?;
        unit("t_min", self.t_min)?;
        unit("t_min_start", self.t_min_start)?;
        if self.t_min >= self.t_max_end.min(self.t_max_start)
            || self.t_min_start >= self.t_max_start
        {
            return Err(Error::Config("t_min must stay below t_max at every step".into()));
        }
        for (name, v) in [
            ("resolution_start", self.resolution_start),
            ("resolution_end", self.resolution_end),
            ("batch_text_start", self.batch_text_start),
            ("batch_image_start", self.batch_image_start),
            ("batch_text_end", self.batch_text_end),
            ("batch_image_end", self.batch_image_end),
            ("samples_per_ray", self.samples_per_ray),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_i", self.lambda_i),
            ("gamma_text", self.gamma_text),
            ("gamma_image", self.gamma_image),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        self.views.validate()?;
        self.field.validate()?;
        self.diffusion.build()?;
        Ok(())
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        QuadratureConfig::with_samples(self.samples_per_ray)
    }
}

/// Everything the schedule prescribes for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub resolution: usize,
    pub batch_text: usize,
    pub batch_image: usize,
}

pub fn schedule_at(config: &DistillationConfig, step: usize) -> StepSchedule {
    let frac = if config.t_anneal_steps == 0 {
        1.0
    } else {
        step.min(config.t_anneal_steps) as f64 / config.t_anneal_steps as f64
    };
    let lerp = |a: f64, b: f64| a + (b - a) * frac;
    let late = |switch: usize| step >= switch;
    StepSchedule {
        t_min: lerp(config.t_min_start, config.t_min),
        t_max: lerp(config.t_max_start, config.t_max_end),
        resolution: if late(config.resolution_switch_step) {
            config.resolution_end
        } else {
            config.resolution_start
        },
        batch_text: if late(config.batch_switch_step) {
            config.batch_text_end
        } else {
            config.batch_text_start
        },
        batch_image: if late(config.batch_switch_step) {
            config.batch_image_end
        } else {
            config.batch_image_start
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    /// RMS of `x - x_hat` (unguided) over the reference views.
    pub sds_text_residual_norm: f64,
    /// RMS of `x - x_hat` (unguided) over the novel-view targets.
    pub sds_image_residual_norm: f64,
    /// Norm of the combined gradient before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub t_text: usize,
    pub schedule: StepSchedule,
}

/// Both path gradients of one step, before the lambda weights.
#[derive(Debug, Clone)]
pub struct PathGradients {
    pub text: ParamGradient,
    pub image: ParamGradient,
    pub report: StepReport,
}

/// `weight * (x - denoised)` pushed through the renderer. The denoised image
/// is a constant here: nothing flows into whatever produced it.
pub fn sds_gradient(
    field: &RadianceField,
    view: &RenderedView,
    denoised: &Image,
    weight: f64,
) -> Result<ParamGradient> {
    let mut residual = view.rgb.sub(denoised)?;
    residual.data.iter_mut().for_each(|r| *r *= weight);
    render_backward(field, view, &residual)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn check_finite(img: &Image, path: &str) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{path} path residual")))
    }
}

fn sample_t(rng: &mut impl Rng, sched: &StepSchedule, schedule: &DiffusionSchedule) -> usize {
    let frac = rng.gen_range(sched.t_min..=sched.t_max);
    schedule.timestep_index(frac)
}

/// Oracles and schedule shared by every step of a run.
pub struct Scores<'a> {
    pub text: &'a dyn MultiViewScore,
    pub image: &'a dyn NovelViewScore,
}

/// Computes the text-path and image-path gradients for `step`. Random draws
/// do not depend on the lambda weights, so runs that differ only in lambda
/// see identical cameras, timesteps and noise.
pub fn path_gradients(
    field: &RadianceField,
    config: &DistillationConfig,
    scores: &Scores,
    schedule: &DiffusionSchedule,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PathGradients> {
    let sched = schedule_at(config, step);
    let quad = config.quadrature();
    let res = sched.resolution;

    let ref_poses = sample_reference_views(rng, sched.batch_text, &config.views, res, res)?;
    let refs: Vec<RenderedView> = ref_poses
        .iter()
        .map(|p| render(field, p, &quad, Sampling::Stratified(rng.gen()), true))
        .collect::<Result<_>>()?;
    let mut text_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut image_rng = ChaCha8Rng::seed_from_u64(rng.gen());

    // text path: one shared t for the batch
    let t_text = sample_t(&mut text_rng, &sched, schedule);
    let mut text = field.zero_gradient();
    let mut text_norm = 0.0;
    if config.lambda_t != 0.0 {
        let z: Vec<Image> = refs
            .iter()
            .map(|v| {
                let n = forward_sample(schedule, &v.rgb.data, t_text, &mut text_rng)?;
                Image::from_data(res, res, n.z)
            })
            .collect::<Result<_>>()?;
        let (cond, uncond) = scores.text.denoise_both(&z, t_text, &TextCondition { poses: &ref_poses })?;
        let w = config.weighting.weight(schedule, t_text) / refs.len() as f64;
        let mut residuals = Vec::new();
        for ((view, c), u) in refs.iter().zip(&cond).zip(&uncond) {
            let target = guided(c, u, config.gamma_text)?;
            check_finite(&target, "text")?;
            residuals.extend(view.rgb.data.iter().zip(&c.data).map(|(x, c)| x - c));
            text.add_assign(&sds_gradient(field, view, &target, w)?);
        }
        text_norm = rms(residuals.into_iter());
    }

    // image path: independent t per (reference, target) pair
    let mut image = field.zero_gradient();
    let mut image_norm = 0.0;
    if config.lambda_i != 0.0 {
        let mut residuals = Vec::new();
        for _ in 0..sched.batch_image {
            let j = image_rng.gen_range(0..refs.len());
            let reference = &refs[j];
            let (target_pose, relative) =
                sample_novel_view_pair(&mut image_rng, &reference.pose, &config.views)?;
            let target = render(field, &target_pose, &quad, Sampling::Stratified(image_rng.gen()), true)?;
            let t = sample_t(&mut image_rng, &sched, schedule);
            let z = forward_sample(schedule, &target.rgb.data, t, &mut image_rng)?;
            let z = Image::from_data(res, res, z.z)?;
            let cond = ImageCondition {
                reference_view: &reference.rgb,
                reference_pose: &reference.pose,
                relative,
            };
            let (c, u) = scores.image.denoise_both(&z, t, &cond, &target_pose)?;
            let x_hat = guided(&c, &u, config.gamma_image)?;
            check_finite(&x_hat, "image")?;
            residuals.extend(target.rgb.data.iter().zip(&c.data).map(|(x, c)| x - c));
            let w = config.weighting.weight(schedule, t) / sched.batch_image as f64;
            image.add_assign(&sds_gradient(field, &target, &x_hat, w)?);
        }
        image_norm = rms(residuals.into_iter());
    }

    if !text.is_finite() {
        return Err(Error::NonFinite("text path gradient".into()));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("image path gradient".into()));
    }
    Ok(PathGradients {
        text,
        image,
        report: StepReport {
            step,
            sds_text_residual_norm: text_norm,
            sds_image_residual_norm: image_norm,
            grad_norm: 0.0,
            clipped: false,
            t_text,
            schedule: sched,
        },
    })
}

/// One step's combined gradient `lambda_t * g_text + lambda_i * g_image`.
pub fn combined_step(
    field: &RadianceField,
    config: &DistillationConfig,
    scores: &Scores,
    schedule: &DiffusionSchedule,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGradient, StepReport)> {
    let paths = path_gradients(field, config, scores, schedule, step, rng)?;
    let grad = ParamGradient::weighted_sum(config.lambda_t, &paths.text, config.lambda_i, &paths.image);
    let mut report = paths.report;
    report.grad_norm = grad.norm();
    Ok((grad, report))
}

/// Receives progress from [`run`].
pub trait RunSink {
    fn on_step(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    /// Called every `snapshot_every` steps and once after the last step.
    fn on_snapshot(&mut self, _step: usize, _field: &RadianceField) -> Result<()> {
        Ok(())
    }
}

/// Collects step reports in memory.
#[derive(Debug, Default)]
pub struct ReportLog {
    pub reports: Vec<StepReport>,
}

impl RunSink for ReportLog {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        self.reports.push(report.clone());
        Ok(())
    }
}

/// Initial field for a seed.
pub fn initial_field(config: &DistillationConfig) -> Result<RadianceField> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    RadianceField::new(config.field, &mut rng)
}

/// The full optimization loop. Deterministic for a given config and seed.
pub fn run(
    config: &DistillationConfig,
    scores: &Scores,
    snapshot_every: usize,
    sinks: &mut [&mut dyn RunSink],
) -> Result<RadianceField> {
    config.validate()?;
    let schedule = config.diffusion.build()?;
    let mut field = initial_field(config)?;
    if config.total_steps == 0 {
        return Ok(field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut state = AdamWState::new(field.param_count());
    for step in 0..config.total_steps {
        let (mut grad, mut report) = combined_step(&field, config, scores, &schedule, step, &mut rng)?;
        if config.grad_clip > 0.0 && report.grad_norm > config.grad_clip {
            grad.scale(config.grad_clip / report.grad_norm);
            report.clipped = true;
            log::debug!("step {step}: gradient norm {:.3} clipped", report.grad_norm);
        }
        apply_adamw_step(&mut field, &grad, &mut state, &config.optimizer)?;
        if !field.is_finite() {
            return Err(Error::NonFinite(format!("field parameters after step {step}")));
        }
        for sink in sinks.iter_mut() {
            sink.on_step(&report)?;
        }
        let done = step + 1;
        if (snapshot_every > 0 && done % snapshot_every == 0) || done == config.total_steps {
            for sink in sinks.iter_mut() {
                sink.on_snapshot(done, &field)?;
            }
        }
    }
    Ok(field)
}

/// Poses for held-out evaluation: evenly spaced azimuths offset from the
/// training orbit, mid elevation, mid fov.
pub fn held_out_poses(config: &DistillationConfig, count: usize, resolution: usize) -> Result<Vec<CameraPose>> {
    let v = &config.views;
    let fov = 0.5 * (v.fov_range[0] + v.fov_range[1]);
    let elevation = 0.5 * (v.elevation_range[0] + v.elevation_range[1]);
    let scale = 0.5 * (v.distance_scale_range[0] + v.distance_scale_range[1]);
    let distance = crate::camera::camera_distance(v.object_size, fov, scale);
    (0..count)
        .map(|k| {
            let az = 45.0 + k as f64 * 360.0 / count as f64;
            CameraPose::orbit(az, elevation, distance, fov, resolution, resolution)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SyntheticScene;
    use crate::scores::{GroundTruth, GtMultiView, NovelViewOracle};
    use std::sync::Arc;

    #[test]
    fn schedule_matches_pinned_values() {
        let c = DistillationConfig::default();
        assert_eq!(
            schedule_at(&c, 0),
            StepSchedule {
                t_min: 0.02,
                t_max: 0.98,
                resolution: 64,
                batch_text: 8,
                batch_image: 12
            }
        );
        assert!((schedule_at(&c, 4000).t_max - 0.74).abs() < 1e-12);
        assert_eq!(
            schedule_at(&c, 9000),
            StepSchedule {
                t_min: 0.02,
                t_max: 0.5,
                resolution: 256,
                batch_text: 4,
                batch_image: 4
            }
        );
        let mut prev = schedule_at(&c, 0);
        for step in (0..10_000).step_by(50) {
            let s = schedule_at(&c, step);
            assert!(s.t_max <= prev.t_max && s.resolution >= prev.resolution);
            assert!(s.t_min < s.t_max);
            prev = s;
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = DistillationConfig::default();
        c.t_min = 0.6;
        assert!(c.validate().is_err());
        let mut c = DistillationConfig::default();
        c.batch_image_end = 0;
        assert!(c.validate().is_err());
        assert!(DistillationConfig::smoke().validate().is_ok());
    }

    fn tiny_config() -> DistillationConfig {
        DistillationConfig {
            total_steps: 2,
            resolution_start: 8,
            resolution_end: 8,
            batch_text_start: 2,
            batch_image_start: 2,
            samples_per_ray: 16,
            field: FieldConfig {
                grid_resolution: 6,
                feature_dim: 2,
                hidden_width: 4,
                direction_bands: 1,
            },
            ..DistillationConfig::default()
        }
    }

    #[test]
    fn zero_lambdas_leave_the_field_unchanged() {
        let gt = Arc::new(GroundTruth::new(SyntheticScene::sphere()));
        let (text, image) = (GtMultiView::new(gt.clone()), NovelViewOracle::new(gt));
        let scores = Scores {
            text: &text,
            image: &image,
        };
        let mut config = tiny_config();
        config.lambda_t = 0.0;
        config.lambda_i = 0.0;
        config.optimizer.weight_decay = 0.0;
        let schedule = config.diffusion.build().unwrap();
        let field = initial_field(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, _) = combined_step(&field, &config, &scores, &schedule, 0, &mut rng).unwrap();
        assert!(g.is_zero());
        let out = run(&config, &scores, 0, &mut []).unwrap();
        assert_eq!(out.params, field.params);
    }

    #[test]
    fn zero_steps_returns_initial_field() {
        let gt = Arc::new(GroundTruth::new(SyntheticScene::sphere()));
        let (text, image) = (GtMultiView::new(gt.clone()), NovelViewOracle::new(gt));
        let scores = Scores {
            text: &text,
            image: &image,
        };
        let mut config = tiny_config();
        config.total_steps = 0;
        let out = run(&config, &scores, 0, &mut []).unwrap();
        assert_eq!(out.params, initial_field(&config).unwrap().params);
    }

    #[test]
    fn sds_gradient_vanishes_on_matching_prediction_or_zero_weight() {
        let config = tiny_config();
        let field = initial_field(&config).unwrap();
        let pose = CameraPose::orbit(10.0, 10.0, 2.0, 40.0, 8, 8).unwrap();
        let view = render(&field, &pose, &config.quadrature(), Sampling::Midpoint, true).unwrap();
        assert!(sds_gradient(&field, &view, &view.rgb, 1.0).unwrap().is_zero());
        let other = Image::filled(8, 8, [0.2; 3]);
        assert!(sds_gradient(&field, &view, &other, 0.0).unwrap().is_zero());
        assert!(!sds_gradient(&field, &view, &other, 1.0).unwrap().is_zero());
        assert!(sds_gradient(&field, &view, &Image::zeros(4, 4), 1.0).is_err());
    }
}
