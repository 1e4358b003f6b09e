//! Score providers: denoisers that predict a clean image from a noised one.
//!
//! The oracles stand in for pretrained diffusion models. They ignore `z_t`
//! and `t` and return what the optimal denoiser for a single known scene
//! would return: the ground-truth render (multi-view), a deliberately
//! view-inconsistent corruption of it (perturbed), or the conditioning image
//! reprojected into the target camera with ground-truth depth (novel view).
//! Each oracle's unconditional prediction is the per-channel mean of its
//! conditional prediction, so classifier-free guidance still does work.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, RelativeExtrinsic};
use crate::diffusion::cfg_combine;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{render, QuadratureConfig, RenderedView, Sampling};
use crate::scene::SyntheticScene;

/// Samples per ray for ground-truth renders.
pub const GT_SAMPLES: usize = 256;
/// Opacity above which a ground-truth pixel counts as surface.
pub const SURFACE_OPACITY: f64 = 0.3;
/// Relative depth tolerance for the warp visibility test.
pub const DEPTH_TOLERANCE: f64 = 0.05;
const CACHE_CAPACITY: usize = 512;

/// Conditioning of the text path: the reference camera set.
#[derive(Debug, Clone, Copy)]
pub struct TextCondition<'a> {
    pub poses: &'a [CameraPose],
}

/// Conditioning of the image path: a rendered reference view, its pose and
/// the extrinsic from the reference camera to the target camera.
#[derive(Debug, Clone, Copy)]
pub struct ImageCondition<'a> {
    pub reference_view: &'a Image,
    pub reference_pose: &'a CameraPose,
    pub relative: RelativeExtrinsic,
}

impl ImageCondition<'_> {
    pub fn validate(&self) -> Result<()> {
        let r = self.reference_view;
        if r.width != self.reference_pose.width || r.height != self.reference_pose.height {
            return Err(Error::ShapeMismatch {
                expected: self.reference_pose.pixel_count() * 3,
                actual: r.data.len(),
            });
        }
        if r.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("reference view values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every pixel replaced by the image's per-channel mean.
pub fn mean_image(img: &Image) -> Image {
    Image::filled(img.width, img.height, img.channel_means())
}

/// Classifier-free guidance applied to whole images.
pub fn guided(cond: &Image, uncond: &Image, gamma: f64) -> Result<Image> {
    let data = cfg_combine(&cond.data, &uncond.data, gamma)?;
    Image::from_data(cond.width, cond.height, data)
}

/// Multi-view denoiser for the text-conditioned path.
pub trait MultiViewScore: Send + Sync {
    fn denoise(&self, z: &[Image], t: usize, cond: &TextCondition) -> Result<Vec<Image>>;

    fn denoise_unconditional(
        &self,
        z: &[Image],
        t: usize,
        cond: &TextCondition,
    ) -> Result<Vec<Image>> {
        Ok(self.denoise(z, t, cond)?.iter().map(mean_image).collect())
    }

    /// Conditional and unconditional predictions, in that order.
    fn denoise_both(
        &self,
        z: &[Image],
        t: usize,
        cond: &TextCondition,
    ) -> Result<(Vec<Image>, Vec<Image>)> {
        Ok((self.denoise(z, t, cond)?, self.denoise_unconditional(z, t, cond)?))
    }
}

/// Single-view denoiser for the image-conditioned path.
pub trait NovelViewScore: Send + Sync {
    fn denoise(
        &self,
        z: &Image,
        t: usize,
        cond: &ImageCondition,
        target: &CameraPose,
    ) -> Result<Image>;

    fn denoise_unconditional(
        &self,
        z: &Image,
        t: usize,
        cond: &ImageCondition,
        target: &CameraPose,
    ) -> Result<Image> {
        Ok(mean_image(&self.denoise(z, t, cond, target)?))
    }

    fn denoise_both(
        &self,
        z: &Image,
        t: usize,
        cond: &ImageCondition,
        target: &CameraPose,
    ) -> Result<(Image, Image)> {
        Ok((
            self.denoise(z, t, cond, target)?,
            self.denoise_unconditional(z, t, cond, target)?,
        ))
    }
}

fn check_inputs(z: &[Image], poses: &[CameraPose]) -> Result<()> {
    if poses.is_empty() {
        return Err(Error::Config("text condition needs at least one pose".into()));
    }
    if z.len() != poses.len() {
        return Err(Error::ShapeMismatch {
            expected: poses.len(),
            actual: z.len(),
        });
    }
    for (img, pose) in z.iter().zip(poses) {
        if img.width != pose.width || img.height != pose.height {
            return Err(Error::ShapeMismatch {
                expected: pose.pixel_count() * 3,
                actual: img.data.len(),
            });
        }
    }
    Ok(())
}

type PoseKey = [u64; 15];

fn pose_key(p: &CameraPose) -> PoseKey {
    let mut k = [0u64; 15];
    for (slot, v) in k.iter_mut().zip(p.rotation.iter().chain(p.position.iter())) {
        *slot = v.to_bits();
    }
    k[12] = p.fov_deg.to_bits();
    k[13] = p.width as u64;
    k[14] = p.height as u64;
    k
}

/// Ground-truth renders of a scene, memoized per pose and resolution.
#[derive(Debug)]
pub struct GroundTruth {
    scene: SyntheticScene,
    quadrature: QuadratureConfig,
    cache: RwLock<HashMap<PoseKey, Arc<RenderedView>>>,
}

impl GroundTruth {
    pub fn new(scene: SyntheticScene) -> Self {
        Self {
            scene,
            quadrature: QuadratureConfig::with_samples(GT_SAMPLES),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    pub fn quadrature(&self) -> &QuadratureConfig {
        &self.quadrature
    }

    pub fn render(&self, pose: &CameraPose) -> Result<Arc<RenderedView>> {
        let key = pose_key(pose);
        if let Some(hit) = self.cache.read().get(&key) {
            return Ok(hit.clone());
        }
        let view = Arc::new(render(&self.scene, pose, &self.quadrature, Sampling::Midpoint, false)?);
        let mut cache = self.cache.write();
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        Ok(cache.entry(key).or_insert(view).clone())
    }
}

/// Returns the ground-truth render at each pose.
#[derive(Debug, Clone)]
pub struct GtMultiView {
    gt: Arc<GroundTruth>,
}

impl GtMultiView {
    pub fn new(gt: Arc<GroundTruth>) -> Self {
        Self { gt }
    }
}

impl MultiViewScore for GtMultiView {
    fn denoise(&self, z: &[Image], _t: usize, cond: &TextCondition) -> Result<Vec<Image>> {
        check_inputs(z, cond.poses)?;
        cond.poses
            .iter()
            .map(|p| Ok(self.gt.render(p)?.rgb.clone()))
            .collect()
    }

    fn denoise_both(
        &self,
        z: &[Image],
        t: usize,
        cond: &TextCondition,
    ) -> Result<(Vec<Image>, Vec<Image>)> {
        let c = self.denoise(z, t, cond)?;
        let u = c.iter().map(mean_image).collect();
        Ok((c, u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathologyKind {
    /// Hue rotated by `amplitude · |azimuth| / 180` degrees.
    HueDrift,
    /// Mirrored copy blended in with weight `amplitude · (1 − cos azimuth) / 2`.
    GhostContent,
    /// Contrast toward the background scaled by `1 − amplitude` for |azimuth| > 90°.
    Attenuation,
}

impl PathologyKind {
    pub const ALL: [PathologyKind; 3] = [
        PathologyKind::Attenuation,
        PathologyKind::GhostContent,
        PathologyKind::HueDrift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PathologyKind::HueDrift => "hue_drift",
            PathologyKind::GhostContent => "ghost_content",
            PathologyKind::Attenuation => "attenuation",
        }
    }
}

impl fmt::Display for PathologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PathologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PathologyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown pathology `{s}` (expected attenuation, ghost_content or hue_drift)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pathology {
    pub kind: PathologyKind,
    pub amplitude: f64,
}

impl Pathology {
    /// Strength used by the ablation harness.
    pub fn standard(kind: PathologyKind) -> Self {
        let amplitude = match kind {
            PathologyKind::HueDrift => 90.0,
            PathologyKind::GhostContent => 0.5,
            PathologyKind::Attenuation => 0.8,
        };
        Self { kind, amplitude }
    }

    /// Applies the corruption for a camera at `azimuth_deg`.
    pub fn apply(&self, gt: &Image, azimuth_deg: f64, background: [f64; 3]) -> Image {
        if self.amplitude == 0.0 {
            return gt.clone();
        }
        let az = wrap_degrees(azimuth_deg);
        match self.kind {
            PathologyKind::HueDrift => {
                let angle = self.amplitude * az.abs() / 180.0;
                let mut out = gt.clone();
                for px in out.data.chunks_exact_mut(3) {
                    let rotated = rotate_hue([px[0], px[1], px[2]], angle);
                    px.copy_from_slice(&rotated);
                }
                out
            }
            PathologyKind::GhostContent => {
                let w = self.amplitude * (1.0 - az.to_radians().cos()) / 2.0;
                let mirror = gt.flip_horizontal();
                let mut out = gt.clone();
                for (o, m) in out.data.iter_mut().zip(&mirror.data) {
                    *o = (1.0 - w) * *o + w * m;
                }
                out
            }
            PathologyKind::Attenuation => {
                if az.abs() <= 90.0 {
                    return gt.clone();
                }
                let keep = 1.0 - self.amplitude;
                let mut out = gt.clone();
                for px in out.data.chunks_exact_mut(3) {
                    for k in 0..3 {
                        px[k] = background[k] + keep * (px[k] - background[k]);
                    }
                }
                out
            }
        }
    }
}

/// Wraps degrees into (−180, 180].
pub fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Rotates the HSV hue of an RGB color by `degrees`.
pub fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma <= 0.0 {
        return rgb;
    }
    let hue = if max == r {
        60.0 * ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    let h = (hue + degrees).rem_euclid(360.0) / 60.0;
    let x = chroma * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match h as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    [r1 + min, g1 + min, b1 + min]
}

/// Ground truth corrupted by an azimuth-dependent pathology.
#[derive(Debug, Clone)]
pub struct PerturbedMultiView {
    gt: Arc<GroundTruth>,
    pathology: Pathology,
}

impl PerturbedMultiView {
    pub fn new(gt: Arc<GroundTruth>, pathology: Pathology) -> Self {
        Self { gt, pathology }
    }

    pub fn pathology(&self) -> Pathology {
        self.pathology
    }
}

impl MultiViewScore for PerturbedMultiView {
    fn denoise(&self, z: &[Image], _t: usize, cond: &TextCondition) -> Result<Vec<Image>> {
        check_inputs(z, cond.poses)?;
        let bg = self.gt.quadrature().background;
        cond.poses
            .iter()
            .map(|p| {
                let gt = self.gt.render(p)?;
                Ok(self.pathology.apply(&gt.rgb, p.azimuth_deg(), bg))
            })
            .collect()
    }

    fn denoise_both(
        &self,
        z: &[Image],
        t: usize,
        cond: &TextCondition,
    ) -> Result<(Vec<Image>, Vec<Image>)> {
        let c = self.denoise(z, t, cond)?;
        let u = c.iter().map(mean_image).collect();
        Ok((c, u))
    }
}

/// Result of reprojecting an image into another camera.
#[derive(Debug, Clone)]
pub struct Warp {
    pub image: Image,
    /// Pixels that received an accepted splat from the source.
    pub valid: Vec<bool>,
    /// Accepted pixels whose splat came from a source surface point.
    pub surface: Vec<bool>,
}

/// Reprojects `source` (seen from `source_gt.pose`) into `target_gt.pose`
/// using `relative` to map source camera coordinates to target camera
/// coordinates. Surface pixels are unprojected at ground-truth depth;
/// background pixels are treated as points at infinity. Collisions resolve
/// to the nearest point, and splats that disagree with the target's
/// ground-truth depth or coverage are rejected. Rejected and unreached
/// pixels keep the value of `fill`.
pub fn warp_view(
    source: &Image,
    source_gt: &RenderedView,
    relative: &RelativeExtrinsic,
    target_gt: &RenderedView,
    fill: &Image,
) -> Result<Warp> {
    let sp = &source_gt.pose;
    let tp = &target_gt.pose;
    if source.width != sp.width || source.height != sp.height {
        return Err(Error::ShapeMismatch {
            expected: sp.pixel_count() * 3,
            actual: source.data.len(),
        });
    }
    if fill.width != tp.width || fill.height != tp.height {
        return Err(Error::ShapeMismatch {
            expected: tp.pixel_count() * 3,
            actual: fill.data.len(),
        });
    }
    let n = tp.pixel_count();
    // nearest splat per target pixel: (camera-space distance, source pixel)
    let mut zbuf: Vec<Option<(f64, usize)>> = vec![None; n];
    for j in 0..sp.height {
        for i in 0..sp.width {
            let src = j * sp.width + i;
            let dir_world = sp.pixel_direction(i as f64 + 0.5, j as f64 + 0.5);
            let dir_cam = sp.rotation * dir_world;
            let (p, dist) = if source_gt.opacity[src] >= SURFACE_OPACITY {
                let p = relative.apply(&(dir_cam * source_gt.depth[src]));
                let d = p.norm();
                (p, d)
            } else {
                (relative.apply_direction(&dir_cam), f64::INFINITY)
            };
            let Some((x, y)) = tp.project_camera_point(&p) else { continue };
            if !(x >= 0.0 && y >= 0.0) {
                continue;
            }
            let (x, y) = (x.floor() as usize, y.floor() as usize);
            if x >= tp.width || y >= tp.height {
                continue;
            }
            let slot = &mut zbuf[y * tp.width + x];
            if slot.is_none_or(|(best, _)| dist < best) {
                *slot = Some((dist, src));
            }
        }
    }
    let mut image = fill.clone();
    let mut valid = vec![false; n];
    let mut surface = vec![false; n];
    for (px, slot) in zbuf.iter().enumerate() {
        let Some((dist, src)) = *slot else { continue };
        let target_surface = target_gt.opacity[px] >= SURFACE_OPACITY;
        let accept = if dist.is_finite() {
            let d = target_gt.depth[px];
            target_surface && (dist - d).abs() <= DEPTH_TOLERANCE * d
        } else {
            !target_surface
        };
        if accept {
            image.data[3 * px..3 * px + 3].copy_from_slice(&source.data[3 * src..3 * src + 3]);
            valid[px] = true;
            surface[px] = dist.is_finite();
        }
    }
    Ok(Warp {
        image,
        valid,
        surface,
    })
}

/// Reprojects the conditioning image into the target camera with
/// ground-truth depth; pixels it cannot explain come from the ground truth.
#[derive(Debug, Clone)]
pub struct NovelViewOracle {
    gt: Arc<GroundTruth>,
}

impl NovelViewOracle {
    pub fn new(gt: Arc<GroundTruth>) -> Self {
        Self { gt }
    }

    fn predict(&self, cond: &ImageCondition, target: &CameraPose) -> Result<Image> {
        cond.validate()?;
        let source_gt = self.gt.render(cond.reference_pose)?;
        let target_gt = self.gt.render(target)?;
        Ok(warp_view(cond.reference_view, &source_gt, &cond.relative, &target_gt, &target_gt.rgb)?.image)
    }
}

impl NovelViewScore for NovelViewOracle {
    fn denoise(
        &self,
        z: &Image,
        _t: usize,
        cond: &ImageCondition,
        target: &CameraPose,
    ) -> Result<Image> {
        if z.width != target.width || z.height != target.height {
            return Err(Error::ShapeMismatch {
                expected: target.pixel_count() * 3,
                actual: z.data.len(),
            });
        }
        self.predict(cond, target)
    }

    fn denoise_both(
        &self,
        z: &Image,
        t: usize,
        cond: &ImageCondition,
        target: &CameraPose,
    ) -> Result<(Image, Image)> {
        let c = self.denoise(z, t, cond, target)?;
        let u = mean_image(&c);
        Ok((c, u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::relative_extrinsic;

    fn gt(scene: SyntheticScene) -> Arc<GroundTruth> {
        Arc::new(GroundTruth::new(scene))
    }

    fn pose(az: f64) -> CameraPose {
        CameraPose::orbit(az, 15.0, 2.0, 40.0, 24, 24).unwrap()
    }

    #[test]
    fn gt_oracle_ignores_noise_and_timestep() {
        let g = gt(SyntheticScene::sphere());
        let oracle = GtMultiView::new(g.clone());
        let poses = [pose(0.0), pose(90.0)];
        let cond = TextCondition { poses: &poses };
        let z1 = vec![Image::zeros(24, 24); 2];
        let z2 = vec![Image::filled(24, 24, [0.3, -2.0, 5.0]); 2];
        let a = oracle.denoise(&z1, 10, &cond).unwrap();
        let b = oracle.denoise(&z2, 900, &cond).unwrap();
        assert_eq!(a, b);
        let direct = render(g.scene(), &poses[0], g.quadrature(), Sampling::Midpoint, false).unwrap();
        assert_eq!(a[0], direct.rgb);
        let (c, u) = oracle.denoise_both(&z1, 5, &cond).unwrap();
        assert_eq!(guided(&c[0], &u[0], 1.0).unwrap(), a[0]);
        assert!(oracle.denoise(&z1[..1], 5, &cond).is_err());
    }

    #[test]
    fn zero_amplitude_perturbation_is_bitwise_gt() {
        let g = gt(SyntheticScene::two_box());
        let poses = [pose(170.0), pose(-100.0)];
        let cond = TextCondition { poses: &poses };
        let z = vec![Image::zeros(24, 24); 2];
        let clean = GtMultiView::new(g.clone()).denoise(&z, 1, &cond).unwrap();
        for kind in PathologyKind::ALL {
            let p = PerturbedMultiView::new(g.clone(), Pathology { kind, amplitude: 0.0 });
            assert_eq!(p.denoise(&z, 1, &cond).unwrap(), clean);
        }
    }

    #[test]
    fn unknown_pathology_is_a_config_error() {
        assert!(matches!("janus".parse::<PathologyKind>(), Err(Error::Config(_))));
        assert_eq!("hue_drift".parse::<PathologyKind>().unwrap(), PathologyKind::HueDrift);
    }

    #[test]
    fn ghost_at_back_is_an_even_blend() {
        let g = gt(SyntheticScene::two_box());
        let p = pose(180.0);
        let base = g.render(&p).unwrap().rgb.clone();
        let out = Pathology {
            kind: PathologyKind::GhostContent,
            amplitude: 0.5,
        }
        .apply(&base, 180.0, [1.0; 3]);
        let mirror = base.flip_horizontal();
        for k in 0..out.data.len() {
            assert_eq!(out.data[k], 0.5 * base.data[k] + 0.5 * mirror.data[k]);
        }
    }

    #[test]
    fn attenuation_only_touches_the_back_half() {
        let img = Image::filled(2, 2, [0.0, 0.5, 1.0]);
        let p = Pathology {
            kind: PathologyKind::Attenuation,
            amplitude: 0.5,
        };
        assert_eq!(p.apply(&img, 45.0, [1.0; 3]), img);
        assert_eq!(p.apply(&img, 135.0, [1.0; 3]).pixel(0, 0), [0.5, 0.75, 1.0]);
    }

    #[test]
    fn hue_rotation_moves_primaries_around_the_wheel() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(rotate_hue([1.0, 0.0, 0.0], 120.0), [0.0, 1.0, 0.0]));
        assert!(close(rotate_hue([0.0, 1.0, 0.0], 120.0), [0.0, 0.0, 1.0]));
        assert!(close(rotate_hue([1.0, 0.0, 0.0], -60.0), [1.0, 0.0, 1.0]));
        assert_eq!(rotate_hue([0.4, 0.4, 0.4], 77.0), [0.4, 0.4, 0.4]);
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
    }

    #[test]
    fn identity_warp_is_exact() {
        let g = gt(SyntheticScene::sphere());
        let p = pose(30.0);
        let oracle = NovelViewOracle::new(g);
        let reference = Image::from_data(
            24,
            24,
            (0..24 * 24 * 3).map(|k| (k % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let cond = ImageCondition {
            reference_view: &reference,
            reference_pose: &p,
            relative: RelativeExtrinsic::identity(),
        };
        let out = oracle.denoise(&Image::zeros(24, 24), 3, &cond, &p).unwrap();
        assert_eq!(out, reference);
    }

    #[test]
    fn warp_of_ground_truth_reproduces_nearby_view() {
        let g = gt(SyntheticScene::sphere());
        let (a, b) = (pose(0.0), pose(30.0));
        let ga = g.render(&a).unwrap();
        let gb = g.render(&b).unwrap();
        let w = warp_view(&ga.rgb, &ga, &relative_extrinsic(&a, &b), &gb, &gb.rgb).unwrap();
        assert!(w.surface.iter().filter(|v| **v).count() > 50);
        let mae = w
            .image
            .data
            .iter()
            .zip(&gb.rgb.data)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / w.image.data.len() as f64;
        assert!(mae < 0.02, "mae {mae}");
    }
}
