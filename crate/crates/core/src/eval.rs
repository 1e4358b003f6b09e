//! Evaluation metrics against a ground-truth scene.

use serde::Serialize;

use crate::camera::{relative_extrinsic, CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::field::VolumeSource;
use crate::image::Image;
use crate::render::{render, QuadratureConfig, Sampling};
use crate::scores::{warp_view, GroundTruth, GT_SAMPLES};

/// `10 log10(1 / mse)`; infinite for an exact match.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR of `source` against the ground truth at each pose, both rendered
/// with 256 midpoint samples per ray.
pub fn eval_psnr<S: VolumeSource + ?Sized>(
    source: &S,
    gt: &GroundTruth,
    poses: &[CameraPose],
) -> Result<Vec<f64>> {
    if poses.is_empty() {
        return Err(Error::Config("eval_psnr needs at least one pose".into()));
    }
    let quad = QuadratureConfig::with_samples(GT_SAMPLES);
    poses
        .iter()
        .map(|p| {
            let view = render(source, p, &quad, Sampling::Midpoint, false)?;
            Ok(psnr(view.rgb.mse(&gt.render(p)?.rgb)?))
        })
        .collect()
}

/// Mean of finite PSNR values, or infinity when every pose matched exactly.
pub fn mean_psnr(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Centers of a `resolution^3` cell lattice over `[-1, 1]^3`.
pub fn lattice_points(resolution: usize) -> impl Iterator<Item = Vec3> {
    let h = 2.0 / resolution as f64;
    let c = move |i: usize| -1.0 + (i as f64 + 0.5) * h;
    (0..resolution).flat_map(move |z| {
        (0..resolution).flat_map(move |y| (0..resolution).map(move |x| Vec3::new(c(x), c(y), c(z))))
    })
}

/// IoU between `{density > threshold}` and the scene's occupancy on a
/// lattice of cell centers.
pub fn eval_density_iou<S: VolumeSource + ?Sized>(
    source: &S,
    gt: &GroundTruth,
    resolution: usize,
    threshold: f64,
) -> Result<f64> {
    if resolution < 16 {
        return Err(Error::Config(format!(
            "IoU lattice resolution {resolution} is below the minimum of 16"
        )));
    }
    let (mut inter, mut union, mut occupied) = (0usize, 0usize, 0usize);
    for p in lattice_points(resolution) {
        let a = source.density(&p) > threshold;
        let b = gt.scene().occupied(&p);
        occupied += b as usize;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if occupied == 0 {
        return Err(Error::Scene("ground-truth occupancy is empty on the lattice".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    /// Mean over the pairs that had visible pixels.
    pub score: f64,
    pub per_pair: Vec<Option<f64>>,
}

/// For each pose pair, warps the render at A into B with ground-truth depth
/// and takes the mean absolute difference against the render at B over
/// pixels visible from both. Pairs without such pixels are skipped.
pub fn eval_cross_view_consistency<S: VolumeSource + ?Sized>(
    source: &S,
    gt: &GroundTruth,
    pairs: &[(CameraPose, CameraPose)],
) -> Result<ConsistencyReport> {
    if pairs.is_empty() {
        return Err(Error::Config("consistency needs at least one pose pair".into()));
    }
    let quad = QuadratureConfig::with_samples(GT_SAMPLES);
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let ra = render(source, a, &quad, Sampling::Midpoint, false)?;
        let rb = render(source, b, &quad, Sampling::Midpoint, false)?;
        per_pair.push(masked_mae(&ra.rgb, &rb.rgb, gt, a, b)?);
    }
    let scored: Vec<f64> = per_pair.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Numerical("no pose pair had mutually visible pixels".into()));
    }
    Ok(ConsistencyReport {
        score: scored.iter().sum::<f64>() / scored.len() as f64,
        per_pair,
    })
}

/// Masked MAE of `image_a` warped into `b` against `image_b`.
pub fn masked_mae(
    image_a: &Image,
    image_b: &Image,
    gt: &GroundTruth,
    a: &CameraPose,
    b: &CameraPose,
) -> Result<Option<f64>> {
    let ga = gt.render(a)?;
    let gb = gt.render(b)?;
    let warp = warp_view(image_a, &ga, &relative_extrinsic(a, b), &gb, image_b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (px, _) in warp.surface.iter().enumerate().filter(|(_, s)| **s) {
        for k in 0..3 {
            sum += (warp.image.data[3 * px + k] - image_b.data[3 * px + k]).abs();
        }
        n += 3;
    }
    if n == 0 {
        log::warn!("pose pair without mutually visible surface pixels skipped");
        return Ok(None);
    }
    Ok(Some(sum / n as f64))
}
