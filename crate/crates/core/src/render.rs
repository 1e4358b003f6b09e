//! Differentiable volume rendering with piecewise-constant quadrature.
//!
//! Each ray's span `[t_near, t_far]` is split into `N` equal bins of width
//! `delta`. One sample is taken per bin (at the bin center, or uniformly
//! jittered inside the bin when a seed is given) and its density is held
//! constant across the bin:
//!
//! ```text
//! T_i   = exp(-sum_{k<i} sigma_k delta)
//! w_i   = T_i (1 - exp(-sigma_i delta))
//! rgb   = sum_i w_i c_i + (1 - sum_i w_i) background
//! depth = sum_i w_i t_i / max(sum_i w_i, eps)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraPose, Ray, Vec3};
use crate::error::{Error, Result};
use crate::field::{ParamGradient, RadianceField, SampleGrad, VolumeSource};
use crate::image::Image;

pub const WHITE: [f64; 3] = [1.0; 3];
const DEPTH_EPS: f64 = 1e-10;
/// Fixed split of rays into gradient buffers; keeps the summation order
/// independent of the thread count.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub samples: usize,
    pub background: [f64; 3],
    pub bounding_radius: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            background: WHITE,
            bounding_radius: 1.0,
        }
    }
}

impl QuadratureConfig {
    pub fn with_samples(samples: usize) -> Self {
        Self {
            samples,
            ..Default::default()
        }
    }
}

/// How sample positions are placed inside each bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Bin centers.
    Midpoint,
    /// Uniform jitter inside each bin, seeded per ray from this value.
    Stratified(u64),
}

#[derive(Debug, Clone)]
struct RayRecord {
    pixel: usize,
    origin: Vec3,
    direction: Vec3,
    delta: f64,
    start: usize,
}

/// Per-sample quadrature records kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleCache {
    samples_per_ray: usize,
    background: [f64; 3],
    rays: Vec<RayRecord>,
    t: Vec<f64>,
    sigma: Vec<f64>,
    rgb: Vec<[f64; 3]>,
}

impl SampleCache {
    pub fn sample_count(&self) -> usize {
        self.t.len()
    }
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub rgb: Image,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
    pub pose: CameraPose,
    pub cache: Option<SampleCache>,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Drops the sample cache, keeping only the images.
    pub fn into_image(self) -> Image {
        self.rgb
    }
}

struct RayOutput {
    rgb: [f64; 3],
    opacity: f64,
    depth: f64,
    t: Vec<f64>,
    sigma: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

fn ray_seed(seed: u64, pixel: usize) -> u64 {
    // splitmix64 of the pixel index mixed into the render seed
    let mut z = seed ^ (pixel as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_positions(ray: &Ray, n: usize, sampling: Sampling, pixel: usize) -> (f64, Vec<f64>) {
    let delta = (ray.t_far - ray.t_near) / n as f64;
    let t = match sampling {
        Sampling::Midpoint => (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * delta).collect(),
        Sampling::Stratified(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(seed, pixel));
            (0..n)
                .map(|i| ray.t_near + (i as f64 + rng.gen::<f64>()) * delta)
                .collect()
        }
    };
    (delta, t)
}

fn composite(sigma: &[f64], colors: &[[f64; 3]], t: &[f64], delta: f64, bg: [f64; 3]) -> ([f64; 3], f64, f64) {
    let mut transmittance = 1.0;
    let mut acc = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth = 0.0;
    for i in 0..sigma.len() {
        let alpha = 1.0 - (-sigma[i] * delta).exp();
        let w = transmittance * alpha;
        for c in 0..3 {
            acc[c] += w * colors[i][c];
        }
        opacity += w;
        depth += w * t[i];
        transmittance *= 1.0 - alpha;
    }
    let rgb = [0, 1, 2].map(|c| acc[c] + (1.0 - opacity) * bg[c]);
    (rgb, opacity, depth / opacity.max(DEPTH_EPS))
}

fn render_ray<S: VolumeSource + ?Sized>(
    source: &S,
    ray: &Ray,
    pixel: usize,
    config: &QuadratureConfig,
    sampling: Sampling,
) -> (f64, RayOutput) {
    let n = config.samples;
    let (delta, t) = sample_positions(ray, n, sampling, pixel);
    let points: Vec<Vec3> = t.iter().map(|ti| ray.origin + *ti * ray.direction).collect();
    let mut sigma = vec![0.0; n];
    let mut colors = vec![[0.0; 3]; n];
    source.query_ray(&points, &ray.direction, &mut sigma, &mut colors);
    let (rgb, opacity, depth) = composite(&sigma, &colors, &t, delta, config.background);
    (
        delta,
        RayOutput {
            rgb,
            opacity,
            depth,
            t,
            sigma,
            colors,
        },
    )
}

/// Renders `source` at `pose`. With `keep_cache` the per-sample records
/// needed by [`render_backward`] are retained.
pub fn render<S: VolumeSource + ?Sized>(
    source: &S,
    pose: &CameraPose,
    config: &QuadratureConfig,
    sampling: Sampling,
    keep_cache: bool,
) -> Result<RenderedView> {
    if config.samples == 0 {
        return Err(Error::Config("quadrature needs at least one sample".into()));
    }
    let grid = generate_rays(pose, config.bounding_radius)?;
    let n_px = grid.rays.len();
    let outputs: Vec<Option<(f64, RayOutput)>> = grid
        .rays
        .par_iter()
        .enumerate()
        .map(|(pixel, ray)| ray.as_ref().map(|r| render_ray(source, r, pixel, config, sampling)))
        .collect();

    let mut rgb = Image::filled(pose.width, pose.height, config.background);
    let mut opacity = vec![0.0; n_px];
    let mut depth = vec![0.0; n_px];
    let mut cache = keep_cache.then(|| SampleCache {
        samples_per_ray: config.samples,
        background: config.background,
        rays: Vec::new(),
        t: Vec::new(),
        sigma: Vec::new(),
        rgb: Vec::new(),
    });
    for (pixel, out) in outputs.into_iter().enumerate() {
        let Some((delta, out)) = out else { continue };
        rgb.data[3 * pixel..3 * pixel + 3].copy_from_slice(&out.rgb);
        opacity[pixel] = out.opacity;
        depth[pixel] = out.depth;
        if let Some(cache) = cache.as_mut() {
            let ray = grid.rays[pixel].as_ref().expect("hit ray");
            cache.rays.push(RayRecord {
                pixel,
                origin: ray.origin,
                direction: ray.direction,
                delta,
                start: cache.t.len(),
            });
            cache.t.extend_from_slice(&out.t);
            cache.sigma.extend_from_slice(&out.sigma);
            cache.rgb.extend_from_slice(&out.colors);
        }
    }
    Ok(RenderedView {
        rgb,
        opacity,
        depth,
        pose: *pose,
        cache,
    })
}

/// Upstream gradients on every sample of one ray given dL/d(pixel rgb).
fn ray_sample_grads(
    sigma: &[f64],
    colors: &[[f64; 3]],
    delta: f64,
    bg: [f64; 3],
    g: [f64; 3],
    out: &mut Vec<SampleGrad>,
) {
    let n = sigma.len();
    out.clear();
    let mut weights = Vec::with_capacity(n);
    let mut trans_after = Vec::with_capacity(n);
    let mut transmittance = 1.0;
    for s in sigma {
        let survive = (-s * delta).exp();
        weights.push(transmittance * (1.0 - survive));
        transmittance *= survive;
        trans_after.push(transmittance);
    }
    // e_i · g, with e_i = c_i - background
    let eg: Vec<f64> = colors
        .iter()
        .map(|c| (0..3).map(|k| (c[k] - bg[k]) * g[k]).sum())
        .collect();
    out.resize(n, SampleGrad::default());
    let mut suffix = 0.0; // sum_{k>i} w_k (e_k · g)
    for i in (0..n).rev() {
        out[i] = SampleGrad {
            sigma: delta * (trans_after[i] * eg[i] - suffix),
            rgb: [weights[i] * g[0], weights[i] * g[1], weights[i] * g[2]],
        };
        suffix += weights[i] * eg[i];
    }
}

/// Exact gradient of `sum_pixels pixel_grad · rgb` with respect to the
/// parameters of `field`, which must be the field that produced `view`.
pub fn render_backward(
    field: &RadianceField,
    view: &RenderedView,
    pixel_grad: &Image,
) -> Result<ParamGradient> {
    let cache = view.cache.as_ref().ok_or(Error::MissingCache)?;
    view.rgb.check_shape(pixel_grad)?;
    let n_rays = cache.rays.len();
    let chunk = n_rays.div_ceil(GRAD_CHUNKS).max(1);
    let partials: Vec<ParamGradient> = cache
        .rays
        .par_chunks(chunk)
        .map(|rays| {
            let mut grad = field.zero_gradient();
            let mut upstream = Vec::new();
            let mut points = Vec::new();
            for r in rays {
                let g = pixel_grad.pixel(r.pixel % view.width(), r.pixel / view.width());
                if g == [0.0; 3] {
                    continue;
                }
                let span = r.start..r.start + cache.samples_per_ray;
                ray_sample_grads(
                    &cache.sigma[span.clone()],
                    &cache.rgb[span.clone()],
                    r.delta,
                    cache.background,
                    g,
                    &mut upstream,
                );
                points.clear();
                points.extend(cache.t[span].iter().map(|t| r.origin + *t * r.direction));
                field.backward_ray(&points, &r.direction, &upstream, &mut grad);
            }
            grad
        })
        .collect();
    let mut total = field.zero_gradient();
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}
