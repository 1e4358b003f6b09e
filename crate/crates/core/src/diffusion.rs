//! DDPM building blocks on flat real arrays: schedules, the forward
//! process, the posterior mean used by ancestral sampling, classifier-free
//! guidance and the denoising loss.
//!
//! Timesteps are 1-based, `t ∈ [1, T]`, with `alpha_bar(0) = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`; `1` at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior standard deviation, `sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Config(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// Maps a continuous fraction of the schedule to a step index,
    /// `round(frac * T)` clamped to `[1, T]`.
    pub fn timestep_index(&self, frac: f64) -> usize {
        ((frac * self.len() as f64).round() as usize).clamp(1, self.len())
    }
}

/// A noised image together with the Gaussian draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub z: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// `z_t = sqrt(ab_t) x + sqrt(1 - ab_t) eps` with the given noise.
pub fn forward_sample_with_noise(
    schedule: &DiffusionSchedule,
    x: &[f64],
    t: usize,
    eps: Vec<f64>,
) -> Result<NoisedSample> {
    schedule.check_t(t)?;
    if eps.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            actual: eps.len(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let z = x.iter().zip(&eps).map(|(xi, e)| a * xi + b * e).collect();
    Ok(NoisedSample { z, t, eps })
}

pub fn forward_sample(
    schedule: &DiffusionSchedule,
    x: &[f64],
    t: usize,
    rng: &mut impl Rng,
) -> Result<NoisedSample> {
    let eps = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    forward_sample_with_noise(schedule, x, t, eps)
}

/// Mean of the reverse step given a clean-image prediction:
///
/// `mu = sqrt(ab_{t-1}) beta_t / (1 - ab_t) * x_hat + sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t) * z_t`
pub fn posterior_mean(
    schedule: &DiffusionSchedule,
    z: &[f64],
    t: usize,
    x_hat: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if z.len() != x_hat.len() {
        return Err(Error::ShapeMismatch {
            expected: z.len(),
            actual: x_hat.len(),
        });
    }
    let (cx, cz) = posterior_coefficients(schedule, t)?;
    Ok(z.iter().zip(x_hat).map(|(zi, xi)| cx * xi + cz * zi).collect())
}

/// Coefficients `(c_x, c_z)` of [`posterior_mean`].
pub fn posterior_coefficients(schedule: &DiffusionSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.check_t(t)?;
    let denom = 1.0 - schedule.alpha_bar(t);
    if denom < 1e-12 {
        return Err(Error::Numerical(format!(
            "1 - alpha_bar({t}) = {denom:e} is too small for the posterior mean"
        )));
    }
    let prev = schedule.alpha_bar(t - 1);
    let cx = prev.sqrt() * schedule.beta(t) / denom;
    let cz = schedule.alpha(t).sqrt() * (1.0 - prev) / denom;
    Ok((cx, cz))
}

/// Classifier-free guidance, `gamma * cond + (1 - gamma) * uncond`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch {
            expected: cond.len(),
            actual: uncond.len(),
        });
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| gamma * c + (1.0 - gamma) * u)
        .collect())
}

/// A clean-image predictor `x_theta(z_t, t)`.
pub trait Denoiser {
    fn predict(&self, z: &[f64], t: usize) -> Vec<f64>;
}

impl<F: Fn(&[f64], usize) -> Vec<f64>> Denoiser for F {
    fn predict(&self, z: &[f64], t: usize) -> Vec<f64> {
        self(z, t)
    }
}

/// The optimal denoiser for i.i.d. scalar Gaussian data `N(mean, var)`:
/// `E[x | z_t] = (sqrt(ab) var z + (1 - ab) mean) / (ab var + 1 - ab)`.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub mean: f64,
    pub var: f64,
}

impl GaussianDenoiser<'_> {
    /// Expected squared error of this denoiser at step `t` per element,
    /// i.e. the posterior variance `var (1 - ab) / (ab var + 1 - ab)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        self.var * (1.0 - ab) / (ab * self.var + 1.0 - ab)
    }
}

impl Denoiser for GaussianDenoiser<'_> {
    fn predict(&self, z: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let denom = ab * self.var + 1.0 - ab;
        z.iter()
            .map(|zi| (ab.sqrt() * self.var * zi + (1.0 - ab) * self.mean) / denom)
            .collect()
    }
}

/// One Monte-Carlo draw of `w(t) ||x - x_theta(z_t, t)||^2`.
pub fn ddpm_loss(
    schedule: &DiffusionSchedule,
    denoiser: &impl Denoiser,
    x: &[f64],
    t: usize,
    rng: &mut impl Rng,
    weight: impl Fn(usize) -> f64,
) -> Result<f64> {
    let noised = forward_sample(schedule, x, t, rng)?;
    let pred = denoiser.predict(&noised.z, t);
    if pred.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: x.len(),
            actual: pred.len(),
        });
    }
    let sq: f64 = x.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(weight(t) * sq)
}

/// Ancestral sampling from `z_T` down to `t = 1` with a caller-supplied
/// standard-normal stream. The `t = 1` step adds no noise.
pub fn reverse_sample_with_noise(
    schedule: &DiffusionSchedule,
    denoiser: &impl Denoiser,
    len: usize,
    mut noise: impl FnMut() -> f64,
) -> Result<Vec<f64>> {
    let mut z: Vec<f64> = (0..len).map(|_| noise()).collect();
    for t in (1..=schedule.len()).rev() {
        let x_hat = denoiser.predict(&z, t);
        let mut mu = posterior_mean(schedule, &z, t, &x_hat)?;
        if t > 1 {
            let s = schedule.sigma(t);
            for m in &mut mu {
                *m += s * noise();
            }
        }
        z = mu;
    }
    Ok(z)
}

pub fn reverse_sample(
    schedule: &DiffusionSchedule,
    denoiser: &impl Denoiser,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    reverse_sample_with_noise(schedule, denoiser, len, || rng.sample(StandardNormal))
}
