//! The optimizable radiance field: a dense trilinearly interpolated feature
//! lattice over `[-1, 1]^3` feeding a small MLP.
//!
//! All parameters live in one flat vector so that gradients, optimizer
//! moments and checkpoints share a single layout. The lattice occupies the
//! front of the vector (the "grid" learning-rate group) and the MLP the rest.
//!
//! Network shape, per sample:
//!
//! ```text
//! h1    = act(W1 · feature + b1)
//! sigma = softplus(w_sigma · h1 + b_sigma)
//! h2    = act(W2h · h1 + W2d · enc(d) + b2)
//! rgb   = sigmoid(Wc · h2 + bc)
//! ```
//!
//! `act` is the shifted squareplus `(x + sqrt(x^2 + 1) - 1) / 2`.
//!
//! Density reads only the positional branch, so geometry is independent of
//! the viewing direction; color sees a sinusoidal encoding of it.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Vec3;
use crate::error::{Error, Result};

/// Anything that can be volume rendered.
pub trait VolumeSource: Sync {
    /// Density at `p`; zero outside the source's support.
    fn density(&self, p: &Vec3) -> f64;

    /// Density and color at `p` seen along unit direction `d`.
    fn query(&self, p: &Vec3, d: &Vec3) -> (f64, [f64; 3]);

    /// Evaluates a run of points sharing one direction.
    fn query_ray(&self, points: &[Vec3], d: &Vec3, sigma: &mut [f64], rgb: &mut [[f64; 3]]) {
        for (k, p) in points.iter().enumerate() {
            let (s, c) = self.query(p, d);
            sigma[k] = s;
            rgb[k] = c;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Lattice vertices per axis.
    pub grid_resolution: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub direction_bands: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 32,
            feature_dim: 8,
            hidden_width: 32,
            direction_bands: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 2 {
            return Err(Error::Config("grid_resolution must be at least 2".into()));
        }
        if self.feature_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("feature_dim and hidden_width must be positive".into()));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        3 + 6 * self.direction_bands
    }
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub config: FieldConfig,
    pub grid: usize,
    pub w1: usize,
    pub b1: usize,
    pub w_sigma: usize,
    pub b_sigma: usize,
    pub w2h: usize,
    pub w2d: usize,
    pub b2: usize,
    pub wc: usize,
    pub bc: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(config: FieldConfig) -> Self {
        let r = config.grid_resolution;
        let (f, h, e) = (config.feature_dim, config.hidden_width, config.encoding_dim());
        let grid = 0;
        let w1 = grid + r * r * r * f;
        let b1 = w1 + h * f;
        let w_sigma = b1 + h;
        let b_sigma = w_sigma + h;
        let w2h = b_sigma + 1;
        let w2d = w2h + h * h;
        let b2 = w2d + h * e;
        let wc = b2 + h;
        let bc = wc + 3 * h;
        let total = bc + 3;
        Self {
            config,
            grid,
            w1,
            b1,
            w_sigma,
            b_sigma,
            w2h,
            w2d,
            b2,
            wc,
            bc,
            total,
        }
    }

    /// Parameters in the lattice (first learning-rate group).
    pub fn grid_len(&self) -> usize {
        self.w1
    }

    /// Parameters in the MLP (second learning-rate group).
    pub fn mlp_len(&self) -> usize {
        self.total - self.w1
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        if index < self.w1 {
            ParamGroup::Grid
        } else {
            ParamGroup::Mlp
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Grid,
    Mlp,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::Grid => f.write_str("grid"),
            ParamGroup::Mlp => f.write_str("mlp"),
        }
    }
}

/// Gradient with the same layout as [`RadianceField::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub values: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `a * self + b * other`, elementwise.
    pub fn weighted_sum(a: f64, x: &ParamGradient, b: f64, y: &ParamGradient) -> ParamGradient {
        ParamGradient {
            values: x
                .values
                .iter()
                .zip(&y.values)
                .map(|(u, v)| a * u + b * v)
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Shifted squareplus `(x + sqrt(x^2 + 1) - 1) / 2` and its derivative: a
/// smooth ReLU that needs no `exp`. The negative branch uses the
/// cancellation-free form `x + r = 1 / (r - x)`.
#[inline]
fn squareplus(x: f64) -> (f64, f64) {
    let r = (x * x + 1.0).sqrt();
    if x >= 0.0 {
        ((x + r - 1.0) * 0.5, (1.0 + x / r) * 0.5)
    } else {
        let s = 1.0 / (r - x);
        ((s - 1.0) * 0.5, 0.5 * s / r)
    }
}

/// Inverse of softplus, for initializing a bias to a target density.
pub fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Sinusoidal encoding: the raw direction followed by `sin, cos` of
/// `2^k π d` for each band.
pub fn encode_direction(d: &Vec3, bands: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(&[d.x, d.y, d.z]);
    let mut idx = 3;
    for k in 0..bands {
        let freq = std::f64::consts::PI * (1u64 << k) as f64;
        for c in 0..3 {
            let (s, co) = (freq * d[c]).sin_cos();
            out[idx] = s;
            out[idx + 1] = co;
            idx += 2;
        }
    }
}

/// Trilinear corner indices (into the lattice, not scaled by feature dim)
/// and weights. `None` outside `[-1, 1]^3`.
#[inline]
fn trilinear(p: &Vec3, res: usize) -> Option<([usize; 8], [f64; 8])> {
    let scale = (res - 1) as f64;
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let v = p[a];
        if !(-1.0..=1.0).contains(&v) {
            return None;
        }
        let u = (v + 1.0) * 0.5 * scale;
        // u >= 0, so truncation is floor
        let i = (u as usize).min(res - 2);
        base[a] = i;
        frac[a] = u - i as f64;
    }
    let mut idx = [0usize; 8];
    let mut w = [0f64; 8];
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let (x, y, z) = (base[0] + dx, base[1] + dy, base[2] + dz);
        idx[corner] = (z * res + y) * res + x;
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        w[corner] = wx * wy * wz;
    }
    Some((idx, w))
}

/// Upstream gradient for one sample: dL/dsigma and dL/drgb.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleGrad {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Per-ray working buffers. Activations are stored unit-major
/// (`[unit * n + sample]`) so that each layer is a run of axpys over the
/// samples of a ray and each weight gradient a dot product over them.
struct Batch {
    n: usize,
    enc: Vec<f64>,
    dir_term: Vec<f64>,
    corners: Vec<Option<([usize; 8], [f64; 8])>>,
    feat: Vec<f64>,
    h1: Vec<f64>,
    d1: Vec<f64>,
    h2: Vec<f64>,
    d2: Vec<f64>,
    raw_sigma: Vec<f64>,
    rgb: Vec<f64>,
    g_sigma: Vec<f64>,
    g_c: Vec<f64>,
    g_h: Vec<f64>,
    g_a: Vec<f64>,
    g_feat: Vec<f64>,
}

thread_local! {
    static BATCH: RefCell<Batch> = RefCell::new(Batch::empty());
}

/// Runs `f` with this thread's reusable batch, sized for `c`.
fn with_batch<R>(c: &FieldConfig, f: impl FnOnce(&mut Batch) -> R) -> R {
    BATCH.with(|cell| match cell.try_borrow_mut() {
        Ok(mut b) => {
            b.configure(c);
            f(&mut b)
        }
        Err(_) => {
            let mut b = Batch::empty();
            b.configure(c);
            f(&mut b)
        }
    })
}

impl Batch {
    fn empty() -> Self {
        Self {
            n: 0,
            enc: Vec::new(),
            dir_term: Vec::new(),
            corners: Vec::new(),
            feat: Vec::new(),
            h1: Vec::new(),
            d1: Vec::new(),
            h2: Vec::new(),
            d2: Vec::new(),
            raw_sigma: Vec::new(),
            rgb: Vec::new(),
            g_sigma: Vec::new(),
            g_c: Vec::new(),
            g_h: Vec::new(),
            g_a: Vec::new(),
            g_feat: Vec::new(),
        }
    }

    fn configure(&mut self, c: &FieldConfig) {
        self.enc.resize(c.encoding_dim(), 0.0);
        self.dir_term.resize(c.hidden_width, 0.0);
    }

    fn resize(&mut self, c: &FieldConfig, n: usize) {
        let (f, h) = (c.feature_dim, c.hidden_width);
        self.n = n;
        self.corners.resize(n, None);
        for (buf, len) in [
            (&mut self.feat, f * n),
            (&mut self.h1, h * n),
            (&mut self.d1, h * n),
            (&mut self.h2, h * n),
            (&mut self.d2, h * n),
            (&mut self.raw_sigma, n),
            (&mut self.rgb, 3 * n),
        ] {
            buf.resize(len, 0.0);
        }
    }

    fn resize_grad(&mut self, c: &FieldConfig) {
        let (f, h, n) = (c.feature_dim, c.hidden_width, self.n);
        for (buf, len) in [
            (&mut self.g_sigma, n),
            (&mut self.g_c, 3 * n),
            (&mut self.g_h, h * n),
            (&mut self.g_a, h * n),
            (&mut self.g_feat, f * n),
        ] {
            buf.resize(len, 0.0);
        }
    }

    fn sigma(&self, k: usize) -> f64 {
        if self.corners[k].is_some() {
            softplus(self.raw_sigma[k])
        } else {
            0.0
        }
    }

    fn rgb(&self, k: usize) -> [f64; 3] {
        if self.corners[k].is_some() {
            let n = self.n;
            [self.rgb[k], self.rgb[n + k], self.rgb[2 * n + k]]
        } else {
            [0.0; 3]
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    layout: Layout,
    pub params: Vec<f64>,
}

/// Initial density of a fresh field (a faint uniform fog).
pub const INITIAL_DENSITY: f64 = 0.1;

impl RadianceField {
    /// Grid features ~ U(-1e-2, 1e-2); MLP weights uniform with bound
    /// `sqrt(6 / fan_in)`; the density bias is set so a fresh field has
    /// density close to [`INITIAL_DENSITY`] everywhere.
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut params = vec![0.0; layout.total];
        for v in &mut params[layout.grid..layout.w1] {
            *v = rng.gen_range(-1e-2..1e-2);
        }
        let (f, h, e) = (config.feature_dim, config.hidden_width, config.encoding_dim());
        let mut fill = |start: usize, len: usize, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut params[start..start + len] {
                *v = rng.gen_range(-bound..bound);
            }
        };
        fill(layout.w1, h * f, f);
        fill(layout.w_sigma, h, h);
        fill(layout.w2h, h * h, h + e);
        fill(layout.w2d, h * e, h + e);
        fill(layout.wc, 3 * h, h);
        params[layout.b_sigma] = softplus_inverse(INITIAL_DENSITY);
        Ok(Self { layout, params })
    }

    pub fn from_params(config: FieldConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: layout.total,
                actual: params.len(),
            });
        }
        Ok(Self { layout, params })
    }

    pub fn config(&self) -> FieldConfig {
        self.layout.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn zero_gradient(&self) -> ParamGradient {
        ParamGradient::zeros(self.layout.total)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Feature vector stored at lattice vertex `(x, y, z)`.
    pub fn vertex_feature(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let r = self.layout.config.grid_resolution;
        let f = self.layout.config.feature_dim;
        let start = ((z * r + y) * r + x) * f;
        &self.params[start..start + f]
    }

    /// World position of lattice vertex `(x, y, z)`.
    pub fn vertex_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = 2.0 / (self.layout.config.grid_resolution - 1) as f64;
        Vec3::new(-1.0 + s * x as f64, -1.0 + s * y as f64, -1.0 + s * z as f64)
    }

    /// The MLP applied to an explicit feature vector, bypassing the lattice.
    pub fn decode_feature(&self, feature: &[f64], d: &Vec3) -> (f64, [f64; 3]) {
        let c = self.layout.config;
        with_batch(&c, |b| {
            self.prepare_direction(d, b);
            b.resize(&c, 1);
            b.feat.copy_from_slice(&feature[..c.feature_dim]);
            b.corners[0] = Some(([0; 8], [0.0; 8]));
            self.mlp_forward(b);
            (b.sigma(0), b.rgb(0))
        })
    }

    fn prepare_direction(&self, d: &Vec3, b: &mut Batch) {
        let c = &self.layout.config;
        let (h, e) = (c.hidden_width, c.encoding_dim());
        encode_direction(d, c.direction_bands, &mut b.enc);
        let p = &self.params;
        for i in 0..h {
            let row = &p[self.layout.w2d + i * e..self.layout.w2d + (i + 1) * e];
            b.dir_term[i] = p[self.layout.b2 + i] + dot(row, &b.enc);
        }
    }

    /// Lattice lookup for every point; points outside the bounds get a zero
    /// feature and are masked out of the outputs.
    fn gather(&self, points: &[Vec3], b: &mut Batch) {
        let c = self.layout.config;
        let (f, n) = (c.feature_dim, points.len());
        b.resize(&c, n);
        b.feat.iter_mut().for_each(|v| *v = 0.0);
        for (k, pt) in points.iter().enumerate() {
            let corners = trilinear(pt, c.grid_resolution);
            if let Some((idx, w)) = corners {
                let base = idx.map(|i| self.layout.grid + i * f);
                for j in 0..f {
                    let mut v = 0.0;
                    for q in 0..8 {
                        v += w[q] * self.params[base[q] + j];
                    }
                    b.feat[j * n + k] = v;
                }
            }
            b.corners[k] = corners;
        }
    }

    fn mlp_forward(&self, b: &mut Batch) {
        let c = self.layout.config;
        let (f, h, n) = (c.feature_dim, c.hidden_width, b.n);
        let l = &self.layout;
        let p = &self.params;
        let Batch {
            dir_term,
            feat,
            h1,
            d1,
            h2,
            d2,
            raw_sigma,
            rgb,
            ..
        } = b;
        for i in 0..h {
            let row = &mut h1[i * n..(i + 1) * n];
            row.iter_mut().for_each(|v| *v = p[l.b1 + i]);
            for j in 0..f {
                axpy(p[l.w1 + i * f + j], &feat[j * n..(j + 1) * n], row);
            }
        }
        for (y, dy) in h1.iter_mut().zip(d1.iter_mut()) {
            (*y, *dy) = squareplus(*y);
        }
        raw_sigma.iter_mut().for_each(|v| *v = p[l.b_sigma]);
        for i in 0..h {
            axpy(p[l.w_sigma + i], &h1[i * n..(i + 1) * n], raw_sigma);
        }
        for i in 0..h {
            let row = &mut h2[i * n..(i + 1) * n];
            row.iter_mut().for_each(|v| *v = dir_term[i]);
            for j in 0..h {
                axpy(p[l.w2h + i * h + j], &h1[j * n..(j + 1) * n], row);
            }
        }
        for (y, dy) in h2.iter_mut().zip(d2.iter_mut()) {
            (*y, *dy) = squareplus(*y);
        }
        for ch in 0..3 {
            let row = &mut rgb[ch * n..(ch + 1) * n];
            row.iter_mut().for_each(|v| *v = p[l.bc + ch]);
            for i in 0..h {
                axpy(p[l.wc + ch * h + i], &h2[i * n..(i + 1) * n], row);
            }
            row.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
    }

    fn forward_ray(&self, points: &[Vec3], d: &Vec3, b: &mut Batch) {
        self.prepare_direction(d, b);
        self.gather(points, b);
        self.mlp_forward(b);
    }

    /// Density and color at a point. Points outside `[-1, 1]^3` have
    /// density exactly zero.
    pub fn query_point(&self, p: &Vec3, d: &Vec3) -> (f64, [f64; 3]) {
        with_batch(&self.layout.config, |b| {
            self.forward_ray(std::slice::from_ref(p), d, b);
            (b.sigma(0), b.rgb(0))
        })
    }

    /// Accumulates the gradient of `sum_k g_k · (sigma_k, rgb_k)` for a run
    /// of points sharing one direction.
    pub fn backward_ray(
        &self,
        points: &[Vec3],
        d: &Vec3,
        upstream: &[SampleGrad],
        grad: &mut ParamGradient,
    ) {
        with_batch(&self.layout.config, |b| {
            self.backward_ray_with(points, d, upstream, grad, b)
        });
    }

    fn backward_ray_with(
        &self,
        points: &[Vec3],
        d: &Vec3,
        upstream: &[SampleGrad],
        grad: &mut ParamGradient,
        b: &mut Batch,
    ) {
        let c = self.layout.config;
        let (f, h, e) = (c.feature_dim, c.hidden_width, c.encoding_dim());
        let l = self.layout;
        let p = &self.params;
        let g = &mut grad.values;
        self.forward_ray(points, d, b);
        b.resize_grad(&c);
        let n = b.n;
        let Batch {
            enc,
            corners,
            feat,
            h1,
            d1,
            h2,
            d2,
            raw_sigma,
            rgb,
            g_sigma,
            g_c,
            g_h,
            g_a,
            g_feat,
            ..
        } = b;
        for k in 0..n {
            let up = upstream[k];
            if corners[k].is_none() {
                g_sigma[k] = 0.0;
                for ch in 0..3 {
                    g_c[ch * n + k] = 0.0;
                }
                continue;
            }
            g_sigma[k] = up.sigma * sigmoid(raw_sigma[k]);
            for ch in 0..3 {
                let v = rgb[ch * n + k];
                g_c[ch * n + k] = up.rgb[ch] * v * (1.0 - v);
            }
        }
        // color head
        g_h.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..3 {
            let gc = &g_c[ch * n..(ch + 1) * n];
            g[l.bc + ch] += gc.iter().sum::<f64>();
            for i in 0..h {
                g[l.wc + ch * h + i] += dot(gc, &h2[i * n..(i + 1) * n]);
                axpy(p[l.wc + ch * h + i], gc, &mut g_h[i * n..(i + 1) * n]);
            }
        }
        for ((ga, gh), dy) in g_a.iter_mut().zip(g_h.iter()).zip(d2.iter()) {
            *ga = gh * dy;
        }
        // direction branch, shared by the whole ray
        for i in 0..h {
            let sa: f64 = g_a[i * n..(i + 1) * n].iter().sum();
            g[l.b2 + i] += sa;
            for j in 0..e {
                g[l.w2d + i * e + j] += sa * enc[j];
            }
        }
        // second hidden layer and density head, back into h1
        g_h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..h {
            let ga = &g_a[i * n..(i + 1) * n];
            for j in 0..h {
                g[l.w2h + i * h + j] += dot(ga, &h1[j * n..(j + 1) * n]);
                axpy(p[l.w2h + i * h + j], ga, &mut g_h[j * n..(j + 1) * n]);
            }
        }
        g[l.b_sigma] += g_sigma.iter().sum::<f64>();
        for i in 0..h {
            g[l.w_sigma + i] += dot(g_sigma, &h1[i * n..(i + 1) * n]);
            axpy(p[l.w_sigma + i], g_sigma, &mut g_h[i * n..(i + 1) * n]);
        }
        for ((ga, gh), dy) in g_a.iter_mut().zip(g_h.iter()).zip(d1.iter()) {
            *ga = gh * dy;
        }
        // first layer, then scatter into the lattice
        g_feat.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..h {
            let ga = &g_a[i * n..(i + 1) * n];
            g[l.b1 + i] += ga.iter().sum::<f64>();
            for j in 0..f {
                g[l.w1 + i * f + j] += dot(ga, &feat[j * n..(j + 1) * n]);
                axpy(p[l.w1 + i * f + j], ga, &mut g_feat[j * n..(j + 1) * n]);
            }
        }
        for (k, corner) in corners.iter().enumerate() {
            let Some((idx, w)) = corner else { continue };
            for q in 0..8 {
                let base = l.grid + idx[q] * f;
                for j in 0..f {
                    g[base + j] += w[q] * g_feat[j * n + k];
                }
            }
        }
    }

    /// Exact reverse-mode gradient of `sum_k upstream_k · query(points_k, directions_k)`
    /// with respect to every field parameter.
    pub fn query_batch_with_grad(
        &self,
        points: &[Vec3],
        directions: &[Vec3],
        upstream: &[SampleGrad],
    ) -> Result<ParamGradient> {
        if points.len() != directions.len() {
            return Err(Error::ShapeMismatch {
                expected: points.len(),
                actual: directions.len(),
            });
        }
        if points.len() != upstream.len() {
            return Err(Error::ShapeMismatch {
                expected: points.len(),
                actual: upstream.len(),
            });
        }
        let mut grad = self.zero_gradient();
        with_batch(&self.layout.config, |b| {
            for k in 0..points.len() {
                self.backward_ray_with(
                    &points[k..k + 1],
                    &directions[k],
                    &upstream[k..k + 1],
                    &mut grad,
                    b,
                );
            }
        });
        Ok(grad)
    }
}

impl VolumeSource for RadianceField {
    fn density(&self, p: &Vec3) -> f64 {
        self.query_point(p, &Vec3::y()).0
    }

    fn query(&self, p: &Vec3, d: &Vec3) -> (f64, [f64; 3]) {
        self.query_point(p, d)
    }

    fn query_ray(&self, points: &[Vec3], d: &Vec3, sigma: &mut [f64], rgb: &mut [[f64; 3]]) {
        with_batch(&self.layout.config, |b| {
            self.forward_ray(points, d, b);
            for k in 0..points.len() {
                sigma[k] = b.sigma(k);
                rgb[k] = b.rgb(k);
            }
        });
    }
}
