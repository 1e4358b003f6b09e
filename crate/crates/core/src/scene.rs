//! Synthetic ground-truth scenes built from emissive spheres and boxes.
//!
//! Scene files are TOML:
//!
//! ```toml
//! name = "sphere"
//!
//! [[primitive]]
//! shape = "sphere"
//! center = [0.0, 0.0, 0.0]
//! radius = 0.5
//! inner_radius = 0.0      # optional; > 0 makes a hollow shell
//! color = [1.0, 0.0, 0.0]
//! density = 8.0
//!
//! [[primitive]]
//! shape = "box"
//! center = [0.2, 0.0, 0.1]
//! half_extents = [0.1, 0.2, 0.1]
//! color = [0.0, 0.0, 1.0]
//! density = 8.0
//! ```
//!
//! Overlapping primitives add their densities; the color at a point is the
//! density-weighted mean of the primitives covering it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::Vec3;
use crate::error::{Error, Result};
use crate::field::VolumeSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        inner_radius: f64,
        color: [f64; 3],
        density: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        color: [f64; 3],
        density: f64,
    },
}

impl Primitive {
    pub fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { color, .. } | Primitive::Box { color, .. } => *color,
        }
    }

    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Primitive::Sphere {
                center,
                radius,
                inner_radius,
                ..
            } => {
                let r = (p - Vec3::from(*center)).norm();
                r <= *radius && r >= *inner_radius
            }
            Primitive::Box {
                center,
                half_extents,
                ..
            } => (0..3).all(|a| (p[a] - center[a]).abs() <= half_extents[a]),
        }
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                (center.map(|c| c - radius), center.map(|c| c + radius))
            }
            Primitive::Box {
                center,
                half_extents,
                ..
            } => (
                [0, 1, 2].map(|a| center[a] - half_extents[a]),
                [0, 1, 2].map(|a| center[a] + half_extents[a]),
            ),
        }
    }

    /// Exact volume, used to cross-check lattice occupancy.
    pub fn volume(&self) -> f64 {
        match self {
            Primitive::Sphere {
                radius,
                inner_radius,
                ..
            } => 4.0 / 3.0 * std::f64::consts::PI * (radius.powi(3) - inner_radius.powi(3)),
            Primitive::Box { half_extents, .. } => 8.0 * half_extents.iter().product::<f64>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn new(name: impl Into<String>, primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Self {
            name: name.into(),
            primitives,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Scene("scene has no primitives".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density() > 0.0 && p.density().is_finite()) {
                return Err(Error::Scene(format!("primitive {i}: density must be positive")));
            }
            if !p.color().iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Scene(format!("primitive {i}: color outside [0, 1]")));
            }
            let (lo, hi) = p.bounds();
            if lo.iter().chain(&hi).any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Scene(format!("primitive {i} extends outside [-1, 1]^3")));
            }
            match p {
                Primitive::Sphere {
                    radius,
                    inner_radius,
                    ..
                } if !(*radius > 0.0 && *inner_radius >= 0.0 && inner_radius < radius) => {
                    return Err(Error::Scene(format!(
                        "primitive {i}: need 0 <= inner_radius < radius"
                    )));
                }
                Primitive::Box { half_extents, .. } if half_extents.iter().any(|h| *h <= 0.0) => {
                    return Err(Error::Scene(format!("primitive {i}: half extents must be positive")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let scene: SyntheticScene = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        scene.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene serializes")
    }

    /// Whether `p` lies inside any primitive.
    pub fn occupied(&self, p: &Vec3) -> bool {
        self.primitives.iter().any(|prim| prim.contains(p))
    }

    /// A single solid sphere of radius 0.5 at the origin.
    pub fn sphere() -> Self {
        Self::new(
            "sphere",
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.5,
                inner_radius: 0.0,
                color: [1.0, 0.0, 0.0],
                density: 8.0,
            }],
        )
        .expect("valid builtin scene")
    }

    /// Two boxes of different size and color placed asymmetrically.
    pub fn two_box() -> Self {
        Self::new(
            "two_box",
            vec![
                Primitive::Box {
                    center: [-0.25, 0.1, -0.1],
                    half_extents: [0.2, 0.2, 0.2],
                    color: [0.0, 0.0, 1.0],
                    density: 8.0,
                },
                Primitive::Box {
                    center: [0.25, -0.1, 0.1],
                    half_extents: [0.15, 0.15, 0.25],
                    color: [1.0, 1.0, 0.0],
                    density: 8.0,
                },
            ],
        )
        .expect("valid builtin scene")
    }

    /// A thin, weakly absorbing spherical shell (a glass-like object).
    pub fn shell() -> Self {
        Self::new(
            "shell",
            vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.55,
                inner_radius: 0.45,
                color: [0.0, 1.0, 1.0],
                density: 3.0,
            }],
        )
        .expect("valid builtin scene")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(Self::sphere()),
            "two_box" => Some(Self::two_box()),
            "shell" => Some(Self::shell()),
            _ => None,
        }
    }
}

impl VolumeSource for SyntheticScene {
    fn density(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .filter(|prim| prim.contains(p))
            .map(|prim| prim.density())
            .sum()
    }

    fn query(&self, p: &Vec3, _d: &Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for prim in self.primitives.iter().filter(|prim| prim.contains(p)) {
            let s = prim.density();
            sigma += s;
            let c = prim.color();
            for k in 0..3 {
                rgb[k] += s * c[k];
            }
        }
        if sigma > 0.0 {
            rgb.iter_mut().for_each(|c| *c /= sigma);
        }
        (sigma, rgb)
    }
}
