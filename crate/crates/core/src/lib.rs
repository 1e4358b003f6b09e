pub mod app;
pub mod camera;
pub mod checkpoint;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod field;
pub mod image;
pub mod mesh;
pub mod optim;
pub mod render;
pub mod scene;
pub mod scores;

pub use error::{Error, Result};
