//! Style-conditioned image synthesis at desk scale.
//!
//! A frozen text-conditioned diffusion denoiser is extended with an adapter
//! that extracts style tokens from a reference image, aligns them with the
//! caption, blends the two and feeds the result to the denoiser's
//! cross-attention alongside the text tokens.

pub mod align;
pub mod attention;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod model;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod style;
pub mod tensor;
pub mod trainer;
pub mod toy_world;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use image::Image;
pub use params::{Binding, ParamSet};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};
