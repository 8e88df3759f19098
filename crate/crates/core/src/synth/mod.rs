//! Synthetic benchmark: procedural categories, category models built from
//! them, and simulated partial observations.

mod model;
mod scene;
mod shapes;

pub use model::*;
pub use scene::*;
pub use shapes::*;
