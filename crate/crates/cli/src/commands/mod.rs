pub mod estimate;
pub mod eval;
pub mod fit;
pub mod plot;
pub mod synth;
