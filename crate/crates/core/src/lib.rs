pub mod distill;
pub mod divergence;
pub mod eval;
pub mod lens;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
