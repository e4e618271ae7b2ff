pub mod arrays;
pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;
