pub mod dataio;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod gru;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
