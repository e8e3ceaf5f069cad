pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diffnum;
pub mod embedder;
pub mod error;
pub mod explain;
pub mod inference;
pub mod model;
pub mod objective;
pub mod scalar;
pub mod seed;
pub mod shapelet;
pub mod signal;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint64 = checkpoint::ModelCheckpoint<f64>;
pub type Tape64 = diffnum::Tape<f64>;
pub type Tensor64 = diffnum::Tensor<f64>;
pub type ParamStore64 = diffnum::ParamStore<f64>;
pub type PrototypeSet64 = inference::PrototypeSet<f64>;
pub type Explanation64 = explain::Explanation<f64>;
