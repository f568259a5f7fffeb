//! Hybrid deterministic/variational graph neural network for inverse
//! problems on finite-element meshes.
//!
//! A deterministic encoder and message-passing processor turn a measured
//! displacement field into per-node embeddings; a Bayes-by-backprop decoder
//! maps them to a Gaussian over the unknown nodal quantity.

pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod io;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod presets;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use graph::{assemble_features, build_graph, Graph};
pub use mesh::{Dataset, Mesh, Simulation};
pub use model::{ModelConfig, ModelState, NoiseModel};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{train, train_with, TrainConfig, TrainState};
pub use variational::PriorMode;
