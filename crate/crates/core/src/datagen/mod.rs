//! Synthetic datasets: random modulus fields, a plane-stress solver, and
//! the plate and cantilever problems built on them.

pub mod beam;
pub mod fem;
pub mod gp;
pub mod plate;

pub use beam::{generate_beam_dataset, BeamConfig};
pub use gp::{GpFieldConfig, GpSampler};
pub use plate::{generate_plate_dataset, PlateProblem};
pub use crate::io::import_external_dataset;
