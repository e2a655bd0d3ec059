pub mod cells;
pub mod error;
pub mod experiment;
pub mod fixed_points;
pub mod geometry;
pub mod linalg;
pub mod lsa;
pub mod persistence;
pub mod spectra;
pub mod synth_data;
pub mod training;

pub use error::{Error, Result};
