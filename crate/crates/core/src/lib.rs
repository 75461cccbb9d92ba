pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fields;
pub mod geometry;
pub mod hash_grid;
pub mod image;
pub mod losses;
pub mod masks;
pub mod matching;
pub mod nn;
pub mod object_ops;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod render;
pub mod seed;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
