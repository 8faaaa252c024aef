//! Neural probabilistic circuits and their class-wise robust variant.

pub mod attacks;
pub mod circuit;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod integrator;
pub mod metrics;
pub mod recognizer;
pub mod schema;
mod text;

pub use error::{Error, Result};
pub use schema::{Node, VariableSchema, CLASS_VAR};
