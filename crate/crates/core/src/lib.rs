//! Physics-guided urban flow prediction with active sample reweighting.

pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod grid_graph;
pub mod model;
pub mod pipeline;
pub mod reweighting;
pub mod seeding;

pub use error::{Error, Result};
