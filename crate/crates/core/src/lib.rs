//! Occluded pedestrian re-identification with decoupled human parsing.

pub mod backbone;
pub mod error;
pub mod losses;
pub mod memory_bank;
pub mod model;
pub mod nn;
pub mod parsing;
pub mod registry;
pub mod reid;
pub mod retrieval;
pub mod synthetic;
pub mod train;

pub use error::{DropError, Result};
