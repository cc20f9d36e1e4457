//! Omnidirectional CNN place recognition at desk scale.
//!
//! The pipeline renders equirectangular panoramas from a procedural
//! multi-room world, encodes them with a small CNN that uses circular
//! padding and roll branching (so a heading change becomes a column
//! permutation of the `w × d` feature map), trains the encoder with a
//! continuous lifted structured embedding loss so that feature distance
//! tracks physical distance, retrieves the closest map exemplar for a
//! query, and navigates towards it by descending the feature-distance
//! potential field.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod map;
pub mod model;
pub mod nav;
pub mod omni;
pub mod pipeline;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
