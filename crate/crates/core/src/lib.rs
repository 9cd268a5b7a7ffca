//! In-context identification of Wiener-Hammerstein systems with a Transformer meta-model.

pub mod backend;
mod binio;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
mod fastmath;
pub mod lti;
pub mod model;
pub mod train;
pub mod wh;

pub use error::{Error, Result};
