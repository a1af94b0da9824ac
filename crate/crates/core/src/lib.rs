pub mod backbone;
pub mod engine;
pub mod error;
pub mod global_rep;
pub mod heads;
pub mod localization;
pub mod memory;
pub mod model;
pub mod numerics;
#[cfg(feature = "server")]
pub mod service;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
