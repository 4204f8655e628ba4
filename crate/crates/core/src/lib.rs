//! Marked self-exciting point processes for information cascades.

pub mod delay;
pub mod engine;
pub mod error;
pub mod event;
pub mod fertility;
pub mod graph;
pub mod rng;
pub mod sim;
pub mod transition;

pub use error::{Error, ErrorKind, Result};
