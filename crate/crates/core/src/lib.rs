//! Toy-scale laboratory for studying the final-layer information bottleneck of
//! CAM classifiers and reducing it with per-image adaptation (RIB).

mod codec;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod model;
pub mod rib;
pub mod toydata;

pub use error::{Error, Result};
