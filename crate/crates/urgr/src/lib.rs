pub mod error;
pub mod focus;
pub mod gvit;
pub mod harness;
pub mod hqnet;
pub mod imaging;
pub mod nn;
pub mod pixelgraph;

pub use error::{Error, Result};
