//! Neural controlled differential equations driven by a learned latent path,
//! with trainable integration bounds.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod field;
pub mod interp;
pub mod metrics;
pub mod model;
pub mod solve;
pub mod train;

pub use diffcore::{NdArray, Tape, Var};
pub use error::{Error, Result};
