pub mod accounting;
pub mod bench;
pub mod bspline;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod nn;
pub mod optim;

pub use error::{Error, Result};
