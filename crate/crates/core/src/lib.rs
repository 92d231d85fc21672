pub mod analysis;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod inference;
pub mod loopcore;
pub mod model;
pub mod numerics;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
