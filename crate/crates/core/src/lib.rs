pub mod audio;
pub mod autograd;
pub mod cfm;
pub mod dit;
pub mod error;
pub mod eval;
pub mod factorize;
pub mod melfile;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod sampler;
pub mod synth;

pub use error::{Error, Result};
