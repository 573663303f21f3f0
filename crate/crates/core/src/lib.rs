pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod obfmat;
pub mod partition;
pub mod rng;
pub mod zones;

pub use error::{Error, Result};
