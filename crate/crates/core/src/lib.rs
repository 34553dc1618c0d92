pub mod checks;
pub mod error;
pub mod harness;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod symmetry;

pub use error::{Error, Result};
