pub mod error;
pub mod imagecore;
pub mod rng;
pub mod simplex;
pub mod style_manifold;

pub use error::{Error, Result};
pub mod gp;
pub mod bo;
pub mod metrics;
pub mod downstream;
pub mod phantom;
pub mod harmonizer;
pub mod eval_harness;
