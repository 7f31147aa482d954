pub mod attention;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use config::StpConfig;
pub use error::{Error, Result};
pub use evaluation::ActionSegment;
pub use numerics::{Graph, ParamStore, Tensor, Var};
