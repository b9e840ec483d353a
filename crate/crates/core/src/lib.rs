pub mod catalog;
pub mod cce;
pub mod cli;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod parallel;
pub mod sampler;
pub mod teacher;
pub mod topk;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::Model;
