//! Brain-inspired driving agent: a recurrent ventral/dorsal perception
//! network, a transformer decision network, imitation training on
//! demonstrations from the lane world, closed-loop benchmarking and
//! sign-split Grad-CAM explanations.

pub mod config;
pub mod dataops;
pub mod decision;
pub mod evaluation;
pub mod explain;
pub mod model;
pub mod perception;
pub mod pipeline;
pub mod training;

pub use config::{load_config, ConfigError, RunConfig};
pub use model::{BidModel, ForwardOut, ModelConfig, Variant};
