//! Open-vocabulary visual grounding at desk scale.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lgfa;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tiqs;
pub mod train;
pub mod types;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::{Checkpoint, GroundingModel};
pub use types::{bbox_to_norm, norm_to_bbox, BBox, Chunk, GroundingSample, NormBox, PLSample};
