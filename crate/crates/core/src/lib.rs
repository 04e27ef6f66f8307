//! Contrastive predictive coding pretraining and attention-based multiple instance
//! learning for whole-image histopathology classification.

pub mod checkpoint;
pub mod cpc;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod mil;
pub mod params;
pub mod profile;
pub mod registry;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use profile::Profile;
