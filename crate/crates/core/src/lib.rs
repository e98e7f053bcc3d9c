//! Zero-shot anomaly detection and localisation with fine-grained text
//! descriptions, box-guided map suppression and multi-shape convolutional
//! cross-modal interaction.

pub mod app;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod locmap;
pub mod losses;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod prompts;
pub mod scoring;
pub mod seeding;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
