//! Volumetric segmentation with a convolutional encoder, a convolutional
//! capsule encoder using dynamic routing, and a convolutional decoder.
//!
//! Everything runs on [`tensor::Tape`], a small reverse-mode autodiff engine
//! over dense channels-last tensors.

pub mod capsule;
pub mod error;
pub mod faults;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::LabelVolume;
