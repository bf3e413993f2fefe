//! Network builders, forward pass and checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use config::ModelConfig;
pub use network::{Arch, ForwardPass, Heads, Layer, LayerKind, Network, Param, Prediction, Source};
