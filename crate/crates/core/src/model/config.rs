use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input modalities.
    pub in_channels: usize,
    /// Segmentation classes including background.
    pub classes: usize,
    pub visual_channels: [usize; 3],
    pub visual_kernel: usize,
    pub visual_dilations: [usize; 3],
    /// Channels of the two stride-2 convolutions ahead of the capsules.
    pub encoder_channels: [usize; 2],
    pub encoder_kernel: usize,
    /// Types of the two intermediate capsule layers; the last layer has `classes` types.
    pub capsule_types: [usize; 2],
    /// Pose dimensions of the three capsule layers. Primary capsules use the first.
    pub capsule_dims: [usize; 3],
    pub capsule_kernel: usize,
    pub routing_iterations: usize,
    pub first_capsule_stride: usize,
    pub decoder_channels: [usize; 3],
    pub margin_weight: f64,
    pub ce_weight: f64,
    pub reconstruction_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 2,
            classes: 4,
            visual_channels: [16, 32, 64],
            visual_kernel: 5,
            visual_dilations: [1, 3, 3],
            encoder_channels: [128, 128],
            encoder_kernel: 3,
            capsule_types: [8, 8],
            capsule_dims: [16, 16, 32],
            capsule_kernel: 3,
            routing_iterations: 3,
            first_capsule_stride: 2,
            decoder_channels: [128, 64, 32],
            margin_weight: 1.0,
            ce_weight: 1.0,
            reconstruction_weight: 1.0,
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter network with the same topology, for tests
    /// and quick experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 1,
            classes: 2,
            visual_channels: [4, 4, 8],
            encoder_channels: [16, 16],
            capsule_types: [2, 2],
            capsule_dims: [4, 4, 8],
            decoder_channels: [16, 8, 4],
            ..ModelConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            margin: self.margin_weight,
            ce: self.ce_weight,
            recon: self.reconstruction_weight,
        }
    }

    /// Ratio between input extent and capsule-grid extent.
    pub fn capsule_factor(&self) -> usize {
        4 * self.first_capsule_stride
    }

    /// Capsule types produced by grouping the last encoder channels.
    pub fn primary_types(&self) -> usize {
        self.encoder_channels[1] / self.capsule_dims[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes = {} must be in 2..=255", self.classes));
        }
        let extents = [
            self.in_channels,
            self.visual_kernel,
            self.encoder_kernel,
            self.capsule_kernel,
            self.routing_iterations,
        ]
        .into_iter()
        .chain(self.visual_channels)
        .chain(self.visual_dilations)
        .chain(self.encoder_channels)
        .chain(self.capsule_types)
        .chain(self.capsule_dims)
        .chain(self.decoder_channels);
        if extents.into_iter().any(|e| e == 0) {
            return bad("all extents, channels and counts must be positive".into());
        }
        for (name, k) in [
            ("visual_kernel", self.visual_kernel),
            ("encoder_kernel", self.encoder_kernel),
            ("capsule_kernel", self.capsule_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} = {k} must be odd"));
            }
        }
        if !matches!(self.first_capsule_stride, 1 | 2) {
            return bad(format!(
                "first_capsule_stride = {} must be 1 or 2",
                self.first_capsule_stride
            ));
        }
        if !self.encoder_channels[1].is_multiple_of(self.capsule_dims[0]) {
            return bad(format!(
                "encoder channels {} not divisible by primary capsule dimension {}",
                self.encoder_channels[1], self.capsule_dims[0]
            ));
        }
        self.loss_weights().validate()
    }

    /// Checks an input volume `[X, Y, Z, M]` against the network.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != self.in_channels {
            return Err(Error::shape(format!(
                "input must be [X, Y, Z, {}], got {shape:?}",
                self.in_channels
            )));
        }
        let f = self.capsule_factor();
        if shape[..3].iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::shape(format!(
                "input extents {:?} must be positive multiples of {f}",
                &shape[..3]
            )));
        }
        Ok(())
    }
}
