use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the twin networks a model instance is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// Regresses a dense depth map in meters.
    Depth,
    /// Regresses the per-pixel probability of a valid return.
    Mask,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Depth => "depth",
            NetKind::Mask => "mask",
        }
    }
}

/// Architecture hyperparameters shared by both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the three sparse convolutions.
    pub sparse_channels: Vec<usize>,
    /// Kernel sizes of the three sparse convolutions (odd).
    pub sparse_kernels: Vec<usize>,
    pub sparse_eps: f64,
    /// Channels per residual stage; each stage halves the resolution.
    pub trunk_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    /// Channels of the frame encoding h on the latent grid.
    pub encoding_channels: usize,
    /// Channels of the latent z.
    pub latent_channels: usize,
    /// Hidden channels of the prior, posterior and predictor cells.
    pub lstm_hidden: usize,
    pub lstm_kernel: usize,
    /// Decoder channels from the latent grid up to full resolution
    /// (one entry per trunk stage plus one for the full-resolution head).
    pub decoder_channels: Vec<usize>,
    /// Depth outputs are confined to [0, max_range).
    pub max_range: f64,
    /// Input depths are divided by this before encoding.
    pub depth_scale: f64,
    /// Initial dense output level in meters for the Depth network.
    pub depth_prior: f64,
    /// Offsets the Depth head so that zero logits reproduce the previous
    /// frame, densified by a windowed mean over the first sparse kernel.
    pub input_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 48,
            width: 160,
            sparse_channels: vec![16, 16, 16],
            sparse_kernels: vec![11, 7, 5],
            sparse_eps: 1e-8,
            trunk_channels: vec![16, 32, 64, 64],
            blocks_per_stage: 2,
            norm_groups: 8,
            norm_eps: 1e-5,
            encoding_channels: 64,
            latent_channels: 64,
            lstm_hidden: 64,
            lstm_kernel: 3,
            decoder_channels: vec![64, 64, 32, 16, 16],
            max_range: 100.0,
            depth_scale: 10.0,
            depth_prior: 20.0,
            input_residual: true,
        }
    }
}

impl ModelConfig {
    /// Full-resolution configuration: 192x640 frames on a 3x10 latent grid with 512 channels.
    pub fn full_scale() -> Self {
        ModelConfig {
            height: 192,
            width: 640,
            sparse_channels: vec![16, 16, 16],
            sparse_kernels: vec![11, 7, 5],
            trunk_channels: vec![64, 128, 256, 512, 512, 512],
            blocks_per_stage: 3,
            norm_groups: 8,
            encoding_channels: 512,
            latent_channels: 512,
            lstm_hidden: 512,
            decoder_channels: vec![512, 512, 256, 128, 64, 32, 32],
            ..ModelConfig::default()
        }
    }

    /// Small configuration sized for CPU training at 48x160.
    pub fn compact() -> Self {
        ModelConfig {
            sparse_channels: vec![8, 8, 8],
            sparse_kernels: vec![5, 3, 3],
            trunk_channels: vec![8, 16, 16, 16],
            blocks_per_stage: 1,
            norm_groups: 4,
            encoding_channels: 16,
            latent_channels: 8,
            lstm_hidden: 16,
            decoder_channels: vec![16, 16, 16, 8, 8],
            ..ModelConfig::default()
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.trunk_channels.len()
    }

    pub fn latent_grid(&self) -> (usize, usize) {
        let d = self.downsample();
        (self.height / d, self.width / d)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sparse_channels.len() != 3 || self.sparse_kernels.len() != 3 {
            return fail("exactly three sparse convolution layers are required".into());
        }
        if let Some(k) = self.sparse_kernels.iter().find(|k| *k % 2 == 0) {
            return fail(format!("sparse kernel size {k} must be odd"));
        }
        if !(self.sparse_eps > 0.0) || !(self.norm_eps > 0.0) {
            return fail("eps values must be positive".into());
        }
        if self.trunk_channels.is_empty() || self.blocks_per_stage == 0 {
            return fail("the residual trunk needs at least one stage and block".into());
        }
        let d = self.downsample();
        if self.height == 0 || self.width == 0 || self.height % d != 0 || self.width % d != 0 {
            return fail(format!(
                "resolution {}x{} is not divisible by the downsample factor {d}",
                self.height, self.width
            ));
        }
        if self.decoder_channels.len() != self.trunk_channels.len() + 1 {
            return fail(format!(
                "decoder needs {} channel entries, got {}",
                self.trunk_channels.len() + 1,
                self.decoder_channels.len()
            ));
        }
        let normed = self
            .trunk_channels
            .iter()
            .chain(&self.decoder_channels[..self.trunk_channels.len()]);
        for &c in normed {
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return fail(format!(
                    "{c} channels are not divisible into {} norm groups",
                    self.norm_groups
                ));
            }
        }
        let zero = [
            self.encoding_channels,
            self.latent_channels,
            self.lstm_hidden,
        ]
        .contains(&0)
            || self.sparse_channels.contains(&0)
            || self.decoder_channels.contains(&0);
        if zero {
            return fail("channel counts must be positive".into());
        }
        if self.lstm_kernel % 2 == 0 {
            return fail("lstm kernel size must be odd".into());
        }
        if !(self.max_range > 0.0) || !(self.depth_scale > 0.0) {
            return fail("max_range and depth_scale must be positive".into());
        }
        if !(self.depth_prior > 0.0 && self.depth_prior < self.max_range) {
            return fail("depth_prior must lie in (0, max_range)".into());
        }
        Ok(())
    }
}
