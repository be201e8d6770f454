use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of one model. `model_dim` (D), `expand` (E),
/// `patch_size` (P), `state_dim` (N), and `num_blocks` (M) are the searched
/// quantities; the rest pin the input geometry and numeric formats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    /// Token / model dimension D.
    pub model_dim: usize,
    /// Expansion factor E; the internal dimension is `E * D`.
    pub expand: usize,
    /// Patch side length P; frames split into non-overlapping P x P patches.
    pub patch_size: usize,
    /// State dimension N.
    pub state_dim: usize,
    /// Number of stacked blocks M.
    pub num_blocks: usize,
    /// Causal conv kernel width K.
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// Head output size.
    pub out_dim: usize,
    /// SSM hidden-state bit-width.
    #[serde(default = "default_h_bits")]
    pub h_bits: u32,
    /// Activation bit-width everywhere outside the SSM state.
    #[serde(default = "default_act_bits")]
    pub act_bits: u32,
}

fn default_conv_kernel() -> usize {
    4
}

fn default_h_bits() -> u32 {
    24
}

fn default_act_bits() -> u32 {
    8
}

impl MambaConfig {
    /// Internal (expanded) dimension `E * D`.
    pub fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }

    /// Sequence length L derived from the frame geometry and patch size.
    pub fn seq_len(&self) -> usize {
        (self.in_height / self.patch_size) * (self.in_width / self.patch_size)
    }

    /// Flattened patch vector length `P^2 * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Total input bits of one frame at the activation width, for the
    /// pipeline throughput formula.
    pub fn frame_input_bits(&self) -> u64 {
        (self.in_channels * self.in_height * self.in_width) as u64 * self.act_bits as u64
    }

    /// Compact identity string used to key sweep points and metrics files.
    pub fn key(&self) -> String {
        format!(
            "d{}_e{}_p{}_n{}_m{}",
            self.model_dim, self.expand, self.patch_size, self.state_dim, self.num_blocks
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("expand", self.expand),
            ("patch_size", self.patch_size),
            ("state_dim", self.state_dim),
            ("conv_kernel", self.conv_kernel),
            ("in_channels", self.in_channels),
            ("in_height", self.in_height),
            ("in_width", self.in_width),
            ("out_dim", self.out_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.in_height % self.patch_size != 0 || self.in_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "frame geometry {}x{} not divisible by patch size {}",
                self.in_height, self.in_width, self.patch_size
            )));
        }
        if self.act_bits < 2 || self.act_bits > 16 {
            return Err(Error::Config(format!("act_bits {} outside 2..=16", self.act_bits)));
        }
        if self.h_bits <= self.act_bits || self.h_bits > 32 {
            return Err(Error::Config(format!(
                "h_bits {} must exceed act_bits {} and stay within 32",
                self.h_bits, self.act_bits
            )));
        }
        Ok(())
    }

    /// The pose-estimation configuration: D=20, E=2, P=2, N=8, M=2 over
    /// 8x8x5 voxel frames, regressing 57 joint coordinates.
    pub fn mars() -> Self {
        MambaConfig {
            model_dim: 20,
            expand: 2,
            patch_size: 2,
            state_dim: 8,
            num_blocks: 2,
            conv_kernel: 4,
            in_channels: 5,
            in_height: 8,
            in_width: 8,
            out_dim: 57,
            h_bits: 24,
            act_bits: 8,
        }
    }

    /// Small grayscale-classification configuration (28x28 inputs, 10 classes).
    pub fn fashion_mnist() -> Self {
        MambaConfig {
            model_dim: 24,
            expand: 2,
            patch_size: 2,
            state_dim: 16,
            num_blocks: 4,
            conv_kernel: 4,
            in_channels: 1,
            in_height: 28,
            in_width: 28,
            out_dim: 10,
            h_bits: 24,
            act_bits: 8,
        }
    }

    /// Small RGB-classification configuration (32x32 inputs, 10 classes).
    pub fn cifar10() -> Self {
        MambaConfig {
            model_dim: 64,
            expand: 2,
            patch_size: 4,
            state_dim: 32,
            num_blocks: 4,
            conv_kernel: 4,
            in_channels: 3,
            in_height: 32,
            in_width: 32,
            out_dim: 10,
            h_bits: 24,
            act_bits: 8,
        }
    }
}
