use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::nnops::PadMode;

/// Architecture hyperparameters.
///
/// Stage `i` runs at `H / 2^(i+1)`: the stem is the first stride-2
/// downsampling, and the refinement stage runs at full resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_dims: Vec<usize>,
    pub encoder_depths: Vec<usize>,
    /// Depths of the decoder stages from the deepest skip level up: stage 3, 2, 1.
    pub decoder_depths: Vec<usize>,
    /// Pool strides of the first key/value branch per stage.
    pub r1: Vec<usize>,
    pub r2: Vec<usize>,
    /// Pool kernels; must equal the strides.
    pub k1: Vec<usize>,
    pub k2: Vec<usize>,
    /// Attention heads of the transformer half of each stage.
    pub heads: Vec<usize>,
    pub refine_depth: usize,
    pub refine_r1: usize,
    pub refine_r2: usize,
    pub refine_k1: usize,
    pub refine_k2: usize,
    pub refine_heads: usize,
    pub ffn_expansion: usize,
    pub attention: AttentionVariant,
    pub use_lcb: bool,
    pub channel_shuffle: bool,
    pub global_residual: bool,
    /// Padding of the stride-2 stem and downsampling convolutions.
    pub downsample_padding: PadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_dims: vec![32, 64, 128, 256],
            encoder_depths: vec![2, 3, 4, 6],
            decoder_depths: vec![4, 3, 2],
            r1: vec![16, 8, 4, 2],
            r2: vec![8, 4, 2, 1],
            k1: vec![16, 8, 4, 2],
            k2: vec![8, 4, 2, 1],
            heads: vec![2, 2, 4, 8],
            refine_depth: 1,
            refine_r1: 16,
            refine_r2: 8,
            refine_k1: 16,
            refine_k2: 8,
            refine_heads: 2,
            ffn_expansion: 4,
            attention: AttentionVariant::Aa,
            use_lcb: true,
            channel_shuffle: true,
            global_residual: true,
            downsample_padding: PadMode::Zeros,
        }
    }
}

impl ModelConfig {
    /// Small network used for desk-scale training and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            stage_dims: vec![8, 16, 32, 64],
            encoder_depths: vec![1, 1, 1, 1],
            decoder_depths: vec![1, 1, 1],
            heads: vec![2, 2, 2, 2],
            ffn_expansion: 1,
            ..ModelConfig::default()
        }
    }

    /// Heads for a transformer half `channels / 2` wide: `max(2, channels / 32)`.
    pub fn default_heads(stage_dims: &[usize]) -> Vec<usize> {
        stage_dims.iter().map(|&d| (d / 32).max(2)).collect()
    }

    /// Input side length must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        32
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_dims.len();
        if n != 4 {
            return Err(Error::config(format!("expected 4 stages, got {n}")));
        }
        let lens = [
            ("encoder_depths", self.encoder_depths.len(), 4),
            ("decoder_depths", self.decoder_depths.len(), 3),
            ("r1", self.r1.len(), 4),
            ("r2", self.r2.len(), 4),
            ("k1", self.k1.len(), 4),
            ("k2", self.k2.len(), 4),
            ("heads", self.heads.len(), 4),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::config(format!("{name} has {got} entries, expected {want}")));
            }
        }
        for (i, &d) in self.stage_dims.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return Err(Error::config(format!("stage_dims[{i}] = {d} must be even and positive")));
            }
            if i > 0 && d <= self.stage_dims[i - 1] {
                return Err(Error::config("stage_dims must be strictly increasing"));
            }
            let h = self.heads[i];
            if h == 0 || !h.is_multiple_of(2) || (d / 2) % h != 0 {
                return Err(Error::config(format!(
                    "heads[{i}] = {h} must be even and divide the {}-channel attention half",
                    d / 2
                )));
            }
        }
        for i in 0..4 {
            if self.k1[i] != self.r1[i] || self.k2[i] != self.r2[i] {
                return Err(Error::config(format!("stage {i}: pool kernels must equal strides")));
            }
            if self.r1[i] == 0 || self.r2[i] == 0 {
                return Err(Error::config(format!("stage {i}: pool strides must be positive")));
            }
        }
        if self.refine_k1 != self.refine_r1 || self.refine_k2 != self.refine_r2 {
            return Err(Error::config("refinement pool kernels must equal strides"));
        }
        let rh = self.refine_heads;
        if rh == 0 || !rh.is_multiple_of(2) || !(self.stage_dims[0] / 2).is_multiple_of(rh) {
            return Err(Error::config(format!("refine_heads = {rh} is invalid")));
        }
        if self.encoder_depths.iter().chain(&self.decoder_depths).any(|&d| d == 0) || self.refine_depth == 0 {
            return Err(Error::config("depths must be ≥ 1"));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("ffn_expansion must be ≥ 1"));
        }
        Ok(())
    }
}
