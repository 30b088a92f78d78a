use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// Which frozen projections receive the additive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateTarget {
    /// Query, key and value projections of self-attention.
    AttentionQkv,
    /// Both fully connected layers of the MLP.
    Mlp,
}

impl UpdateTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateTarget::AttentionQkv => "attention_qkv",
            UpdateTarget::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention_qkv" => Some(UpdateTarget::AttentionQkv),
            "mlp" => Some(UpdateTarget::Mlp),
            _ => None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Shape of the encoder and of its adaptation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the MLP; `4 * embed_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
    /// Number of blocks, counted from the last one, that receive updates.
    pub adapted_blocks: usize,
    pub update_target: UpdateTarget,
    #[serde(default = "default_true")]
    pub share_updates: bool,
}

impl Default for EncoderConfig {
    /// Desk-scale default: 16x16x3 images, 4x4 patches, d=32, six blocks.
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            depth: 6,
            heads: 4,
            mlp_hidden: Some(128),
            adapted_blocks: 6,
            update_target: UpdateTarget::AttentionQkv,
            share_updates: true,
        }
    }
}

/// Breakdown of trainable parameters during the base session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub delta_params: usize,
    pub bias_params: usize,
    pub classifier_params: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.delta_params + self.bias_params + self.classifier_params
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
        ];
        for (name, value) in positive {
            if value == 0 {
                return contract_err(format!("encoder.{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return contract_err(format!(
                "encoder.image_size {} is not divisible by encoder.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return contract_err(format!(
                "encoder.embed_dim {} is not divisible by encoder.heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_hidden == Some(0) {
            return contract_err("encoder.mlp_hidden must be positive");
        }
        if self.adapted_blocks > self.depth {
            return contract_err(format!(
                "encoder.adapted_blocks {} exceeds encoder.depth {}",
                self.adapted_blocks, self.depth
            ));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.embed_dim)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per sequence: one [CLS] plus the patches.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Index of the first adapted block; equals `depth` when none are adapted.
    pub fn first_adapted_block(&self) -> usize {
        self.depth - self.adapted_blocks
    }

    pub fn is_adapted(&self, block: usize) -> bool {
        block < self.depth && block >= self.first_adapted_block()
    }

    /// Number of distinct update sets held by the model.
    pub fn delta_sets(&self) -> usize {
        if self.share_updates {
            1
        } else {
            self.adapted_blocks
        }
    }

    /// Shapes of the matrices in one update set.
    pub fn delta_shapes(&self) -> Vec<[usize; 2]> {
        let d = self.embed_dim;
        match self.update_target {
            UpdateTarget::AttentionQkv => vec![[d, d]; 3],
            UpdateTarget::Mlp => vec![[d, self.mlp_hidden()], [self.mlp_hidden(), d]],
        }
    }

    /// Trainable parameters of the base session for a classifier over
    /// `classes` classes.
    pub fn trainable_parameter_count(&self, classes: usize) -> ParameterCount {
        let n = self.adapted_blocks;
        let per_set: usize = self.delta_shapes().iter().map(|s| s[0] * s[1]).sum();
        let delta_params = if n == 0 {
            0
        } else if self.share_updates {
            per_set
        } else {
            n * per_set
        };
        let per_block_bias = match self.update_target {
            UpdateTarget::AttentionQkv => 3 * self.embed_dim,
            UpdateTarget::Mlp => self.mlp_hidden() + self.embed_dim,
        };
        ParameterCount {
            delta_params,
            bias_params: n * per_block_bias,
            classifier_params: classes * self.embed_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, target: UpdateTarget, adapted: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: d,
            heads: 2,
            depth: 12,
            mlp_hidden: None,
            adapted_blocks: adapted,
            update_target: target,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn parameter_counts() {
        let c = cfg(8, UpdateTarget::AttentionQkv, 12);
        assert_eq!(c.trainable_parameter_count(0).delta_params, 192);
        let c = cfg(8, UpdateTarget::Mlp, 12);
        assert_eq!(c.mlp_hidden(), 32);
        assert_eq!(c.trainable_parameter_count(0).delta_params, 512);
        let c = cfg(8, UpdateTarget::AttentionQkv, 0);
        let count = c.trainable_parameter_count(10);
        assert_eq!(count.delta_params, 0);
        assert_eq!(count.bias_params, 0);
        assert_eq!(count.classifier_params, 80);
    }

    #[test]
    fn unshared_updates_scale_with_blocks() {
        let mut c = cfg(8, UpdateTarget::AttentionQkv, 4);
        c.share_updates = false;
        let count = c.trainable_parameter_count(0);
        assert_eq!(count.delta_params, 4 * 192);
        assert_eq!(count.bias_params, 4 * 24);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = EncoderConfig::default();
        c.patch_size = 5;
        assert!(c.validate().unwrap_err().to_string().contains("patch_size"));
        let mut c = EncoderConfig::default();
        c.heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
        let mut c = EncoderConfig::default();
        c.adapted_blocks = 7;
        assert!(c.validate().unwrap_err().to_string().contains("adapted_blocks"));
        EncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn adapted_blocks_count_from_the_end() {
        let c = EncoderConfig {
            adapted_blocks: 2,
            ..EncoderConfig::default()
        };
        let adapted: Vec<_> = (0..c.depth).filter(|&b| c.is_adapted(b)).collect();
        assert_eq!(adapted, vec![4, 5]);
    }
}
