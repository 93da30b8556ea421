use crate::error::{Error, Result};

/// Layer sizes of the extractor, bag head and domain head.
///
/// The extractor is `conv(c→conv1, k×k)-relu-maxpool → conv(conv1→conv2, k×k)-relu-maxpool
/// → flatten`, so the feature dimension follows from the patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel_size: usize,
    /// Width after the fully connected layer that precedes attention.
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub domain_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            patch_size: 32,
            conv1_channels: 8,
            conv2_channels: 16,
            kernel_size: 3,
            embed_dim: 512,
            attention_hidden: 128,
            domain_hidden: 1024,
        }
    }
}

impl ModelConfig {
    /// Smaller heads for quick experiments; the extractor is unchanged.
    pub fn compact(patch_size: usize) -> Self {
        ModelConfig {
            patch_size,
            embed_dim: 64,
            attention_hidden: 32,
            domain_hidden: 64,
            ..ModelConfig::default()
        }
    }

    /// Spatial side of the final feature map, if the patch is large enough.
    pub fn feature_map_side(&self) -> Option<usize> {
        let k = self.kernel_size;
        let after_conv1 = self.patch_size.checked_sub(k)? + 1;
        let pooled1 = after_conv1 / 2;
        let after_conv2 = pooled1.checked_sub(k)? + 1;
        let pooled2 = after_conv2 / 2;
        (pooled2 > 0).then_some(pooled2)
    }

    /// Feature dimension Q produced by the extractor.
    pub fn feature_dim(&self) -> usize {
        let side = self.feature_map_side().unwrap_or(0);
        self.conv2_channels * side * side
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("in_channels", self.in_channels),
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
            ("kernel_size", self.kernel_size),
            ("embed_dim", self.embed_dim),
            ("attention_hidden", self.attention_hidden),
            ("domain_hidden", self.domain_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.feature_map_side().is_none() {
            return Err(Error::Config(format!(
                "patch_size {} too small for two {}x{} convolutions with pooling",
                self.patch_size, self.kernel_size, self.kernel_size
            )));
        }
        Ok(())
    }
}
