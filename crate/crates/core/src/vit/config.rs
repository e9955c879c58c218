use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
    pub classes: usize,
}

impl Default for ViTConfig {
    /// Desk-scale model: 32x32x3 input, 8x8 patches (16 tokens), D=64,
    /// 4 heads, 2 layers, MLP 128, 10 classes.
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            layers: 2,
            mlp_dim: 128,
            classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "patch size {p} must divide image {}x{}",
                self.image_h, self.image_w
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.classes == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("zero-sized dimension".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Token count `N = hw / p^2` (class token excluded).
    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Flattened patch length `L = p^2 c`.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = ViTConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_patches(), 16);
        assert_eq!(cfg.patch_len(), 192);
        assert_eq!(cfg.head_dim(), 16);
    }

    #[test]
    fn reference_scale_token_count() {
        let cfg = ViTConfig {
            image_h: 224,
            image_w: 224,
            patch_size: 16,
            ..ViTConfig::default()
        };
        assert_eq!(cfg.n_patches(), 196);
        assert_eq!(cfg.patch_len(), 768);
    }

    #[test]
    fn invalid_configs() {
        let bad_patch = ViTConfig {
            patch_size: 5,
            ..ViTConfig::default()
        };
        assert!(bad_patch.validate().is_err());
        let bad_heads = ViTConfig {
            heads: 3,
            ..ViTConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }
}
