use crate::error::{Error, Result};

/// Which optional blocks of the network are active. Used by ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleFlags {
    /// Temporal cross-attention over past frames.
    pub temporal: bool,
    /// Indicator-driven channel selection.
    pub channel_select: bool,
    /// Feed the site indicator into channel selection (zeros when off).
    pub prompt: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self {
            temporal: true,
            channel_select: true,
            prompt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    /// Side of the square pixel patch embedded into one feature token.
    pub patch: usize,
    pub channels: usize,
    pub window: usize,
    /// Pooling size per frame, oldest first; the last entry is the current frame.
    pub pools: Vec<usize>,
    /// Receptive field per frame. Carried in the config only; per-frame pooling
    /// already realizes the coarser view of distant frames.
    pub receptive_fields: Vec<usize>,
    /// Clip length, current frame included.
    pub frames: usize,
    pub classes: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub indicator_dim: usize,
    /// Weight of the Dice term in the segmentation loss.
    pub lambda_dice: f64,
    pub flags: ModuleFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            frame_h: 56,
            frame_w: 56,
            patch: 2,
            channels: 16,
            window: 7,
            pools: vec![7, 4, 2, 1],
            receptive_fields: vec![49, 20, 6, 7],
            frames: 4,
            classes: 4,
            mlp_hidden: 32,
            decoder_hidden: 32,
            indicator_dim: 16,
            lambda_dice: 0.3,
            flags: ModuleFlags::default(),
        }
    }
}

impl ModelConfig {
    /// Feature-map height.
    pub fn feat_h(&self) -> usize {
        self.frame_h / self.patch
    }

    pub fn feat_w(&self) -> usize {
        self.frame_w / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.feat_h() * self.feat_w()
    }

    pub fn pixels(&self) -> usize {
        self.frame_h * self.frame_w
    }

    pub fn windows(&self) -> (usize, usize) {
        (self.feat_h() / self.window, self.feat_w() / self.window)
    }

    /// Frame sides must be multiples of this for every window and pooling
    /// grid to tile the feature map.
    pub fn frame_alignment(&self) -> usize {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let lcm = std::iter::once(self.window)
            .chain(self.pools.iter().copied())
            .filter(|&d| d > 0)
            .fold(1, |acc, d| acc / gcd(acc, d) * d);
        self.patch.max(1) * lcm
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("frame_h", self.frame_h),
            ("frame_w", self.frame_w),
            ("patch", self.patch),
            ("channels", self.channels),
            ("window", self.window),
            ("frames", self.frames),
            ("classes", self.classes),
            ("mlp_hidden", self.mlp_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("indicator_dim", self.indicator_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::dim(format!("{name} must be positive")));
        }
        if self.classes > u8::MAX as usize + 1 {
            return Err(Error::dim("class count exceeds u8 labels"));
        }
        if self.frame_h % self.patch != 0 || self.frame_w % self.patch != 0 {
            return Err(Error::dim(format!(
                "frame {}x{} not divisible by patch {}",
                self.frame_h, self.frame_w, self.patch
            )));
        }
        if self.pools.len() != self.frames {
            return Err(Error::dim(format!(
                "{} pooling sizes for {} frames",
                self.pools.len(),
                self.frames
            )));
        }
        let (h, w) = (self.feat_h(), self.feat_w());
        for &d in std::iter::once(&self.window).chain(&self.pools) {
            if d == 0 || h % d != 0 || w % d != 0 {
                return Err(Error::dim(format!("feature map {h}x{w} not divisible by {d}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_dice) {
            return Err(Error::dim(format!("lambda_dice {} outside [0, 1]", self.lambda_dice)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_alignment_is_patch_times_lcm() {
        assert_eq!(ModelConfig::default().frame_alignment(), 56);
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.feat_h(), cfg.feat_w()), (28, 28));
        assert_eq!(cfg.windows(), (4, 4));
    }

    #[test]
    fn divisibility_is_enforced() {
        let cfg = ModelConfig {
            pools: vec![3, 4, 2, 1],
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Dimension(_))));
        let cfg = ModelConfig {
            pools: vec![2, 1],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
