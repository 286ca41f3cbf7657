use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Consecutive frames (oldest first) and their per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `[frames, h0, w0, channels]`
    pub frames: Tensor,
    /// `frames * h0 * w0` labels, same frame order.
    pub masks: Arc<[u8]>,
}

impl VideoClip {
    pub fn new(frames: Tensor, masks: Vec<u8>, classes: usize) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("clip frames must be rank 4, got {s:?}")));
        }
        if masks.len() != s[0] * s[1] * s[2] {
            return Err(Error::dim(format!(
                "{} mask labels for frames of shape {s:?}",
                masks.len()
            )));
        }
        if let Some(&bad) = masks.iter().find(|&&m| m as usize >= classes) {
            return Err(Error::data(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            frames,
            masks: masks.into(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[3]
    }

    fn frame_pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Labels of the last (current) frame.
    pub fn current_mask(&self) -> Arc<[u8]> {
        let n = self.frame_pixels();
        let start = (self.frame_count() - 1) * n;
        Arc::from(&self.masks[start..start + n])
    }

    pub fn mask(&self, frame: usize) -> &[u8] {
        let n = self.frame_pixels();
        &self.masks[frame * n..(frame + 1) * n]
    }

    /// Single-frame clip holding only the current frame.
    pub fn current_only(&self) -> VideoClip {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let n = h * w * c;
        let start = (self.frame_count() - 1) * n;
        let frames = Tensor::from_parts(vec![1, h, w, c], self.frames.data()[start..start + n].to_vec());
        VideoClip {
            frames,
            masks: self.current_mask(),
        }
    }
}
