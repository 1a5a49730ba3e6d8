use serde::{Deserialize, Serialize};

use crate::augment::{crop_rect, resize};
use crate::image::ImageU8;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Side the bounding-box contents are resized to.
    pub content: usize,
    /// White border added on each side.
    pub margin: usize,
    /// A pixel is foreground when any channel is below this value.
    pub threshold: u8,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            content: 344,
            margin: 3,
            threshold: 240,
        }
    }
}

impl PreprocessConfig {
    pub fn canvas(&self) -> usize {
        self.content + 2 * self.margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Tightest rectangle around every pixel with a channel below `threshold`.
pub fn compute_bounding_box(img: &ImageU8, threshold: u8) -> Result<Rect> {
    let (mut x0, mut y0) = (usize::MAX, usize::MAX);
    let (mut x1, mut y1) = (0, 0);
    for (y, row) in img.data().chunks_exact(img.width() * 3).enumerate() {
        for (x, px) in row.chunks_exact(3).enumerate() {
            if px.iter().any(|&v| v < threshold) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::NoForeground);
    }
    Ok(Rect {
        x: x0,
        y: y0,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
    })
}

/// Bounding box → resize to `content²` (aspect ratio not kept) → white margin.
pub fn preprocess_image(raw: &ImageU8, config: &PreprocessConfig) -> Result<ImageU8> {
    let bbox = compute_bounding_box(raw, config.threshold)?;
    let leaf = crop_rect(raw, bbox.x, bbox.y, bbox.width, bbox.height)?;
    let content = resize(&leaf, config.content, config.content);
    let side = config.canvas();
    let mut out = ImageU8::white(side, side);
    let row_bytes = config.content * 3;
    for (y, src) in content.data().chunks_exact(row_bytes).enumerate() {
        let start = ((y + config.margin) * side + config.margin) * 3;
        out.data_mut()[start..start + row_bytes].copy_from_slice(src);
    }
    Ok(out)
}
