//! Label-preserving transformations and the T0 / TR / TF sampling policies.
//!
//! A transform is applied in a fixed order: rotate, rescale, crop, contrast,
//! brightness, flip. The input canvas is the preprocessed square image
//! (350 px by default) and the output is the network input window (300 px).

mod ops;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageU8;
use crate::{Error, Result};

pub use ops::{
    adjust_brightness, adjust_contrast, crop, crop_rect, flip_horizontal, rescale, resize, rotate,
};

/// Canvas and crop window sizes shared by augmentation, batching and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Side of the preprocessed square image.
    pub canvas: usize,
    /// Side of the network input window.
    pub crop: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { canvas: 350, crop: 300 }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.canvas {
            return Err(Error::Parameter(format!(
                "crop window {} must be positive and fit the {} canvas",
                self.crop, self.canvas
            )));
        }
        Ok(())
    }

    /// Largest valid crop offset along either axis.
    pub fn max_offset(&self) -> usize {
        self.canvas - self.crop
    }

    pub fn centered_offset(&self) -> usize {
        self.max_offset() / 2
    }
}

/// Sampling ranges of the random policy. Factors are drawn as `2^u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_angle: f64,
    pub scale_log2: f64,
    pub contrast_log2: f64,
    pub brightness: f64,
    pub flip: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_angle: 360.0,
            scale_log2: 0.1,
            contrast_log2: 1.0,
            brightness: 20.0,
            flip: true,
        }
    }
}

/// One sampled transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Degrees in `[0, 360)`.
    pub angle: f64,
    pub scale: f64,
    pub crop_x: usize,
    pub crop_y: usize,
    pub contrast: f64,
    /// Additive delta in color units.
    pub brightness: f64,
    pub flip: bool,
}

impl TransformParams {
    /// No-op transform with the centered crop.
    pub fn identity(geometry: &Geometry) -> Self {
        let c = geometry.centered_offset();
        TransformParams {
            angle: 0.0,
            scale: 1.0,
            crop_x: c,
            crop_y: c,
            contrast: 1.0,
            brightness: 0.0,
            flip: false,
        }
    }

    /// Draws every field uniformly from `ranges`; the flip is a fair coin.
    pub fn random<R: Rng + ?Sized>(geometry: &Geometry, ranges: &AugmentRanges, rng: &mut R) -> Self {
        let angle = if ranges.max_angle > 0.0 {
            rng.random_range(0.0..ranges.max_angle)
        } else {
            0.0
        };
        let scale = symmetric(rng, ranges.scale_log2).exp2();
        let crop_x = rng.random_range(0..=geometry.max_offset());
        let crop_y = rng.random_range(0..=geometry.max_offset());
        let contrast = symmetric(rng, ranges.contrast_log2).exp2();
        let brightness = symmetric(rng, ranges.brightness);
        let flip = ranges.flip && rng.random_bool(0.5);
        TransformParams {
            angle,
            scale,
            crop_x,
            crop_y,
            contrast,
            brightness,
            flip,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformPolicy {
    /// The original image, centered crop.
    T0,
    /// Uniformly random transforms.
    TR { ranges: AugmentRanges },
    /// `count` rotations evenly spaced by `360 / count` degrees, centered crop.
    TF { count: usize },
}

impl TransformPolicy {
    pub fn random() -> Self {
        TransformPolicy::TR {
            ranges: AugmentRanges::default(),
        }
    }

    pub fn fixed_rotations() -> Self {
        TransformPolicy::TF { count: 64 }
    }
}

/// Parameter sets for one image: one for T0 and TR, `count` for TF.
pub fn sample_params<R: Rng + ?Sized>(
    policy: &TransformPolicy,
    geometry: &Geometry,
    rng: &mut R,
) -> Vec<TransformParams> {
    match policy {
        TransformPolicy::T0 => vec![TransformParams::identity(geometry)],
        TransformPolicy::TR { ranges } => vec![TransformParams::random(geometry, ranges, rng)],
        TransformPolicy::TF { count } => fixed_rotations(*count, geometry),
    }
}

pub fn fixed_rotations(count: usize, geometry: &Geometry) -> Vec<TransformParams> {
    let step = 360.0 / count.max(1) as f64;
    (0..count)
        .map(|i| TransformParams {
            angle: i as f64 * step,
            ..TransformParams::identity(geometry)
        })
        .collect()
}

/// Applies rotate → rescale → crop → contrast → brightness → flip.
pub fn apply_transform(img: &ImageU8, params: &TransformParams, geometry: &Geometry) -> Result<ImageU8> {
    if img.height() != geometry.canvas || img.width() != geometry.canvas {
        return Err(Error::Dimension(format!(
            "transform input must be {0}x{0}, got {1}x{2}",
            geometry.canvas,
            img.width(),
            img.height()
        )));
    }
    let rotated = rotate(img, params.angle);
    let scaled = rescale(&rotated, params.scale)?;
    let window = crop(&scaled, params.crop_x, params.crop_y, geometry.crop)?;
    let contrasted = adjust_contrast(&window, params.contrast);
    let lit = adjust_brightness(&contrasted, params.brightness);
    Ok(if params.flip { flip_horizontal(&lit) } else { lit })
}
