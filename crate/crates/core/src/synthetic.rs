//! Procedural leaf-like images for desk-scale experiments.
//!
//! A leaf is a filled polar outline `r(θ) = R·(1 + a·cos kθ)·(1 + s·cos mθ)`,
//! stretched along its main axis, with a darker midrib and a stalk. Each class
//! fixes the outline parameters and a base color; each image jitters them and
//! draws a random orientation, size and position.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Geometry;
use crate::data::{preprocess_image, DatasetIndex, ImageEntry, PreprocessConfig};
use crate::image::ImageU8;
use crate::model::{ConvSpec, NetworkConfig};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafShape {
    /// Number of major lobes.
    pub lobes: u32,
    pub lobe_depth: f64,
    /// Teeth along the margin.
    pub teeth: u32,
    pub tooth_depth: f64,
    /// Length over width.
    pub aspect: f64,
    pub color: [u8; 3],
    /// Stalk length relative to the leaf radius.
    pub stalk: f64,
}

/// Two disjoint class families: `A` for pretraining, `B` for the target task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    A,
    B,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::A => "a",
            Family::B => "b",
        }
    }

    pub fn shapes(self) -> Vec<(&'static str, LeafShape)> {
        let s = |lobes, lobe_depth, teeth, tooth_depth, aspect, color, stalk| LeafShape {
            lobes,
            lobe_depth,
            teeth,
            tooth_depth,
            aspect,
            color,
            stalk,
        };
        match self {
            Family::A => vec![
                ("round", s(0, 0.0, 0, 0.0, 1.1, [70, 130, 50], 0.3)),
                ("lanceolate", s(0, 0.0, 24, 0.04, 3.0, [60, 110, 40], 0.2)),
                ("trilobed", s(3, 0.35, 0, 0.0, 1.2, [95, 140, 45], 0.4)),
                ("heptalobed", s(7, 0.3, 0, 0.0, 1.0, [50, 100, 60], 0.35)),
                ("serrate", s(0, 0.0, 16, 0.12, 1.6, [80, 120, 30], 0.3)),
            ],
            Family::B => vec![
                ("ovate", s(0, 0.0, 0, 0.0, 1.7, [75, 125, 45], 0.3)),
                ("palmate", s(5, 0.35, 0, 0.0, 1.1, [75, 125, 45], 0.35)),
                ("toothed", s(0, 0.0, 20, 0.1, 1.7, [75, 125, 45], 0.3)),
                ("bilobed", s(2, 0.3, 0, 0.0, 1.3, [75, 125, 45], 0.3)),
                ("pale", s(0, 0.0, 0, 0.0, 1.7, [140, 160, 70], 0.3)),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub family: Family,
    pub images_per_class: usize,
    /// Side of the square raw images.
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            family: Family::B,
            images_per_class: 50,
            size: 64,
            seed: 0,
        }
    }
}

/// Preprocessing for desk-scale runs: 38 px content, 3 px margin, 44 px canvas.
pub fn desk_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        content: 38,
        margin: 3,
        threshold: 240,
    }
}

pub fn desk_geometry() -> Geometry {
    Geometry { canvas: 44, crop: 38 }
}

/// Two conv blocks and a 128-wide hidden layer on 38 px inputs.
pub fn desk_network() -> NetworkConfig {
    NetworkConfig {
        input_size: 38,
        input_channels: 3,
        convs: vec![ConvSpec { kernel: 5, filters: 8 }, ConvSpec { kernel: 3, filters: 16 }],
        pool_size: 2,
        pool_stride: 2,
        conv_relu: false,
        fc_width: 128,
        dropout: 0.5,
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, v: f64, rel: f64) -> f64 {
    v * (1.0 + rng.random_range(-rel..=rel))
}

fn shade(base: u8, delta: f64) -> u8 {
    (base as f64 + delta).round().clamp(0.0, 235.0) as u8
}

/// One leaf on a white square canvas.
pub fn render_leaf<R: Rng + ?Sized>(shape: &LeafShape, size: usize, rng: &mut R) -> ImageU8 {
    let n = size as f64;
    let radius = n * rng.random_range(0.2..0.26);
    let aspect = jitter(rng, shape.aspect, 0.08);
    let lobe_depth = jitter(rng, shape.lobe_depth, 0.15);
    let tooth_depth = jitter(rng, shape.tooth_depth, 0.15);
    let lobe_phase = rng.random_range(-0.15..0.15);
    let orientation = rng.random_range(0.0..2.0 * PI);
    let cx = n / 2.0 + rng.random_range(-0.06..0.06) * n;
    let cy = n / 2.0 + rng.random_range(-0.06..0.06) * n;
    let tone = rng.random_range(-18.0..18.0);
    let color = shape.color.map(|c| shade(c, tone));
    let vein = shape.color.map(|c| shade(c, tone - 35.0));
    // Semi-axes: the leaf length runs along the local y axis.
    let half_len = radius * aspect.sqrt();
    let half_wid = radius / aspect.sqrt();
    let stalk_len = shape.stalk * half_len * rng.random_range(0.8..1.2);
    let (sin_o, cos_o) = orientation.sin_cos();

    let outline = |theta: f64| {
        (1.0 + lobe_depth * (shape.lobes as f64 * theta + lobe_phase).cos())
            * (1.0 + tooth_depth * (shape.teeth as f64 * theta).cos())
            / (1.0 + lobe_depth.max(0.0))
    };

    let mut img = ImageU8::white(size, size);
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            // rotate into the leaf frame
            let lx = cos_o * dx + sin_o * dy;
            let ly = -sin_o * dx + cos_o * dy;
            let (ex, ey) = (lx / half_wid, ly / half_len);
            let rho = (ex * ex + ey * ey).sqrt();
            let theta = ey.atan2(ex);
            let inside = rho <= outline(theta);
            let on_stalk = ly > 0.0 && ly <= half_len + stalk_len && lx.abs() <= 0.6;
            let on_vein = inside && lx.abs() <= 0.5;
            let rgb = if on_vein || (on_stalk && !inside) {
                vein
            } else if inside {
                let light = -12.0 * ey;
                color.map(|c| shade(c, light))
            } else {
                continue;
            };
            img.set_pixel(px, py, rgb);
        }
    }
    img
}

/// Raw images with their index, grouped by class in order.
pub fn generate(config: &SyntheticConfig) -> Result<(DatasetIndex, Vec<ImageU8>)> {
    if config.size < 16 || config.images_per_class == 0 {
        return Err(Error::Parameter("synthetic images need size ≥ 16 and at least one image per class".into()));
    }
    let shapes = config.family.shapes();
    let mut rng = rng::stream(config.seed, rng::SYNTHETIC);
    let mut images = Vec::new();
    let mut entries = Vec::new();
    for (class, (name, shape)) in shapes.iter().enumerate() {
        for i in 0..config.images_per_class {
            images.push(render_leaf(shape, config.size, &mut rng));
            entries.push(ImageEntry {
                class,
                path: format!("{name}/{i:04}.png"),
                part: None,
            });
        }
    }
    let classes = shapes.iter().map(|(n, _)| n.to_string()).collect();
    let index = DatasetIndex::new(format!("synthetic-{}", config.family.name()), classes, entries)?;
    Ok((index, images))
}

/// Generated images after preprocessing, ready for augmentation.
pub fn generate_preprocessed(
    config: &SyntheticConfig,
    preprocess: &PreprocessConfig,
) -> Result<(DatasetIndex, Vec<ImageU8>)> {
    let (index, raw) = generate(config)?;
    let canvases = raw.iter().map(|img| preprocess_image(img, preprocess)).collect::<Result<_>>()?;
    Ok((index, canvases))
}

/// Writes `<root>/<class>/<nnnn>.png` and returns the index.
pub fn write_dataset(config: &SyntheticConfig, root: &Path) -> Result<DatasetIndex> {
    let (index, images) = generate(config)?;
    for (entry, img) in index.entries.iter().zip(&images) {
        let path = root.join(&entry.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        img.save(&path)?;
    }
    Ok(index)
}
