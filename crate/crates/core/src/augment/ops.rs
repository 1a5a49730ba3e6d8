//! Elementary pixel operations. All resampling is bilinear with pixel-center
//! alignment and reads white outside the source canvas.

use crate::image::{ImageU8, WHITE};
use crate::{Error, Result};

/// Rounds half away from zero and clamps into the 8-bit range.
#[inline]
pub(crate) fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at continuous pixel coordinates; out-of-canvas taps read white.
#[inline]
fn sample(img: &ImageU8, sx: f64, sy: f64) -> [f64; 3] {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let (w, h) = (img.width() as isize, img.height() as isize);
    let data = img.data();
    let tap = |x: isize, y: isize| -> [u8; 3] {
        if x < 0 || y < 0 || x >= w || y >= h {
            WHITE
        } else {
            let i = ((y * w + x) * 3) as usize;
            [data[i], data[i + 1], data[i + 2]]
        }
    };
    let p00 = tap(x0, y0);
    let mut out = [0.0; 3];
    if fx == 0.0 && fy == 0.0 {
        for c in 0..3 {
            out[c] = p00[c] as f64;
        }
        return out;
    }
    let p10 = tap(x0 + 1, y0);
    let p01 = tap(x0, y0 + 1);
    let p11 = tap(x0 + 1, y0 + 1);
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Builds an output canvas by pulling every pixel from `src_of(x, y)`.
fn resample(img: &ImageU8, out_h: usize, out_w: usize, src_of: impl Fn(f64, f64) -> (f64, f64)) -> ImageU8 {
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = src_of(x as f64, y as f64);
            let v = sample(img, sx, sy);
            out.extend(v.iter().map(|&c| to_u8(c)));
        }
    }
    ImageU8::from_raw(out_h, out_w, out).expect("resample output sized by construction")
}

fn center(img: &ImageU8) -> (f64, f64) {
    ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0)
}

/// Sine and cosine with exact values on multiples of 90°.
fn sin_cos_degrees(angle: f64) -> (f64, f64) {
    let a = angle.rem_euclid(360.0);
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == 90.0 {
        (1.0, 0.0)
    } else if a == 180.0 {
        (0.0, -1.0)
    } else if a == 270.0 {
        (-1.0, 0.0)
    } else {
        a.to_radians().sin_cos()
    }
}

/// Rotates counter-clockwise (in image coordinates, y down) about the canvas
/// center. The canvas size is unchanged.
pub fn rotate(img: &ImageU8, angle: f64) -> ImageU8 {
    if angle.rem_euclid(360.0) == 0.0 {
        return img.clone();
    }
    let (sin, cos) = sin_cos_degrees(angle);
    let (cx, cy) = center(img);
    resample(img, img.height(), img.width(), |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        // inverse rotation maps each destination pixel back into the source
        (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    })
}

/// Scales content about the canvas center; the canvas size is unchanged.
pub fn rescale(img: &ImageU8, factor: f64) -> Result<ImageU8> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Parameter(format!("scale factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (cx, cy) = center(img);
    Ok(resample(img, img.height(), img.width(), |x, y| {
        (cx + (x - cx) / factor, cy + (y - cy) / factor)
    }))
}

/// Resizes to `out_h × out_w` without preserving the aspect ratio.
pub fn resize(img: &ImageU8, out_h: usize, out_w: usize) -> ImageU8 {
    if out_h == img.height() && out_w == img.width() {
        return img.clone();
    }
    let sx = img.width() as f64 / out_w as f64;
    let sy = img.height() as f64 / out_h as f64;
    let max_x = img.width() as f64 - 1.0;
    let max_y = img.height() as f64 - 1.0;
    // edge-clamped so a resize never pulls white in from outside the source
    resample(img, out_h, out_w, |x, y| {
        (((x + 0.5) * sx - 0.5).clamp(0.0, max_x), ((y + 0.5) * sy - 0.5).clamp(0.0, max_y))
    })
}

/// Copies the `height × width` window whose top-left corner is `(x, y)`.
pub fn crop_rect(img: &ImageU8, x: usize, y: usize, width: usize, height: usize) -> Result<ImageU8> {
    if x + width > img.width() || y + height > img.height() {
        return Err(Error::Parameter(format!(
            "crop window {width}x{height} at ({x}, {y}) exceeds {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::with_capacity(width * height * 3);
    for row in y..y + height {
        let start = (row * img.width() + x) * 3;
        out.extend_from_slice(&img.data()[start..start + width * 3]);
    }
    ImageU8::from_raw(height, width, out)
}

/// Square crop of side `size`.
pub fn crop(img: &ImageU8, x: usize, y: usize, size: usize) -> Result<ImageU8> {
    crop_rect(img, x, y, size, size)
}

/// `v' = clamp(round(v · factor))` on every channel, background included.
pub fn adjust_contrast(img: &ImageU8, factor: f64) -> ImageU8 {
    if factor == 1.0 {
        return img.clone();
    }
    map_values(img, |v| to_u8(v as f64 * factor))
}

/// `v' = clamp(round(v + delta))` on every channel, background included.
pub fn adjust_brightness(img: &ImageU8, delta: f64) -> ImageU8 {
    if delta == 0.0 {
        return img.clone();
    }
    map_values(img, |v| to_u8(v as f64 + delta))
}

fn map_values(img: &ImageU8, f: impl Fn(u8) -> u8) -> ImageU8 {
    let lut: Vec<u8> = (0..=255u8).map(f).collect();
    let data = img.data().iter().map(|&v| lut[v as usize]).collect();
    ImageU8::from_raw(img.height(), img.width(), data).expect("same size")
}

/// Mirrors columns.
pub fn flip_horizontal(img: &ImageU8) -> ImageU8 {
    let w = img.width();
    let mut out = Vec::with_capacity(img.data().len());
    for row in img.data().chunks_exact(w * 3) {
        for px in row.chunks_exact(3).rev() {
            out.extend_from_slice(px);
        }
    }
    ImageU8::from_raw(img.height(), w, out).expect("same size")
}
