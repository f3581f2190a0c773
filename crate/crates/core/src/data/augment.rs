//! Training-time augmentation: integer-degree rotation in [-5, 5], a fair
//! horizontal flip, a 0..=(side-crop) right/down shift, then a top-left crop.
//! With a 255-pixel source and a 224 crop this spans
//! 11 x 32 x 32 x 2 = 22,528 discrete variants per sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Raster, SketchSample};
use crate::error::{Error, Result};

/// Background (paper) value filled in wherever a transform uncovers canvas.
pub const BACKGROUND: f64 = 1.0;

/// One augmentation decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentDraw {
    /// Rotation in integer degrees, -5..=5.
    pub degrees: i32,
    pub flip: bool,
    /// Rightward shift in pixels.
    pub dx: usize,
    /// Downward shift in pixels.
    pub dy: usize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        degrees: 0,
        flip: false,
        dx: 0,
        dy: 0,
    };
}

/// Number of discrete variants the draw space spans for a given geometry.
pub fn variant_count(side: usize, crop: usize) -> usize {
    let shift = side - crop + 1;
    11 * shift * shift * 2
}

/// Sample an augmentation decision.
pub fn draw_augment(rng: &mut ChaCha8Rng, side: usize, crop: usize) -> Result<AugmentDraw> {
    if crop > side {
        return Err(Error::Contract(format!(
            "crop {crop} exceeds the {side}-pixel canvas"
        )));
    }
    let max_shift = side - crop;
    Ok(AugmentDraw {
        degrees: rng.gen_range(-5..=5),
        flip: rng.gen_bool(0.5),
        dx: rng.gen_range(0..=max_shift),
        dy: rng.gen_range(0..=max_shift),
    })
}

fn rotate(raster: &Raster, degrees: i32) -> Raster {
    if degrees == 0 {
        return raster.clone();
    }
    let side = raster.side;
    let c = (side as f64 - 1.0) / 2.0;
    let theta = (degrees as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = Raster::filled(side, BACKGROUND);
    for y in 0..side {
        for x in 0..side {
            // Inverse map: rotate the destination pixel back by -theta.
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let sx = (cos * dx + sin * dy + c).round();
            let sy = (-sin * dx + cos * dy + c).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < side && (sy as usize) < side {
                out.set(x, y, raster.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

/// Mirror across the vertical axis.
pub fn hflip(raster: &Raster) -> Raster {
    let side = raster.side;
    let mut out = Raster::filled(side, BACKGROUND);
    for y in 0..side {
        for x in 0..side {
            out.set(x, y, raster.get(side - 1 - x, y));
        }
    }
    out
}

fn shift_crop(raster: &Raster, dx: usize, dy: usize, crop: usize) -> Raster {
    let side = raster.side;
    let mut out = Raster::filled(crop, BACKGROUND);
    for y in 0..crop {
        for x in 0..crop {
            if x >= dx && y >= dy {
                let (sx, sy) = (x - dx, y - dy);
                if sx < side && sy < side {
                    out.set(x, y, raster.get(sx, sy));
                }
            }
        }
    }
    out
}

/// Apply a fixed augmentation decision: rotate, flip, shift, crop.
pub fn apply_augment(raster: &Raster, draw: AugmentDraw, crop: usize) -> Result<Raster> {
    if crop > raster.side {
        return Err(Error::Contract(format!(
            "crop {crop} exceeds the {}-pixel canvas",
            raster.side
        )));
    }
    let rotated = rotate(raster, draw.degrees);
    let flipped = if draw.flip { hflip(&rotated) } else { rotated };
    Ok(shift_crop(&flipped, draw.dx, draw.dy, crop))
}

/// Sample and apply one augmentation for a training epoch.
pub fn augment(sample: &SketchSample, crop: usize, rng: &mut ChaCha8Rng) -> Result<SketchSample> {
    let draw = draw_augment(rng, sample.raster.side, crop)?;
    Ok(SketchSample {
        raster: apply_augment(&sample.raster, draw, crop)?,
        label: sample.label,
        id: sample.id.clone(),
    })
}
