use rand::Rng;

use super::io::resize_image;
use super::{Image3, Sample};
use crate::error::Result;
use crate::labelgen::{split_labels_with, BinaryMask, DistanceMetric};

pub const SCALE_RANGE: (f64, f64) = (0.75, 1.5);

/// Geometry of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Top-left corner of the crop window in rescaled coordinates; negative
    /// values pad with zeros.
    pub offset_y: isize,
    pub offset_x: isize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset_y: 0,
            offset_x: 0,
            flip: false,
        }
    }

    /// Random scale in [0.75, 1.5], random crop (or pad) back to
    /// `(height, width)`, horizontal flip with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let (sh, sw) = scaled_dims(height, width, scale);
        let offset = |rng: &mut R, scaled: usize, target: usize| -> isize {
            if scaled >= target {
                rng.random_range(0..=scaled - target) as isize
            } else {
                -(rng.random_range(0..=target - scaled) as isize)
            }
        };
        let offset_y = offset(rng, sh, height);
        let offset_x = offset(rng, sw, width);
        Self {
            scale,
            offset_y,
            offset_x,
            flip: rng.random_bool(0.5),
        }
    }
}

fn scaled_dims(height: usize, width: usize, scale: f64) -> (usize, usize) {
    (
        ((height as f64 * scale).round() as usize).max(1),
        ((width as f64 * scale).round() as usize).max(1),
    )
}

/// Applies identical geometry to image and final mask, then regenerates the
/// body/boundary split from the transformed mask.
pub fn augment(sample: &Sample, params: &AugmentParams, metric: DistanceMetric) -> Result<Sample> {
    let (h, w) = (sample.image.height, sample.image.width);
    let (sh, sw) = scaled_dims(h, w, params.scale);
    let scaled_img = resize_image(&sample.image, sh, sw);
    let scaled_mask = sample.labels.final_mask.resize_nearest(sh, sw)?;

    let src = |y: usize, x: usize| -> Option<(usize, usize)> {
        let x = if params.flip { w - 1 - x } else { x };
        let sy = y as isize + params.offset_y;
        let sx = x as isize + params.offset_x;
        (sy >= 0 && sx >= 0 && (sy as usize) < sh && (sx as usize) < sw).then(|| (sy as usize, sx as usize))
    };

    let mut image = Image3::zeros(h, w);
    let n = h * w;
    let sn = sh * sw;
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = src(y, x) {
                for c in 0..3 {
                    image.data[c * n + y * w + x] = scaled_img.data[c * sn + sy * sw + sx];
                }
            }
        }
    }
    let mask = BinaryMask::from_fn(h, w, |y, x| src(y, x).is_some_and(|(sy, sx)| scaled_mask.get(sy, sx)))?;
    Ok(Sample {
        id: sample.id.clone(),
        image,
        labels: split_labels_with(&mask, sample.labels.alpha, metric)?,
    })
}
