//! PNG image and mask I/O. Masks are 8-bit single channel, 0 = background,
//! 255 = foreground, and anything above 127 reads as foreground.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

use super::{Image3, Normalization};
use crate::error::{Error, Result};
use crate::labelgen::BinaryMask;
use crate::ops;

pub const MASK_READ_THRESHOLD: u8 = 127;

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::from_threshold(h as usize, w as usize, img.as_raw(), MASK_READ_THRESHOLD)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    let raw: Vec<u8> = mask.pixels().iter().map(|&p| p * 255).collect();
    write_gray(path, h, w, raw)
}

pub fn write_gray(path: &Path, height: usize, width: usize, raw: Vec<u8>) -> Result<()> {
    let img: GrayImage = image::ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Dimension(format!("buffer does not match {height}x{width}")))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads an image as three planar channels, replicating grayscale.
pub fn read_image(path: &Path, normalization: Normalization) -> Result<Image3> {
    let dynimg = open(path)?;
    let (h, w) = (dynimg.height() as usize, dynimg.width() as usize);
    let n = h * w;
    let mut data = vec![0f32; 3 * n];
    if dynimg.color().has_color() {
        let rgb = dynimg.into_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32;
            }
        }
    } else {
        let gray = dynimg.into_luma8();
        for (i, &Luma([v])) in gray.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = v as f32;
            }
        }
    }
    normalize(&mut data, normalization);
    Ok(Image3 {
        height: h,
        width: w,
        data,
    })
}

pub fn normalize(data: &mut [f32], normalization: Normalization) {
    match normalization {
        Normalization::Scale255 => data.iter_mut().for_each(|v| *v /= 255.0),
        Normalization::MinMax => {
            let (lo, hi) = data
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            if range > 0.0 {
                data.iter_mut().for_each(|v| *v = (*v - lo) / range);
            } else {
                data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

pub fn resize_image(img: &Image3, height: usize, width: usize) -> Image3 {
    Image3 {
        height,
        width,
        data: ops::resize_planes_bilinear(&img.data, 3, img.height, img.width, height, width),
    }
}
