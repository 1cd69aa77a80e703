//! Image access for backends and attribution.
//!
//! Catalog records only carry uris; pixels are loaded here on demand.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, GrayImage, ImageFormat};
use thiserror::Error;

use crate::prompting::PromptBundle;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot read image {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("slot {0} out of range")]
    NoSlot(usize),
}

/// Image for one bundle slot: either a file to load, or pixels already in
/// memory (an occluded copy, for instance).
#[derive(Debug, Clone)]
pub enum SlotImage {
    Path(PathBuf),
    Pixels(Arc<DynamicImage>),
}

impl SlotImage {
    pub fn decode(&self) -> Result<Arc<DynamicImage>, ImagingError> {
        match self {
            SlotImage::Pixels(img) => Ok(Arc::clone(img)),
            SlotImage::Path(p) => load(p).map(Arc::new),
        }
    }

    /// Bytes to put on the wire: the file as stored, or a PNG encoding.
    pub fn encoded(&self) -> Result<Vec<u8>, ImagingError> {
        match self {
            SlotImage::Path(p) => std::fs::read(p).map_err(|e| ImagingError::Unreadable { path: p.clone(), reason: e.to_string() }),
            SlotImage::Pixels(img) => encode_png(img),
        }
    }
}

/// Images for every slot of a bundle, in slot order.
#[derive(Debug, Clone)]
pub struct SlotImages(pub Vec<SlotImage>);

impl SlotImages {
    pub fn from_bundle(bundle: &PromptBundle) -> Self {
        Self(bundle.image_slots.iter().map(|s| SlotImage::Path(PathBuf::from(&s.uri))).collect())
    }

    pub fn get(&self, slot: usize) -> Result<&SlotImage, ImagingError> {
        self.0.get(slot).ok_or(ImagingError::NoSlot(slot))
    }

    pub fn with_slot(&self, slot: usize, image: SlotImage) -> Self {
        let mut out = self.clone();
        out.0[slot] = image;
        out
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn load(path: &Path) -> Result<DynamicImage, ImagingError> {
    image::open(path).map_err(|e| ImagingError::Unreadable { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>, ImagingError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Mean of the 8-bit luma channel scaled to [0, 1].
pub fn mean_intensity(img: &GrayImage) -> f64 {
    let n = (img.width() as u64 * img.height() as u64).max(1);
    let total: u64 = img.as_raw().iter().map(|&v| v as u64).sum();
    total as f64 / (255.0 * n as f64)
}

/// Mean luma in `[x0, x1) x [y0, y1)`, clamped to the image; 0 if empty.
pub fn mean_intensity_in(img: &GrayImage, x0: u32, y0: u32, x1: u32, y1: u32) -> f64 {
    let (x1, y1) = (x1.min(img.width()), y1.min(img.height()));
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let mut total = 0u64;
    for y in y0..y1 {
        for x in x0..x1 {
            total += img.get_pixel(x, y)[0] as u64;
        }
    }
    total as f64 / (255.0 * ((x1 - x0) as u64 * (y1 - y0) as u64) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn means() {
        let mut img = GrayImage::from_pixel(4, 4, Luma([0]));
        for y in 0..2 {
            for x in 0..2 {
                img.put_pixel(x, y, Luma([255]));
            }
        }
        assert_eq!(mean_intensity(&img), 0.25);
        assert_eq!(mean_intensity_in(&img, 0, 0, 2, 2), 1.0);
        assert_eq!(mean_intensity_in(&img, 2, 2, 9, 9), 0.0);
    }

    #[test]
    fn png_round_trip() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_fn(5, 3, |x, y| Luma([(x * 40 + y) as u8])));
        let bytes = encode_png(&img).unwrap();
        let back = image::load_from_memory(&bytes).unwrap();
        assert_eq!(back.to_luma8(), img.to_luma8());
    }
}
