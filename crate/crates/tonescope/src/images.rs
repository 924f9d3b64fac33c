//! Image decoding into `[3, side, side]` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rayon::prelude::*;
use thiserror::Error;
use tonescope_core::records::ImageRecord;
use tonescope_core::trainer::LabeledImage;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path} has zero area")]
    ZeroArea { path: PathBuf },
    #[error("target side must be positive")]
    ZeroSide,
}

/// Channel-major pixels of an RGB image resized bilinearly to `side` x `side`.
pub fn to_chw(img: &image::DynamicImage, side: u32) -> Vec<f32> {
    let rgb = img.resize_exact(side, side, FilterType::Triangle).to_rgb8();
    let plane = (side * side) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    out
}

pub fn load_image(path: &Path, side: usize) -> Result<Vec<f32>, ImageError> {
    if side == 0 {
        return Err(ImageError::ZeroSide);
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| ImageError::Decode {
            path: path.to_path_buf(),
            source: e.into(),
        })?
        .with_guessed_format()
        .map_err(|e| ImageError::Decode {
            path: path.to_path_buf(),
            source: e.into(),
        })?
        .decode()
        .map_err(|source| ImageError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(ImageError::ZeroArea {
            path: path.to_path_buf(),
        });
    }
    Ok(to_chw(&img, side as u32))
}

/// Decodes every record in parallel; output order follows `records`.
pub fn load_images(
    root: &Path,
    records: &[ImageRecord],
    side: usize,
) -> Result<Vec<LabeledImage>, ImageError> {
    records
        .par_iter()
        .map(|r| {
            Ok(LabeledImage {
                id: r.id.clone(),
                pixels: load_image(&root.join(&r.image_path), side)?,
                diagnosis: r.diagnosis,
                tone: r.tone(),
            })
        })
        .collect()
}
