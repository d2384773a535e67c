//! Samples, grayscale image IO and the on-disk dataset layout:
//!
//! ```text
//! <dir>/dataset.json      {"ids": [...], "num_classes": K}
//! <dir>/images/<id>.png   grayscale, 8- or 16-bit
//! <dir>/labels/<id>.png   8-bit, pixel value = class id
//! ```
//!
//! Intensities are kept on a 0-255 scale: 8-bit pixels load as-is, 16-bit
//! pixels are divided by 256.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::encoding::IntensityImage;
use crate::metrics::LabelMask;
use crate::{Error, Result};

const SIXTEEN_BIT_SCALE: f64 = 256.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: IntensityImage,
    pub label: LabelMask,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if (self.image.width(), self.image.height()) != (self.label.width, self.label.height) {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: image {}x{} vs label {}x{}",
                self.id,
                self.image.width(),
                self.image.height(),
                self.label.width,
                self.label.height
            )));
        }
        self.label
            .check_classes(num_classes)
            .map_err(|e| Error::InvalidLabel(format!("sample {}: {e}", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

pub fn read_intensity(path: &Path) -> Result<IntensityImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / SIXTEEN_BIT_SCALE)
            .collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / SIXTEEN_BIT_SCALE)
            .collect(),
    };
    IntensityImage::new(w, h, data)
}

/// Stores a 0-255 scale intensity image as 16-bit PNG (x256, clamped).
pub fn write_intensity(path: &Path, img: &IntensityImage) -> Result<()> {
    let raw: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| (v * SIXTEEN_BIT_SCALE).round().clamp(0.0, 65535.0) as u16)
        .collect();
    save_luma16(path, img.width(), img.height(), raw)
}

/// Stores a `[0, 1]` plane as 16-bit PNG with value `round(v * 65535)`.
pub fn write_unit_plane(path: &Path, width: usize, height: usize, plane: &[f64]) -> Result<()> {
    let raw = plane
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    save_luma16(path, width, height, raw)
}

/// Reads a 16-bit plane back into `[0, 1]`.
pub fn read_unit_plane(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((
        w,
        h,
        img.into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
    ))
}

fn save_luma16(path: &Path, width: usize, height: usize, raw: Vec<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw)
            .ok_or_else(|| Error::InvalidImage(format!("{width}x{height} buffer size")))?;
    buf.save(path)?;
    Ok(())
}

pub fn read_label(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw(),
        other => {
            return Err(Error::InvalidLabel(format!(
                "{}: label images must be 8-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    LabelMask::new(w, h, data)
}

pub fn write_label(path: &Path, label: &LabelMask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(label.width as u32, label.height as u32, label.data.clone())
            .ok_or_else(|| Error::InvalidImage("label buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, num_classes: usize, samples: &[Sample]) -> Result<()> {
    let (images, labels) = (dir.join("images"), dir.join("labels"));
    create_dir(&images)?;
    create_dir(&labels)?;
    for s in samples {
        s.validate(num_classes)?;
        write_intensity(&images.join(format!("{}.png", s.id)), &s.image)?;
        write_label(&labels.join(format!("{}.png", s.id)), &s.label)?;
    }
    let manifest = Manifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        num_classes,
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if manifest.num_classes < 2 || manifest.num_classes > 256 {
        return Err(Error::InvalidLabel(format!(
            "num_classes = {}",
            manifest.num_classes
        )));
    }
    let samples = manifest
        .ids
        .iter()
        .map(|id| {
            let file = PathBuf::from(format!("{id}.png"));
            let sample = Sample {
                id: id.clone(),
                image: read_intensity(&dir.join("images").join(&file))?,
                label: read_label(&dir.join("labels").join(&file))?,
            };
            sample.validate(manifest.num_classes)?;
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        num_classes: manifest.num_classes,
        samples,
    })
}
