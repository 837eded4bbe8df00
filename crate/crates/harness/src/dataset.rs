//! Dataset directories: `img_<id>.ppm` (or `.pgm` for one channel),
//! `mask_<id>.pgm` holding class indices, and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use mapunetr_core::{Image, Mask, Sample, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub num_classes: usize,
    pub count: usize,
}

pub const META_FILE: &str = "meta.json";

fn image_path(dir: &Path, id: &str, channels: usize) -> PathBuf {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    dir.join(format!("img_{id}.{ext}"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("mask_{id}.pgm"))
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, width: usize, height: usize, bytes: &[u8], channels: usize) -> Result<()> {
    let (subtype, color) = match channels {
        1 => (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        ),
        3 => (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        ),
        c => {
            return Err(HarnessError::Format(format!(
                "cannot store {c}-channel images"
            )))
        }
    };
    let file = fs::File::create(path).map_err(io_err(path))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

/// Writes an image with values in `[0, 1]` as 8-bit PGM/PPM.
pub fn write_image<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    encode(path, img.width, img.height, &bytes, img.channels)
}

/// Writes raw label values as an 8-bit PGM.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    encode(path, mask.width, mask.height, &mask.data, 1)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit PGM/PPM and rescales it to `[0, 1]`.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        image::DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = raw
        .into_iter()
        .map(|b| T::lit(f64::from(b) / 255.0))
        .collect();
    Ok(Image::new(h, w, channels, data)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(Mask::new(h, w, g.into_raw())?),
        _ => Err(HarnessError::Format(format!(
            "{}: masks must be 8-bit PGM",
            path.display()
        ))),
    }
}

pub fn save_dataset<T: Scalar>(
    samples: &[Sample<T>],
    num_classes: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for s in samples {
        write_image(&image_path(dir, &s.id, s.image.channels), &s.image)?;
        write_mask(&mask_path(dir, &s.id), &s.mask)?;
    }
    let meta = Meta {
        num_classes,
        count: samples.len(),
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, json).map_err(io_err(path))
}

/// Sorted ids of every `img_<id>.{ppm,pgm}` in `dir`.
pub fn image_ids(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let id = name
            .strip_prefix("img_")
            .and_then(|r| r.strip_suffix(".ppm").or_else(|| r.strip_suffix(".pgm")));
        if let Some(id) = id {
            ids.push((id.to_string(), path.clone()));
        }
    }
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(HarnessError::Format(format!(
            "image {} stored twice",
            w[0].0
        )));
    }
    Ok(ids)
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

/// Images without masks, for inference.
pub fn load_images<T: Scalar>(dir: &Path) -> Result<Vec<(String, Image<T>)>> {
    let ids = image_ids(dir)?;
    if ids.is_empty() {
        return Err(HarnessError::EmptyDataset(dir.to_path_buf()));
    }
    ids.into_par_iter()
        .map(|(id, path)| Ok((id, read_image(&path)?)))
        .collect()
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(Vec<Sample<T>>, Meta)> {
    let ids = image_ids(dir)?;
    if ids.is_empty() {
        return Err(HarnessError::EmptyDataset(dir.to_path_buf()));
    }
    if let Some((id, _)) = ids.iter().find(|(id, _)| !mask_path(dir, id).is_file()) {
        return Err(HarnessError::Pairing { id: id.clone() });
    }
    let meta = read_meta(dir)?;
    if meta.count != ids.len() {
        return Err(HarnessError::Format(format!(
            "{META_FILE} lists {} samples, found {}",
            meta.count,
            ids.len()
        )));
    }
    let samples = ids
        .into_par_iter()
        .map(|(id, path)| {
            let image = read_image(&path)?;
            let mask = read_mask(&mask_path(dir, &id))?;
            if (image.height, image.width) != (mask.height, mask.width) {
                return Err(HarnessError::Format(format!(
                    "sample {id}: image is {}x{}, mask is {}x{}",
                    image.height, image.width, mask.height, mask.width
                )));
            }
            if let Some(&bad) = mask.data.iter().find(|&&l| l as usize >= meta.num_classes) {
                return Err(HarnessError::Format(format!(
                    "sample {id}: label {bad} outside {} classes",
                    meta.num_classes
                )));
            }
            Ok(Sample::new(image, mask, id)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, meta))
}
