//! Dataset directory: `manifest.jsonl` plus PNG images and masks.
//!
//! Images are 16-bit grayscale (`round(v·65535)`), masks and silhouettes
//! 8-bit with values 0 or 255. Manifest floats are written in shortest
//! round-trip form, which reproduces the stored value exactly.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gradcore::Tensor;
use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::split::{stratum_of, Split, SplitAssignment, SplitSpec};
use super::Sample;
use crate::error::{Result, StenosisError};
use crate::geometry::PixelPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub silhouette: String,
    pub stenosis_row: i64,
    pub stenosis_col: i64,
    pub stenosis_pct: f64,
    pub stratum: usize,
    pub split: Split,
    pub seed: u64,
}

fn save_u16(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let px: Vec<u16> = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, px).ok_or_else(|| StenosisError::invalid("image buffer size"))?;
    img.save(path)?;
    Ok(())
}

fn save_mask(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let px: Vec<u8> = t.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    GrayImage::from_raw(w, h, px).ok_or_else(|| StenosisError::invalid("mask buffer size"))?.save(path)?;
    Ok(())
}

fn load_u16(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Tensor::new([h as usize, w as usize], img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())?)
}

fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::new([h as usize, w as usize], img.into_raw().into_iter().map(|v| if v > 127 { 1.0 } else { 0.0 }).collect())?)
}

/// Writes every sample with its split; samples outside `assignment` are
/// rejected.
pub fn write_dataset(dir: &Path, samples: &[Sample], assignment: &SplitAssignment, spec: &SplitSpec) -> Result<()> {
    for sub in ["images", "masks", "silhouettes"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
    for (i, s) in samples.iter().enumerate() {
        let split = assignment
            .split_of(i)
            .ok_or_else(|| StenosisError::invalid(format!("sample {} has no split", s.id)))?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            image: format!("images/{}.png", s.id),
            mask: format!("masks/{}.png", s.id),
            silhouette: format!("silhouettes/{}.png", s.id),
            stenosis_row: s.point.row,
            stenosis_col: s.point.col,
            stenosis_pct: s.stenosis_pct,
            stratum: stratum_of(spec, s.stenosis_pct)?,
            split,
            seed: s.seed,
        };
        save_u16(&s.image, &dir.join(&rec.image))?;
        save_mask(&s.lesion, &dir.join(&rec.mask))?;
        save_mask(&s.silhouette, &dir.join(&rec.silhouette))?;
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads a dataset directory back. Images carry 16-bit quantization.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Sample, Split)>> {
    let file = File::open(dir.join("manifest.jsonl"))
        .map_err(|e| StenosisError::invalid(format!("cannot open manifest in {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        let sample = Sample {
            id: rec.id.clone(),
            image: load_u16(&dir.join(&rec.image))?,
            lesion: load_mask(&dir.join(&rec.mask))?,
            silhouette: load_mask(&dir.join(&rec.silhouette))?,
            point: PixelPoint::new(rec.stenosis_row, rec.stenosis_col),
            stenosis_pct: rec.stenosis_pct,
            seed: rec.seed,
            centerline: Vec::new(),
        };
        sample.point.check_bounds(sample.size())?;
        out.push((sample, rec.split));
    }
    if out.is_empty() {
        return Err(StenosisError::invalid(format!("empty manifest in {}", dir.display())));
    }
    Ok(out)
}
