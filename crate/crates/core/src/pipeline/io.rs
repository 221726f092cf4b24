//! On-disk slide datasets: `slides.csv`, `slides/<id>.png` and, for
//! annotated slides, `truth/<id>.png`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::raster::{read_mask_png, read_rgb_png, write_mask_png, write_rgb_png};
use crate::tiling::SlideImage;

pub const INDEX_FILE: &str = "slides.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRow {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub positive: bool,
    pub has_truth: bool,
    /// Free-form appearance tag, empty when unknown.
    pub stain: String,
}

pub fn write_dataset(dir: &Path, slides: &[SlideImage], stains: &[String]) -> Result<Vec<SlideRow>, PipelineError> {
    std::fs::create_dir_all(dir.join("slides"))?;
    std::fs::create_dir_all(dir.join("truth"))?;
    let mut rows = Vec::with_capacity(slides.len());
    for (i, s) in slides.iter().enumerate() {
        let io = |e: crate::raster::RasterError| PipelineError::Io(e.to_string());
        write_rgb_png(&dir.join("slides").join(format!("{}.png", s.id)), &s.pixels).map_err(io)?;
        if let Some(gt) = &s.ground_truth {
            write_mask_png(&dir.join("truth").join(format!("{}.png", s.id)), gt).map_err(io)?;
        }
        rows.push(SlideRow {
            slide_id: s.id.clone(),
            width: s.width(),
            height: s.height(),
            positive: s.is_positive(),
            has_truth: s.ground_truth.is_some(),
            stain: stains.get(i).cloned().unwrap_or_default(),
        });
    }
    super::write_csv_file(&dir.join(INDEX_FILE), &rows)?;
    Ok(rows)
}

pub fn read_index(dir: &Path) -> Result<Vec<SlideRow>, PipelineError> {
    let path = dir.join(INDEX_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Loads every indexed slide; annotations are attached when `with_truth` is set.
pub fn read_dataset(dir: &Path, with_truth: bool) -> Result<Vec<SlideImage>, PipelineError> {
    read_index(dir)?
        .into_iter()
        .map(|row| {
            let data = |e: crate::raster::RasterError| PipelineError::Data(format!("{}: {e}", row.slide_id));
            let pixels = read_rgb_png(&dir.join("slides").join(format!("{}.png", row.slide_id))).map_err(data)?;
            let truth = if with_truth && row.has_truth {
                Some(read_mask_png(&dir.join("truth").join(format!("{}.png", row.slide_id))).map_err(data)?)
            } else {
                None
            };
            if pixels.dimensions() != (row.width, row.height) {
                return Err(PipelineError::Data(format!(
                    "{}: index says {}x{}, image is {}x{}",
                    row.slide_id,
                    row.width,
                    row.height,
                    pixels.width(),
                    pixels.height()
                )));
            }
            SlideImage::new(row.slide_id, pixels, truth).map_err(|e| PipelineError::Data(e.to_string()))
        })
        .collect()
}
