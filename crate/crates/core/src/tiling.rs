//! Slide geometry: RoI filtering, sliding-window extraction, malignant-area
//! measurement and stitching of patch predictions back to slide resolution.

use std::io::Write;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Plane, ProbMap, RasterError};

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("slide {width}x{height} is smaller than patch size {patch_size}")]
    SlideTooSmall {
        width: u32,
        height: u32,
        patch_size: u32,
    },
    #[error("patch {w}x{h} at ({x},{y}) falls outside the {width}x{height} slide")]
    PatchOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid slide: {0}")]
    InvalidSlide(String),
    #[error("invalid tile spec: patch_size {patch_size}, stride {stride}")]
    InvalidTileSpec { patch_size: u32, stride: u32 },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A whole-slide image with an optional pixel-exact malignancy annotation.
#[derive(Debug, Clone)]
pub struct SlideImage {
    pub id: String,
    pub pixels: RgbImage,
    pub ground_truth: Option<BinaryMask>,
}

impl SlideImage {
    pub fn new(
        id: impl Into<String>,
        pixels: RgbImage,
        ground_truth: Option<BinaryMask>,
    ) -> Result<Self, TilingError> {
        let (w, h) = pixels.dimensions();
        if w == 0 || h == 0 {
            return Err(TilingError::InvalidSlide("empty raster".into()));
        }
        if let Some(gt) = &ground_truth {
            if gt.dimensions() != (w, h) {
                return Err(TilingError::InvalidSlide(format!(
                    "ground truth {}x{} does not match pixels {w}x{h}",
                    gt.width(),
                    gt.height()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            pixels,
            ground_truth,
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// A slide is positive when its annotation contains any malignant pixel.
    pub fn is_positive(&self) -> bool {
        self.ground_truth
            .as_ref()
            .is_some_and(|gt| gt.as_slice().iter().any(|&v| v != 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    pub patch_size: u32,
    pub stride: u32,
}

impl TileSpec {
    pub fn new(patch_size: u32, stride: u32) -> Result<Self, TilingError> {
        let spec = Self { patch_size, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TilingError> {
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(TilingError::InvalidTileSpec {
                patch_size: self.patch_size,
                stride: self.stride,
            });
        }
        Ok(())
    }
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            patch_size: 1536,
            stride: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub slide_id: String,
    pub origin_x: u32,
    pub origin_y: u32,
    pub pixels: RgbImage,
    pub mask_crop: Option<BinaryMask>,
}

impl PatchRecord {
    pub fn size(&self) -> u32 {
        self.pixels.width()
    }

    pub fn origin(&self) -> (u32, u32) {
        (self.origin_x, self.origin_y)
    }
}

/// Population standard deviation of all 3·N channel values, in 8-bit units.
///
/// Accumulates exact integer moments so that thresholds at exact values are
/// decided without rounding noise.
pub fn pixel_std(pixels: &RgbImage) -> f64 {
    let raw = pixels.as_raw();
    let n = raw.len() as u128;
    if n == 0 {
        return 0.0;
    }
    let (sum, sum_sq) = raw.iter().fold((0u128, 0u128), |(s, ss), &v| {
        let v = v as u128;
        (s + v, ss + v * v)
    });
    // n² · var = n·Σv² − (Σv)²
    let scaled_var = n * sum_sq - sum * sum;
    (scaled_var as f64).sqrt() / n as f64
}

/// RoI test: a patch is discarded only when its colour std is strictly below `r`.
pub fn roi_keep(patch: &PatchRecord, r: f64) -> bool {
    !(pixel_std(&patch.pixels) < r)
}

/// Window origins along one axis; the last window is clamped to the border
/// when the extent is not a stride multiple.
pub fn window_origins(extent: u32, patch_size: u32, stride: u32) -> Vec<u32> {
    if extent < patch_size {
        return Vec::new();
    }
    let last = extent - patch_size;
    let mut origins: Vec<u32> = (0..=last / stride).map(|i| i * stride).collect();
    if last % stride != 0 {
        origins.push(last);
    }
    origins
}

/// Sliding-window tiling in row-major order.
pub fn extract_grid(slide: &SlideImage, spec: &TileSpec) -> Result<Vec<PatchRecord>, TilingError> {
    spec.validate()?;
    let (w, h) = (slide.width(), slide.height());
    let p = spec.patch_size;
    if w < p || h < p {
        return Err(TilingError::SlideTooSmall {
            width: w,
            height: h,
            patch_size: p,
        });
    }
    let xs = window_origins(w, p, spec.stride);
    let ys = window_origins(h, p, spec.stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let pixels = image::imageops::crop_imm(&slide.pixels, x, y, p, p).to_image();
            let mask_crop = slide
                .ground_truth
                .as_ref()
                .map(|gt| gt.crop(x, y, p, p))
                .transpose()?;
            out.push(PatchRecord {
                slide_id: slide.id.clone(),
                origin_x: x,
                origin_y: y,
                pixels,
                mask_crop,
            });
        }
    }
    Ok(out)
}

/// Malignant pixel count (A₁ of a patch).
pub fn malignant_area(mask: &BinaryMask) -> u64 {
    mask.count_ones()
}

pub fn malignant_ratio(mask: &BinaryMask) -> f64 {
    let total = mask.as_slice().len();
    if total == 0 {
        return 0.0;
    }
    mask.count_ones() as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchedMap {
    pub probabilities: ProbMap,
    pub coverage_counts: Plane<u32>,
}

/// Running (sum, count) accumulator behind [`stitch`]. Workers may each own
/// one and [`merge`](Self::merge) them before [`finish`](Self::finish).
#[derive(Debug, Clone)]
pub struct StitchAccumulator {
    width: u32,
    height: u32,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl StitchAccumulator {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, origin: (u32, u32), raster: &ProbMap) -> Result<(), TilingError> {
        let (x0, y0) = origin;
        let (pw, ph) = raster.dimensions();
        if x0 as u64 + pw as u64 > self.width as u64 || y0 as u64 + ph as u64 > self.height as u64 {
            return Err(TilingError::PatchOutOfBounds {
                x: x0,
                y: y0,
                w: pw,
                h: ph,
                width: self.width,
                height: self.height,
            });
        }
        let src = raster.as_slice();
        for py in 0..ph as usize {
            let dst_row = (y0 as usize + py) * self.width as usize + x0 as usize;
            let src_row = py * pw as usize;
            for px in 0..pw as usize {
                self.sum[dst_row + px] += src[src_row + px] as f64;
                self.count[dst_row + px] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StitchAccumulator) {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "merging accumulators of different slides"
        );
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
    }

    pub fn finish(self) -> StitchedMap {
        let probs = self
            .sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
            .collect();
        StitchedMap {
            probabilities: Plane::from_vec(self.width, self.height, probs)
                .expect("accumulator length matches dimensions"),
            coverage_counts: Plane::from_vec(self.width, self.height, self.count)
                .expect("accumulator length matches dimensions"),
        }
    }
}

/// Averages overlapping patch probabilities into a slide-resolution map.
pub fn stitch(
    patch_masks: &[((u32, u32), &ProbMap)],
    height: u32,
    width: u32,
) -> Result<StitchedMap, TilingError> {
    let mut acc = StitchAccumulator::new(width, height);
    for (origin, raster) in patch_masks {
        acc.add(*origin, raster)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifestRow {
    pub slide_id: String,
    pub origin_x: u32,
    pub origin_y: u32,
    pub kept_by_roi: bool,
}

pub fn write_patch_manifest<W: Write>(
    writer: W,
    rows: &[PatchManifestRow],
) -> Result<(), TilingError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
