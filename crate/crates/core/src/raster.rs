//! Single-channel rasters and the lossless PNG encodings used on disk.
//!
//! Slides and patches are plain [`image::RgbImage`]s. Masks, probability maps
//! and coverage counts share the [`Plane`] container, which is row-major with a
//! top-left origin.

use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster data length {len} does not match {width}x{height}")]
    BadLength { width: u32, height: u32, len: usize },
    #[error("crop {w}x{h} at ({x},{y}) exceeds {width}x{height} raster")]
    CropOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("image i/o: {0}")]
    Image(#[from] image::ImageError),
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

/// Binary mask, values in {0, 1} (1 = malignant).
pub type BinaryMask = Plane<u8>;
/// Per-pixel probabilities in [0, 1].
pub type ProbMap = Plane<f32>;

impl<T: Copy> Plane<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self, RasterError> {
        if data.len() != width as usize * height as usize {
            return Err(RasterError::BadLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> T {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: T) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self, RasterError> {
        if x as u64 + w as u64 > self.width as u64 || y as u64 + h as u64 > self.height as u64 {
            return Err(RasterError::CropOutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for row in y..y + h {
            let start = row as usize * self.width as usize + x as usize;
            data.extend_from_slice(&self.data[start..start + w as usize]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let w = self.width as usize;
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let w = self.width as usize;
        let data = self
            .data
            .chunks(w)
            .rev()
            .flat_map(|row| row.iter().copied())
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

impl BinaryMask {
    pub fn count_ones(&self) -> u64 {
        self.data.iter().filter(|&&v| v != 0).count() as u64
    }
}

impl ProbMap {
    /// Thresholds probabilities: `p >= threshold` becomes 1.
    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        self.map(|p| u8::from(p >= threshold))
    }
}

/// Bilinear resize of a probability raster (pixel-centre alignment).
pub fn resize_prob(src: &ProbMap, width: u32, height: u32) -> ProbMap {
    if src.dimensions() == (width, height) {
        return src.clone();
    }
    let sx = src.width as f32 / width as f32;
    let sy = src.height as f32 / height as f32;
    let max_x = src.width as f32 - 1.0;
    let max_y = src.height as f32 - 1.0;
    let mut out = Plane::filled(width, height, 0.0f32);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(src.height - 1);
        let wy = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(src.width - 1);
            let wx = fx - x0 as f32;
            let top = src.get(x0, y0) * (1.0 - wx) + src.get(x1, y0) * wx;
            let bottom = src.get(x0, y1) * (1.0 - wx) + src.get(x1, y1) * wx;
            out.set(x, y, top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Area-averaging (box filter) downscale of an RGB image when the target is
/// smaller, bilinear otherwise.
pub fn resize_rgb(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    if src.dimensions() == (width, height) {
        return src.clone();
    }
    let (sw, sh) = src.dimensions();
    if sw % width == 0 && sh % height == 0 {
        let (fx, fy) = (sw / width, sh / height);
        let area = (fx * fy) as u32;
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0u32; 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = src.get_pixel(x * fx + dx, y * fy + dy);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                    }
                }
                let px = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    px[c] = ((acc[c] + area / 2) / area) as u8;
                }
            }
        }
        out
    } else {
        image::imageops::resize(src, width, height, image::imageops::FilterType::Triangle)
    }
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_mask(src: &BinaryMask, width: u32, height: u32) -> BinaryMask {
    if src.dimensions() == (width, height) {
        return src.clone();
    }
    let mut out = Plane::filled(width, height, 0u8);
    for y in 0..height {
        let sy = ((y as u64 * 2 + 1) * src.height as u64 / (2 * height as u64)) as u32;
        for x in 0..width {
            let sx = ((x as u64 * 2 + 1) * src.width as u64 / (2 * width as u64)) as u32;
            out.set(x, y, src.get(sx, sy));
        }
    }
    out
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, RasterError> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<(), RasterError> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Masks are stored as 8-bit grey with values {0, 255}.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<(), RasterError> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width,
        mask.height,
        mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
    )
    .expect("plane length checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask, RasterError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Plane::from_vec(w, h, img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect())
}

/// Probability maps are stored as 16-bit grey fixed point, `value / 65535`.
pub fn write_prob_png(path: &Path, map: &ProbMap) -> Result<(), RasterError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        map.width,
        map.height,
        map.data
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
            .collect(),
    )
    .expect("plane length checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_prob_png(path: &Path) -> Result<ProbMap, RasterError> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Plane::from_vec(
        w,
        h,
        img.into_raw()
            .into_iter()
            .map(|v| (v as f64 / 65535.0) as f32)
            .collect(),
    )
}
