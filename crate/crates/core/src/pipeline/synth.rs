//! Synthetic stained slides with pixel-exact lesion annotations.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::raster::Plane;
use crate::tiling::SlideImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StainDomain {
    /// Pale pink tissue.
    ALike,
    /// Bluish purple tissue.
    BLike,
}

impl StainDomain {
    fn palette(self) -> ([f64; 3], [f64; 3]) {
        match self {
            StainDomain::ALike => ([232.0, 176.0, 204.0], [150.0, 62.0, 118.0]),
            StainDomain::BLike => ([188.0, 164.0, 222.0], [96.0, 52.0, 150.0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub height: u32,
    pub width: u32,
    pub n_lesions: usize,
    /// Semi-axis range in pixels, both ends inclusive.
    pub lesion_radius_range: (f64, f64),
    pub stain_domain: StainDomain,
    /// Relative amplitude of the multiplicative tissue texture.
    pub texture_noise: f64,
    pub seed: u64,
}

impl SyntheticSlideSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let infeasible = |m: String| Err(PipelineError::SpecInfeasible(m));
        if self.width == 0 || self.height == 0 {
            return infeasible("empty slide".into());
        }
        let (lo, hi) = self.lesion_radius_range;
        if self.n_lesions > 0 {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return infeasible(format!("radius range ({lo}, {hi})"));
            }
            let fit = 2.0 * hi + 2.0;
            if fit > self.width as f64 || fit > self.height as f64 {
                return infeasible(format!(
                    "lesion radius {hi} does not fit a {}x{} slide",
                    self.width, self.height
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return infeasible(format!("texture_noise={} outside [0, 1]", self.texture_noise));
        }
        Ok(())
    }
}

/// An axis-aligned elliptical lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    /// True when the whole unit pixel `(x, y)` lies inside; the ellipse is
    /// convex, so its four corners decide.
    pub fn covers_pixel(&self, x: u32, y: u32) -> bool {
        let (x, y) = (x as f64, y as f64);
        self.contains(x, y) && self.contains(x + 1.0, y) && self.contains(x, y + 1.0) && self.contains(x + 1.0, y + 1.0)
    }
}

/// Smooth value noise in [-1, 1] from a lattice of random values.
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(width: u32, height: u32, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = (width as f64 / cell).ceil() as usize + 2;
        let rows = (height as f64 / cell).ceil() as usize + 2;
        Self {
            cell,
            cols,
            values: (0..cols * rows).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }

    fn at(&self, x: u32, y: u32) -> f64 {
        let fx = x as f64 / self.cell;
        let fy = y as f64 / self.cell;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let v = |i: usize, j: usize| self.values[j * self.cols + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders tissue on a near-white glass background, with lesions that are
/// darker, more saturated and speckled with nuclei-like dots.
pub fn generate_synthetic_slide(id: &str, spec: &SyntheticSlideSpec) -> Result<SlideImage, PipelineError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let tissue = Ellipse {
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        rx: w as f64 * rng.random_range(0.46..0.52),
        ry: h as f64 * rng.random_range(0.46..0.52),
    };
    let (lo, hi) = spec.lesion_radius_range;
    let lesions: Vec<Ellipse> = (0..spec.n_lesions)
        .map(|_| {
            let rx = rng.random_range(lo..=hi);
            let ry = rng.random_range(lo..=hi);
            Ellipse {
                cx: rng.random_range(rx + 1.0..=w as f64 - rx - 1.0),
                cy: rng.random_range(ry + 1.0..=h as f64 - ry - 1.0),
                rx,
                ry,
            }
        })
        .collect();

    let coarse = ValueNoise::new(w, h, 48.0, &mut rng);
    let fine = ValueNoise::new(w, h, 6.0, &mut rng);
    let (base, lesion) = spec.stain_domain.palette();
    let amp = spec.texture_noise;

    let mut pixels = RgbImage::new(w, h);
    let mut mask = Plane::filled(w, h, 0u8);
    for y in 0..h {
        for x in 0..w {
            let grain: f64 = rng.random_range(-1.0..=1.0);
            let speck: f64 = rng.random();
            let in_lesion = lesions.iter().any(|l| l.covers_pixel(x, y));
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let rgb = if in_lesion {
                mask.set(x, y, 1);
                let dot = if speck < 0.2 { 0.5 } else { 1.0 };
                let m = (1.0 + amp * (0.6 * fine.at(x, y) + 0.4 * grain)) * dot;
                lesion.map(|c| c * m)
            } else if tissue.contains(cx, cy) {
                let dot = if speck < 0.08 { 0.55 } else { 1.0 };
                let m = (1.0 + amp * (0.6 * coarse.at(x, y) + 0.25 * fine.at(x, y) + 0.15 * grain)) * dot;
                base.map(|c| c * m)
            } else {
                let v = 244.0 + 3.0 * grain;
                [v, v, v]
            };
            pixels.put_pixel(x, y, Rgb(rgb.map(clamp_u8)));
        }
    }
    SlideImage::new(id, pixels, Some(mask)).map_err(|e| PipelineError::Data(e.to_string()))
}

/// A synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub n_slides: usize,
    pub min_size: u32,
    pub max_size: u32,
    /// Fraction of positive slides, alternating from the first slide.
    pub positive_fraction: f64,
    /// Fraction of slides rendered in the A-like stain.
    pub a_fraction: f64,
    pub max_lesions: usize,
    /// Lesion semi-axes as fractions of the shorter slide side.
    pub lesion_radius_fraction: (f64, f64),
    pub texture_noise: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_slides: 20,
            min_size: 512,
            max_size: 2048,
            positive_fraction: 0.5,
            a_fraction: 0.6,
            max_lesions: 3,
            lesion_radius_fraction: (0.08, 0.16),
            texture_noise: 0.3,
        }
    }
}

/// Slide specs of a cohort. Sizes are multiples of 64 in `[min_size, max_size]`.
pub fn cohort_specs(cohort: &CohortSpec, seed: u64) -> Result<Vec<SyntheticSlideSpec>, PipelineError> {
    if cohort.min_size == 0 || cohort.min_size > cohort.max_size {
        return Err(PipelineError::SpecInfeasible(format!(
            "slide sizes [{}, {}]",
            cohort.min_size, cohort.max_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = (cohort.n_slides as f64 * cohort.positive_fraction).round() as usize;
    let n_a = (cohort.n_slides as f64 * cohort.a_fraction).round() as usize;
    let size_steps = (cohort.max_size - cohort.min_size) / 64;
    let mut stain_rank: Vec<usize> = (0..cohort.n_slides).collect();
    stain_rank.shuffle(&mut rng);
    let evens = cohort.n_slides.div_ceil(2);
    Ok((0..cohort.n_slides)
        .map(|i| {
            // even slots are filled with positives first, then odd ones
            let rank = if i % 2 == 0 { i / 2 } else { evens + i / 2 };
            let positive = rank < n_pos;
            let width = cohort.min_size + 64 * rng.random_range(0..=size_steps);
            let height = cohort.min_size + 64 * rng.random_range(0..=size_steps);
            let short = width.min(height) as f64;
            let (f0, f1) = cohort.lesion_radius_fraction;
            SyntheticSlideSpec {
                height,
                width,
                n_lesions: if positive { rng.random_range(1..=cohort.max_lesions.max(1)) } else { 0 },
                lesion_radius_range: (f0 * short, f1 * short),
                stain_domain: if stain_rank[i] < n_a {
                    StainDomain::ALike
                } else {
                    StainDomain::BLike
                },
                texture_noise: cohort.texture_noise,
                seed: rng.random(),
            }
        })
        .collect())
}

pub fn generate_cohort(cohort: &CohortSpec, prefix: &str, seed: u64) -> Result<Vec<SlideImage>, PipelineError> {
    cohort_specs(cohort, seed)?
        .iter()
        .enumerate()
        .map(|(i, s)| generate_synthetic_slide(&format!("{prefix}{i:03}"), s))
        .collect()
}
