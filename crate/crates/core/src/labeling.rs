//! Patch labels: hard thresholding of the malignant-area ratio, area-guided
//! label smoothing, balanced sampling and the online augmentation policy.

use std::io::Write;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Plane};
use crate::tiling::PatchRecord;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("malignant area {a1} exceeds the maximum {a1_max}")]
    RatioOutOfRange { a1: u64, a1_max: u64 },
    #[error("not a probability distribution: {0}")]
    NonDistribution(String),
    #[error("no candidates for the {0} class")]
    EmptyClass(&'static str),
    #[error("invalid labeling config: {0}")]
    InvalidConfig(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Two-class target distribution, class 0 benign and class 1 malignant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedLabel {
    pub p_benign: f64,
    pub p_malignant: f64,
}

impl SmoothedLabel {
    pub fn one_hot(class: u8) -> Self {
        if class == 1 {
            Self {
                p_benign: 0.0,
                p_malignant: 1.0,
            }
        } else {
            Self {
                p_benign: 1.0,
                p_malignant: 0.0,
            }
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.p_benign, self.p_malignant]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.as_array()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    /// Hard-label area threshold S; a patch is positive when its ratio exceeds it.
    pub hard_threshold: f64,
    /// Smoothing strength ε.
    pub epsilon: f64,
    /// Largest malignant pixel count over the training patches.
    pub a1_max: u64,
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return Err(LabelError::InvalidConfig(format!(
                "hard threshold S={} must lie in (0, 1)",
                self.hard_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(LabelError::InvalidConfig(format!(
                "epsilon={} must lie in [0, 1)",
                self.epsilon
            )));
        }
        if self.epsilon > 0.0 && self.a1_max == 0 {
            return Err(LabelError::InvalidConfig(
                "a1_max must be at least 1 when smoothing is enabled".into(),
            ));
        }
        Ok(())
    }
}

/// 1 iff `ratio > s`.
pub fn hard_label(ratio: f64, s: f64) -> u8 {
    u8::from(ratio > s)
}

/// Area-guided smoothing: `p_k = (1-ε)·δ(k,y) + ε·a(k)` with `a(1) = A₁/A₁ᵐᵃˣ`
/// and `a(0) = 1 - a(1)`.
pub fn smooth_label(y: u8, a1: u64, cfg: &LabelingConfig) -> Result<SmoothedLabel, LabelError> {
    if a1 > cfg.a1_max {
        return Err(LabelError::RatioOutOfRange {
            a1,
            a1_max: cfg.a1_max,
        });
    }
    let r = if cfg.a1_max == 0 {
        0.0
    } else {
        a1 as f64 / cfg.a1_max as f64
    };
    let eps = cfg.epsilon;
    let delta = |k: u8| if k == y { 1.0 } else { 0.0 };
    Ok(SmoothedLabel {
        p_benign: (1.0 - eps) * delta(0) + eps * (1.0 - r),
        p_malignant: (1.0 - eps) * delta(1) + eps * r,
    })
}

/// `-Σ_k target_k · ln(predicted_k)`.
pub fn soft_target_cross_entropy(
    predicted: [f64; 2],
    target: &SmoothedLabel,
) -> Result<f64, LabelError> {
    const TOL: f64 = 1e-6;
    if predicted.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (predicted[0] + predicted[1] - 1.0).abs() > TOL {
        return Err(LabelError::NonDistribution(format!("prediction {predicted:?}")));
    }
    let t = target.as_array();
    if t.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (t[0] + t[1] - 1.0).abs() > TOL {
        return Err(LabelError::NonDistribution(format!("target {t:?}")));
    }
    // 0·ln(0) is taken as 0
    Ok(t.iter()
        .zip(predicted)
        .filter(|(&tk, _)| tk > 0.0)
        .map(|(&tk, pk)| -tk * pk.ln())
        .sum())
}

/// A patch with its slide-level label and area measurements.
#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub patch: PatchRecord,
    pub slide_positive: bool,
    pub a1: u64,
    pub ratio: f64,
    pub hard_label: u8,
}

impl LabeledPatch {
    pub fn new(patch: PatchRecord, slide_positive: bool, s: f64) -> Self {
        let (a1, ratio) = match &patch.mask_crop {
            Some(m) => (m.count_ones(), crate::tiling::malignant_ratio(m)),
            None => (0, 0.0),
        };
        Self {
            patch,
            slide_positive,
            a1,
            ratio,
            hard_label: hard_label(ratio, s),
        }
    }
}

/// A₁ᵐᵃˣ over a patch population.
pub fn max_malignant_area<'a>(patches: impl IntoIterator<Item = &'a LabeledPatch>) -> u64 {
    patches.into_iter().map(|p| p.a1).max().unwrap_or(0)
}

pub trait SamplingCandidate {
    fn slide_positive(&self) -> bool;
    fn patch_positive(&self) -> bool;
}

impl SamplingCandidate for LabeledPatch {
    fn slide_positive(&self) -> bool {
        self.slide_positive
    }

    fn patch_positive(&self) -> bool {
        self.hard_label == 1
    }
}

/// Draws `min(request/2, |pos|, |neg|)` indices from each pool, reproducibly
/// from `seed`. Positive indices come first, each group in draw order.
pub fn balanced_sample(
    positive_pool: &[usize],
    negative_pool: &[usize],
    request: usize,
    seed: u64,
) -> Result<Vec<usize>, LabelError> {
    if positive_pool.is_empty() {
        return Err(LabelError::EmptyClass("positive"));
    }
    if negative_pool.is_empty() {
        return Err(LabelError::EmptyClass("negative"));
    }
    let per_class = (request / 2).min(positive_pool.len()).min(negative_pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = positive_pool.to_vec();
    let mut neg = negative_pool.to_vec();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(per_class);
    neg.truncate(per_class);
    pos.extend(neg);
    Ok(pos)
}

/// Stage-1 sampling: positive patches only from positive slides, negative
/// patches only from negative slides, in equal numbers.
pub fn sample_training_patches<C: SamplingCandidate>(
    candidates: &[C],
    request: usize,
    seed: u64,
) -> Result<Vec<usize>, LabelError> {
    let positive: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.slide_positive() && c.patch_positive())
        .map(|(i, _)| i)
        .collect();
    let negative: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.slide_positive())
        .map(|(i, _)| i)
        .collect();
    balanced_sample(&positive, &negative, request, seed)
}

/// Magnitudes of the online augmentations. `fold_aug` enables the random
/// horizontal/vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub fold_aug: bool,
    pub apply_prob: f64,
    pub contrast_range: (f32, f32),
    pub brightness_range: (f32, f32),
    pub grid_nodes: usize,
    pub grid_max_shift: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            fold_aug: true,
            apply_prob: 0.5,
            contrast_range: (0.8, 1.2),
            brightness_range: (-25.0, 25.0),
            grid_nodes: 4,
            grid_max_shift: 0.1,
        }
    }
}

/// Per-node displacement of a square control grid, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDistortion {
    pub nodes: usize,
    pub shifts: Vec<(f32, f32)>,
}

/// The concrete random choices for one augmentation call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentPlan {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// (contrast multiplier, brightness offset)
    pub color: Option<(f32, f32)>,
    pub grid: Option<GridDistortion>,
}

impl AugmentPlan {
    pub fn draw(seed: u64, patch_size: u32, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cfg.apply_prob;
        // Every value is drawn unconditionally so the stream layout does not
        // depend on the outcome of earlier coin flips.
        let hflip = rng.random_bool(p);
        let vflip = rng.random_bool(p);
        let color_on = rng.random_bool(p);
        let contrast = rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1);
        let brightness = rng.random_range(cfg.brightness_range.0..=cfg.brightness_range.1);
        let grid_on = rng.random_bool(p);
        let max_shift = cfg.grid_max_shift * patch_size as f32;
        let shifts = (0..cfg.grid_nodes * cfg.grid_nodes)
            .map(|_| {
                (
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                )
            })
            .collect();
        Self {
            flip_horizontal: cfg.fold_aug && hflip,
            flip_vertical: cfg.fold_aug && vflip,
            color: color_on.then_some((contrast, brightness)),
            grid: (grid_on && cfg.grid_nodes >= 2).then_some(GridDistortion {
                nodes: cfg.grid_nodes,
                shifts,
            }),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_horizontal && !self.flip_vertical && self.color.is_none() && self.grid.is_none()
    }
}

fn flip_rgb_h(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

fn flip_rgb_v(img: &RgbImage) -> RgbImage {
    image::imageops::flip_vertical(img)
}

impl GridDistortion {
    /// Source coordinate for output pixel (x, y): the node shifts are
    /// bilinearly interpolated over the patch.
    fn source(&self, x: u32, y: u32, w: u32, h: u32) -> (f32, f32) {
        let cells = (self.nodes - 1) as f32;
        let u = if w > 1 { x as f32 / (w - 1) as f32 * cells } else { 0.0 };
        let v = if h > 1 { y as f32 / (h - 1) as f32 * cells } else { 0.0 };
        let i0 = (u.floor() as usize).min(self.nodes - 2);
        let j0 = (v.floor() as usize).min(self.nodes - 2);
        let fu = u - i0 as f32;
        let fv = v - j0 as f32;
        let node = |i: usize, j: usize| self.shifts[j * self.nodes + i];
        let lerp = |a: (f32, f32), b: (f32, f32), t: f32| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(node(i0, j0), node(i0 + 1, j0), fu);
        let bottom = lerp(node(i0, j0 + 1), node(i0 + 1, j0 + 1), fu);
        let (dx, dy) = lerp(top, bottom, fv);
        (
            (x as f32 + dx).clamp(0.0, (w - 1) as f32),
            (y as f32 + dy).clamp(0.0, (h - 1) as f32),
        )
    }

    fn warp_rgb(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        RgbImage::from_fn(w, h, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            let x0 = sx.floor() as u32;
            let y0 = sy.floor() as u32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let mut out = [0u8; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let g = |xx, yy| img.get_pixel(xx, yy)[c] as f32;
                let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
                let bottom = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
                *o = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(out)
        })
    }

    fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (w, h) = mask.dimensions();
        let mut out = Plane::filled(w, h, 0u8);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, w, h);
                out.set(x, y, mask.get(sx.round() as u32, sy.round() as u32));
            }
        }
        out
    }
}

fn jitter_color(img: &RgbImage, contrast: f32, brightness: f32) -> RgbImage {
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v = (*v as f32 * contrast + brightness).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Applies a plan. The mask receives only the geometric transforms.
pub fn apply_plan(patch: &PatchRecord, plan: &AugmentPlan) -> PatchRecord {
    let mut pixels = patch.pixels.clone();
    let mut mask = patch.mask_crop.clone();
    if plan.flip_horizontal {
        pixels = flip_rgb_h(&pixels);
        mask = mask.map(|m| m.flip_horizontal());
    }
    if plan.flip_vertical {
        pixels = flip_rgb_v(&pixels);
        mask = mask.map(|m| m.flip_vertical());
    }
    if let Some((contrast, brightness)) = plan.color {
        pixels = jitter_color(&pixels, contrast, brightness);
    }
    if let Some(grid) = &plan.grid {
        pixels = grid.warp_rgb(&pixels);
        mask = mask.map(|m| grid.warp_mask(&m));
    }
    PatchRecord {
        slide_id: patch.slide_id.clone(),
        origin_x: patch.origin_x,
        origin_y: patch.origin_y,
        pixels,
        mask_crop: mask,
    }
}

pub fn augment_patch(patch: &PatchRecord, seed: u64, cfg: &AugmentConfig) -> PatchRecord {
    let plan = AugmentPlan::draw(seed, patch.size(), cfg);
    apply_plan(patch, &plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledManifestRow {
    pub slide_id: String,
    pub origin_x: u32,
    pub origin_y: u32,
    pub a1_pixels: u64,
    pub ratio: f64,
    pub hard_label: u8,
    pub p_benign: f64,
    pub p_malignant: f64,
}

impl LabeledManifestRow {
    pub fn new(p: &LabeledPatch, label: &SmoothedLabel) -> Self {
        Self {
            slide_id: p.patch.slide_id.clone(),
            origin_x: p.patch.origin_x,
            origin_y: p.patch.origin_y,
            a1_pixels: p.a1,
            ratio: p.ratio,
            hard_label: p.hard_label,
            p_benign: label.p_benign,
            p_malignant: label.p_malignant,
        }
    }
}

pub fn write_labeled_manifest<W: Write>(writer: W, rows: &[LabeledManifestRow]) -> Result<(), LabelError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(eps: f64, a1_max: u64) -> LabelingConfig {
        LabelingConfig {
            hard_threshold: 0.05,
            epsilon: eps,
            a1_max,
        }
    }

    #[test]
    fn hard_label_examples() {
        assert_eq!(hard_label(0.0, 0.05), 0);
        assert_eq!(hard_label(0.10, 0.05), 1);
        assert_eq!(hard_label(0.05, 0.05), 0);
    }

    #[test]
    fn smooth_label_examples() {
        let l = smooth_label(1, 100, &cfg(0.1, 100)).unwrap();
        assert_eq!((l.p_benign, l.p_malignant), (0.0, 1.0));
        let l = smooth_label(1, 50, &cfg(0.1, 100)).unwrap();
        assert!((l.p_benign - 0.05).abs() < 1e-12 && (l.p_malignant - 0.95).abs() < 1e-12);
        let l = smooth_label(0, 0, &cfg(0.1, 100)).unwrap();
        assert_eq!((l.p_benign, l.p_malignant), (1.0, 0.0));
    }

    #[test]
    fn smooth_label_rejects_area_above_max() {
        assert!(matches!(
            smooth_label(1, 101, &cfg(0.1, 100)),
            Err(LabelError::RatioOutOfRange { .. })
        ));
    }

    #[test]
    fn config_requires_a1_max_when_smoothing() {
        assert!(cfg(0.1, 0).validate().is_err());
        assert!(cfg(0.0, 0).validate().is_ok());
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = SmoothedLabel::one_hot(1);
        assert_eq!(soft_target_cross_entropy([0.0, 1.0], &one_hot).unwrap(), 0.0);
        let any = SmoothedLabel {
            p_benign: 0.3,
            p_malignant: 0.7,
        };
        let ce = soft_target_cross_entropy([0.5, 0.5], &any).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        let t = SmoothedLabel {
            p_benign: 0.05,
            p_malignant: 0.95,
        };
        let ce = soft_target_cross_entropy([0.9, 0.1], &t).unwrap();
        let expected = -(0.05 * 0.9f64.ln() + 0.95 * 0.1f64.ln());
        assert!((ce - expected).abs() < 1e-12);
        assert!((ce - 2.192724).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_non_distributions() {
        let t = SmoothedLabel::one_hot(0);
        assert!(soft_target_cross_entropy([0.5, 0.6], &t).is_err());
        assert!(soft_target_cross_entropy([-0.1, 1.1], &t).is_err());
        assert_eq!(soft_target_cross_entropy([0.0, 1.0], &t).unwrap(), f64::INFINITY);
    }

    struct Cand(bool, bool);
    impl SamplingCandidate for Cand {
        fn slide_positive(&self) -> bool {
            self.0
        }
        fn patch_positive(&self) -> bool {
            self.1
        }
    }

    fn pool(n_pos: usize, n_neg: usize) -> Vec<Cand> {
        (0..n_pos)
            .map(|_| Cand(true, true))
            .chain((0..n_neg).map(|_| Cand(false, false)))
            .collect()
    }

    #[test]
    fn sampling_is_balanced() {
        let c = pool(10, 10);
        let idx = sample_training_patches(&c, 10, 7).unwrap();
        assert_eq!(idx.iter().filter(|&&i| c[i].0).count(), 5);
        assert_eq!(idx.iter().filter(|&&i| !c[i].0).count(), 5);
    }

    #[test]
    fn sampling_caps_at_minority() {
        let c = pool(3, 100);
        let idx = sample_training_patches(&c, 6, 7).unwrap();
        assert_eq!(idx.iter().filter(|&&i| c[i].0).count(), 3);
        assert_eq!(idx.iter().filter(|&&i| !c[i].0).count(), 3);
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = pool(40, 40);
        assert_eq!(
            sample_training_patches(&c, 20, 11).unwrap(),
            sample_training_patches(&c, 20, 11).unwrap()
        );
    }

    #[test]
    fn sampling_ignores_negative_patches_of_positive_slides() {
        let mut c = pool(2, 2);
        c.push(Cand(true, false));
        let idx = sample_training_patches(&c, 100, 1).unwrap();
        assert!(!idx.contains(&4));
    }

    #[test]
    fn sampling_needs_both_classes() {
        assert!(matches!(
            sample_training_patches(&pool(0, 5), 4, 1),
            Err(LabelError::EmptyClass(_))
        ));
    }

    fn textured_patch(size: u32) -> PatchRecord {
        let pixels = RgbImage::from_fn(size, size, |x, y| Rgb([(x * 7 + y) as u8, (y * 5) as u8, (x ^ y) as u8]));
        let mut mask = Plane::filled(size, size, 0u8);
        for y in 0..size / 2 {
            for x in 0..size / 3 {
                mask.set(x, y, 1);
            }
        }
        PatchRecord {
            slide_id: "s".into(),
            origin_x: 0,
            origin_y: 0,
            pixels,
            mask_crop: Some(mask),
        }
    }

    #[test]
    fn all_skip_seed_is_identity() {
        let cfg = AugmentConfig::default();
        let seed = (0..10_000u64)
            .find(|&s| AugmentPlan::draw(s, 16, &cfg).is_identity())
            .expect("some seed skips every augmentation");
        let p = textured_patch(16);
        let out = augment_patch(&p, seed, &cfg);
        assert_eq!(out.pixels, p.pixels);
        assert_eq!(out.mask_crop, p.mask_crop);
    }

    #[test]
    fn horizontal_flip_is_involution() {
        let p = textured_patch(12);
        let plan = AugmentPlan {
            flip_horizontal: true,
            ..Default::default()
        };
        let twice = apply_plan(&apply_plan(&p, &plan), &plan);
        assert_eq!(twice.pixels, p.pixels);
        assert_eq!(twice.mask_crop, p.mask_crop);
    }

    #[test]
    fn flip_moves_mask_with_pixels() {
        let p = textured_patch(10);
        let plan = AugmentPlan {
            flip_horizontal: true,
            flip_vertical: true,
            ..Default::default()
        };
        let out = apply_plan(&p, &plan);
        let m = p.mask_crop.as_ref().unwrap();
        let om = out.mask_crop.as_ref().unwrap();
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(om.get(x, y), m.get(9 - x, 9 - y));
                assert_eq!(out.pixels.get_pixel(x, y), p.pixels.get_pixel(9 - x, 9 - y));
            }
        }
    }

    #[test]
    fn color_jitter_leaves_mask_alone() {
        let p = textured_patch(8);
        let plan = AugmentPlan {
            color: Some((1.2, 25.0)),
            ..Default::default()
        };
        let out = apply_plan(&p, &plan);
        assert_eq!(out.mask_crop, p.mask_crop);
        assert_ne!(out.pixels, p.pixels);
    }

    #[test]
    fn grid_distortion_transports_marker() {
        // bright block in pixels and mask stays co-located after warping
        let size = 48;
        let mut pixels = RgbImage::from_pixel(size, size, Rgb([20, 20, 20]));
        let mut mask = Plane::filled(size, size, 0u8);
        for y in 18..30 {
            for x in 10..22 {
                pixels.put_pixel(x, y, Rgb([240, 240, 240]));
                mask.set(x, y, 1);
            }
        }
        let p = PatchRecord {
            slide_id: "s".into(),
            origin_x: 0,
            origin_y: 0,
            pixels,
            mask_crop: Some(mask),
        };
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let mut plan = AugmentPlan::draw(seed, size, &cfg);
            plan.color = None;
            if plan.grid.is_none() {
                continue;
            }
            let out = apply_plan(&p, &plan);
            let om = out.mask_crop.unwrap();
            for y in 0..size {
                for x in 0..size {
                    // nearest-sampled mask vs bilinear pixels: at least a quarter of
                    // the bilinear weight sits on the nearest source pixel
                    let v = out.pixels.get_pixel(x, y)[0];
                    if om.get(x, y) == 1 {
                        assert!(v >= 74, "seed {seed} at ({x},{y})");
                    } else {
                        assert!(v <= 186, "seed {seed} at ({x},{y})");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn smoothed_labels_are_distributions(y in 0u8..2, a1 in 0u64..=1000, eps in 0.0f64..1.0) {
            let l = smooth_label(y, a1, &cfg(eps, 1000)).unwrap();
            prop_assert!((l.p_benign + l.p_malignant - 1.0).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&l.p_benign) && (0.0..=1.0).contains(&l.p_malignant));
        }

        #[test]
        fn zero_epsilon_is_one_hot(y in 0u8..2, a1 in 0u64..=1000) {
            prop_assert_eq!(smooth_label(y, a1, &cfg(0.0, 1000)).unwrap(), SmoothedLabel::one_hot(y));
        }

        #[test]
        fn smoothing_is_monotone_in_area(a in 0u64..=1000, b in 0u64..=1000, eps in 0.0f64..1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let c = cfg(eps, 1000);
            prop_assert!(smooth_label(1, lo, &c).unwrap().p_malignant <= smooth_label(1, hi, &c).unwrap().p_malignant);
            prop_assert!(smooth_label(0, hi, &c).unwrap().p_benign <= smooth_label(0, lo, &c).unwrap().p_benign);
        }

        #[test]
        fn cross_entropy_bounded_by_entropy(p in 0.001f64..0.999, t in 0.0f64..=1.0) {
            let target = SmoothedLabel { p_benign: 1.0 - t, p_malignant: t };
            let ce = soft_target_cross_entropy([1.0 - p, p], &target).unwrap();
            prop_assert!(ce >= target.entropy() - 1e-12);
            if t > 0.0 && t < 1.0 {
                let at_target = soft_target_cross_entropy([1.0 - t, t], &target).unwrap();
                prop_assert!((at_target - target.entropy()).abs() < 1e-12);
            }
        }
    }
}
