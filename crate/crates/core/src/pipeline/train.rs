//! Stage-specific dataset assembly and training with rule enforcement.

use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelBundle, PipelineConfig, PipelineError};
use crate::adversarial::{domain_split, run_schedule, AdversarialError, AdversarialNets, DomainTag, SegSample, TrainingReport};
use crate::classification::network::{train_classifier, ClassifierArch, CnnScorer, TrainingSample};
use crate::labeling::{balanced_sample, max_malignant_area, sample_training_patches, smooth_label, LabeledPatch, SmoothedLabel};
use crate::nn::TrainBackend;
use crate::tiling::{extract_grid, roi_keep, SlideImage};

pub const RULE_STAGE1_POSITIVES: &str = "stage1-positives-from-positive-slides";
pub const RULE_STAGE1_NEGATIVES: &str = "stage1-negatives-from-negative-slides";
pub const RULE_STAGE2_SLIDES: &str = "stage2-positive-slides-only";
pub const RULE_BOTH_CLASSES: &str = "both-classes-present";
pub const RULE_SEG_PATCHES: &str = "segmentation-positive-patches-with-masks";

/// RoI-kept patches of every slide, labelled against `cfg.hard_threshold`.
pub fn collect_patches(slides: &[SlideImage], cfg: &PipelineConfig) -> Result<Vec<LabeledPatch>, PipelineError> {
    let mut out = Vec::new();
    for slide in slides {
        let positive = slide.is_positive();
        for patch in extract_grid(slide, &cfg.tile)? {
            if roi_keep(&patch, cfg.roi_threshold) {
                out.push(LabeledPatch::new(patch, positive, cfg.hard_threshold));
            }
        }
    }
    Ok(out)
}

fn rule_error(rule: &'static str, detail: String) -> PipelineError {
    PipelineError::Rule { rule, detail }
}

fn patch_name(p: &LabeledPatch) -> String {
    format!("{}@({},{})", p.patch.slide_id, p.patch.origin_x, p.patch.origin_y)
}

/// Balanced Stage-1 set: positive patches of positive slides against patches
/// of negative slides.
pub fn stage1_dataset(patches: &[LabeledPatch], cfg: &PipelineConfig, seed: u64) -> Result<Vec<LabeledPatch>, PipelineError> {
    let idx = sample_training_patches(patches, cfg.train_patches, seed)
        .map_err(|e| rule_error(RULE_BOTH_CLASSES, e.to_string()))?;
    Ok(idx.into_iter().map(|i| patches[i].clone()).collect())
}

/// Balanced Stage-2 set drawn from positive slides only.
pub fn stage2_dataset(patches: &[LabeledPatch], cfg: &PipelineConfig, seed: u64) -> Result<Vec<LabeledPatch>, PipelineError> {
    let pos: Vec<usize> = (0..patches.len())
        .filter(|&i| patches[i].slide_positive && patches[i].hard_label == 1)
        .collect();
    let neg: Vec<usize> = (0..patches.len())
        .filter(|&i| patches[i].slide_positive && patches[i].hard_label == 0)
        .collect();
    let idx = balanced_sample(&pos, &neg, cfg.train_patches, seed).map_err(|e| rule_error(RULE_BOTH_CLASSES, e.to_string()))?;
    Ok(idx.into_iter().map(|i| patches[i].clone()).collect())
}

fn require_both_classes(data: &[LabeledPatch]) -> Result<(), PipelineError> {
    let pos = data.iter().filter(|p| p.hard_label == 1).count();
    if pos == 0 || pos == data.len() {
        return Err(rule_error(
            RULE_BOTH_CLASSES,
            format!("{pos} positive of {} patches", data.len()),
        ));
    }
    Ok(())
}

/// Classifier training outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub model_id: String,
    pub arch: ClassifierArch,
    pub n_positive: usize,
    pub n_negative: usize,
    pub epsilon: f64,
    pub a1_max: u64,
    pub epoch_losses: Vec<f64>,
}

fn report(scorer: &CnnScorer, data: &[LabeledPatch], epsilon: f64, a1_max: u64, losses: Vec<f64>) -> ClassifierReport {
    use crate::classification::PatchScorer;
    let n_positive = data.iter().filter(|p| p.hard_label == 1).count();
    ClassifierReport {
        model_id: scorer.id().to_string(),
        arch: scorer.arch(),
        n_positive,
        n_negative: data.len() - n_positive,
        epsilon,
        a1_max,
        epoch_losses: losses,
    }
}

/// Trains the Stage-1 scorer on area-smoothed targets.
pub fn train_stage1(cfg: &PipelineConfig, data: &[LabeledPatch], seed: u64) -> Result<(CnnScorer, ClassifierReport), PipelineError> {
    cfg.validate()?;
    for p in data {
        if p.hard_label == 1 && !p.slide_positive {
            return Err(rule_error(RULE_STAGE1_POSITIVES, patch_name(p)));
        }
        if p.hard_label == 0 && p.slide_positive {
            return Err(rule_error(RULE_STAGE1_NEGATIVES, patch_name(p)));
        }
    }
    require_both_classes(data)?;
    let a1_max = max_malignant_area(data).max(1);
    let labeling = cfg.labeling(a1_max);
    let samples = data
        .iter()
        .map(|p| {
            Ok(TrainingSample {
                patch: p.patch.clone(),
                target: smooth_label(p.hard_label, p.a1, &labeling).map_err(|e| PipelineError::Config(e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let (scorer, losses) = train_classifier(cfg.stage1_arch, &samples, &cfg.classifier, cfg.augment_config(), seed);
    let rep = report(&scorer, data, cfg.epsilon, a1_max, losses);
    Ok((scorer, rep))
}

/// Trains one Stage-2 scorer per configured architecture on hard targets.
pub fn train_stage2(
    cfg: &PipelineConfig,
    data: &[LabeledPatch],
    seed: u64,
) -> Result<Vec<(CnnScorer, ClassifierReport)>, PipelineError> {
    cfg.validate()?;
    if let Some(p) = data.iter().find(|p| !p.slide_positive) {
        return Err(rule_error(RULE_STAGE2_SLIDES, patch_name(p)));
    }
    require_both_classes(data)?;
    let samples: Vec<TrainingSample> = data
        .iter()
        .map(|p| TrainingSample {
            patch: p.patch.clone(),
            target: SmoothedLabel::one_hot(p.hard_label),
        })
        .collect();
    Ok(cfg
        .stage2_archs
        .iter()
        .enumerate()
        .map(|(k, &arch)| {
            let s = seed.wrapping_add(1 + k as u64);
            let (scorer, losses) = train_classifier(arch, &samples, &cfg.classifier, cfg.augment_config(), s);
            let rep = report(&scorer, data, 0.0, 0, losses);
            (scorer, rep)
        })
        .collect())
}

/// Positive patches of positive slides with their masks, tagged by an
/// appearance split. Identical appearance puts everything in domain A.
pub fn segmentation_samples(patches: &[LabeledPatch]) -> Result<Vec<SegSample>, PipelineError> {
    let mut chosen = Vec::new();
    for p in patches {
        match (&p.patch.mask_crop, p.slide_positive && p.hard_label == 1) {
            (Some(mask), true) => chosen.push((p, mask)),
            _ => return Err(rule_error(RULE_SEG_PATCHES, patch_name(p))),
        }
    }
    if chosen.is_empty() {
        return Err(rule_error(RULE_SEG_PATCHES, "no patches".into()));
    }
    let images: Vec<&RgbImage> = chosen.iter().map(|(p, _)| &p.patch.pixels).collect();
    let tags = match domain_split(&images) {
        Ok(t) => t,
        Err(AdversarialError::DegenerateData) | Err(AdversarialError::TooFewPatches(_)) => vec![DomainTag::A; chosen.len()],
        Err(e) => return Err(PipelineError::Data(e.to_string())),
    };
    Ok(chosen
        .into_iter()
        .zip(tags)
        .map(|((p, mask), domain)| SegSample {
            image: p.patch.pixels.clone(),
            mask: mask.clone(),
            domain,
        })
        .collect())
}

/// Positive patches of positive slides, capped at `cfg.train_patches` by a
/// seeded shuffle.
pub fn segmentation_pool(patches: &[LabeledPatch], cfg: &PipelineConfig, seed: u64) -> Vec<LabeledPatch> {
    let mut positives: Vec<LabeledPatch> = patches
        .iter()
        .filter(|p| p.slide_positive && p.hard_label == 1)
        .cloned()
        .collect();
    if positives.len() > cfg.train_patches {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        positives.shuffle(&mut rng);
        positives.truncate(cfg.train_patches);
    }
    positives
}

/// Runs the full adversarial schedule on the given samples.
pub fn train_segmentation(
    cfg: &PipelineConfig,
    samples: &[SegSample],
    seed: u64,
) -> Result<(AdversarialNets<TrainBackend>, TrainingReport), PipelineError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(rule_error(RULE_SEG_PATCHES, "no patches".into()));
    }
    let nets = AdversarialNets::<TrainBackend>::new(&cfg.backbone, seed, &Default::default())
        .map_err(|e| PipelineError::Model(e.to_string()))?;
    run_schedule(nets, samples, &cfg.schedule, &cfg.adv_weights(), cfg.dm_adv_form, seed)
        .map_err(|e| PipelineError::Model(e.to_string()))
}

/// Reports of a full three-stage training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub n_patches: usize,
    pub stage1: ClassifierReport,
    pub stage2: Vec<ClassifierReport>,
    pub n_segmentation_patches: usize,
    pub segmentation: TrainingReport,
    pub stage_seconds: [f64; 3],
}

/// Trains all three stages on annotated slides.
pub fn train_cascade(cfg: &PipelineConfig, slides: &[SlideImage], seed: u64) -> Result<(ModelBundle, CascadeReport), PipelineError> {
    cfg.validate()?;
    let patches = collect_patches(slides, cfg)?;

    let t = Instant::now();
    let s1 = stage1_dataset(&patches, cfg, seed)?;
    let (stage1, r1) = train_stage1(cfg, &s1, seed)?;
    let t1 = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let s2 = stage2_dataset(&patches, cfg, seed.wrapping_add(1))?;
    let (stage2, r2): (Vec<_>, Vec<_>) = train_stage2(cfg, &s2, seed.wrapping_add(10))?.into_iter().unzip();
    let t2 = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let positives = segmentation_pool(&patches, cfg, seed.wrapping_add(2));
    let samples = segmentation_samples(&positives)?;
    let (nets, seg_report) = train_segmentation(cfg, &samples, seed.wrapping_add(20))?;
    let t3 = t.elapsed().as_secs_f64();

    Ok((
        ModelBundle {
            stage1,
            stage2,
            segmenter: nets.segmenter(),
        },
        CascadeReport {
            n_patches: patches.len(),
            stage1: r1,
            stage2: r2,
            n_segmentation_patches: samples.len(),
            segmentation: seg_report,
            stage_seconds: [t1, t2, t3],
        },
    ))
}
