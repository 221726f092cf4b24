//! Stage-1 WSI triage and Stage-2 key-patch selection.
//!
//! Patch models are consumed only through [`PatchScorer`]; the decision logic
//! here works on plain scores so it can be checked exhaustively.

pub mod network;

use std::io::Write;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClassificationError {
    #[error("no scores to partition")]
    EmptyInput,
    #[error("no patches survived to be scored")]
    NoPatches,
    #[error("ensemble members scored different patch lists")]
    RaggedInput,
    #[error("invalid stage-1 config: {0}")]
    InvalidConfig(String),
}

/// Anything that maps a patch to a malignancy probability in [0, 1].
///
/// Implementations must be deterministic for a fixed model state. A single
/// instance is not assumed to be shareable across threads.
pub trait PatchScorer {
    fn id(&self) -> &str;

    fn score(&self, patch: &RgbImage) -> f64;

    fn score_batch(&self, patches: &[&RgbImage]) -> Vec<f64> {
        patches.iter().map(|p| self.score(p)).collect()
    }
}

impl<S: PatchScorer + ?Sized> PatchScorer for &S {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn score(&self, patch: &RgbImage) -> f64 {
        (**self).score(patch)
    }

    fn score_batch(&self, patches: &[&RgbImage]) -> Vec<f64> {
        (**self).score_batch(patches)
    }
}

impl<S: PatchScorer + ?Sized> PatchScorer for Box<S> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn score(&self, patch: &RgbImage) -> f64 {
        (**self).score(patch)
    }

    fn score_batch(&self, patches: &[&RgbImage]) -> Vec<f64> {
        (**self).score_batch(patches)
    }
}

/// Score of the patch at `index` in the slide's grid list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub index: usize,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreLabel {
    Positive,
    Negative,
}

impl std::fmt::Display for PreLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PreLabel::Positive => "positive",
            PreLabel::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsiDecision {
    pub pre_label: PreLabel,
    pub score: f64,
    pub n_positive_patches: usize,
    pub n_negative_patches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    /// Patch threshold τ.
    pub tau: f64,
    /// Pre-prediction ratio threshold T.
    pub t: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { tau: 0.1, t: 0.1 }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), ClassificationError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ClassificationError::InvalidConfig(format!("tau={} outside (0, 1)", self.tau)));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(ClassificationError::InvalidConfig(format!("T={} outside (0, 1]", self.t)));
        }
        Ok(())
    }
}

/// Splits scores into S_p (`p >= τ`) and S_n (`p < τ`), preserving order.
pub fn partition_scores(
    scores: &[PatchScore],
    tau: f64,
) -> Result<(Vec<PatchScore>, Vec<PatchScore>), ClassificationError> {
    if scores.is_empty() {
        return Err(ClassificationError::EmptyInput);
    }
    Ok(scores.iter().partition(|s| s.p >= tau))
}

pub fn pre_predict(n_pos: usize, n_neg: usize, t: f64) -> Result<PreLabel, ClassificationError> {
    let total = n_pos + n_neg;
    if total == 0 {
        return Err(ClassificationError::NoPatches);
    }
    Ok(if n_pos as f64 / total as f64 >= t {
        PreLabel::Positive
    } else {
        PreLabel::Negative
    })
}

fn mean(scores: &[PatchScore]) -> f64 {
    scores.iter().map(|s| s.p).sum::<f64>() / scores.len() as f64
}

/// WSI score: the mean over S_p when pre-predicted positive, else over S_n.
pub fn wsi_score(scores: &[PatchScore], cfg: &Stage1Config) -> Result<WsiDecision, ClassificationError> {
    if scores.is_empty() {
        return Err(ClassificationError::NoPatches);
    }
    let (sp, sn) = partition_scores(scores, cfg.tau)?;
    let pre_label = pre_predict(sp.len(), sn.len(), cfg.t)?;
    let averaged = match pre_label {
        PreLabel::Positive => &sp,
        PreLabel::Negative => &sn,
    };
    // Non-empty whenever 0 < T <= 1: a positive ratio >= T > 0 needs a member
    // of S_p, and an empty S_n forces ratio 1 >= T.
    debug_assert!(!averaged.is_empty());
    Ok(WsiDecision {
        pre_label,
        score: mean(averaged),
        n_positive_patches: sp.len(),
        n_negative_patches: sn.len(),
    })
}

/// Per-patch arithmetic mean across models.
pub fn ensemble_average(per_model: &[Vec<PatchScore>]) -> Result<Vec<PatchScore>, ClassificationError> {
    let first = per_model.first().ok_or(ClassificationError::EmptyInput)?;
    for other in &per_model[1..] {
        if other.len() != first.len() || other.iter().zip(first).any(|(a, b)| a.index != b.index) {
            return Err(ClassificationError::RaggedInput);
        }
    }
    let n = per_model.len() as f64;
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, s)| PatchScore {
            index: s.index,
            p: per_model.iter().map(|m| m[i].p).sum::<f64>() / n,
        })
        .collect())
}

/// Grid indices of the patches whose ensemble score reaches `key_threshold`.
pub fn select_key_patches(ensembled: &[PatchScore], key_threshold: f64) -> Vec<usize> {
    ensembled
        .iter()
        .filter(|s| s.p >= key_threshold)
        .map(|s| s.index)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub slide_id: String,
    pub origin_x: u32,
    pub origin_y: u32,
    pub model_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub slide_id: String,
    pub pre_label: PreLabel,
    pub score: f64,
}

pub fn write_csv<W: Write, R: Serialize>(writer: W, rows: &[R]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
