//! Three-stage orchestration: WSI triage, key-patch selection and
//! segmentation of the key patches, with the negative short-circuit,
//! configuration, training entry points, reports and persistence.

pub mod io;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{AdvWeights, DmAdvForm, TrainSchedule};
use crate::backbone::{BackboneConfig, Segmenter};
use crate::classification::network::{ClassifierArch, ClassifierTrainConfig, CnnScorer};
use crate::classification::{
    ensemble_average, select_key_patches, wsi_score, write_csv, DecisionRow, PatchScore, PatchScorer, PreLabel,
    ScoreRow, Stage1Config, WsiDecision,
};
use crate::labeling::{AugmentConfig, LabelingConfig};
use crate::raster::{write_mask_png, write_prob_png, BinaryMask, ProbMap};
use crate::tiling::{extract_grid, roi_keep, SlideImage, StitchAccumulator, StitchedMap, TileSpec, TilingError};

pub use io::{read_dataset, write_dataset, SlideRow};
pub use synth::{generate_cohort, generate_synthetic_slide, CohortSpec, StainDomain, SyntheticSlideSpec};
pub use train::{
    collect_patches, segmentation_pool, segmentation_samples, stage1_dataset, stage2_dataset, train_cascade, train_segmentation,
    train_stage1, train_stage2, CascadeReport, ClassifierReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("dataset rule `{rule}` violated: {detail}")]
    Rule { rule: &'static str, detail: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("model missing: {0}")]
    ModelMissing(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 model.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::SpecInfeasible(_) | PipelineError::Rule { .. } | PipelineError::Io(_) => 3,
            PipelineError::Model(_) | PipelineError::ModelMissing(_) => 4,
        }
    }
}

impl From<TilingError> for PipelineError {
    fn from(e: TilingError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

/// Every tunable of the pipeline. Defaults are the full-scale values;
/// [`PipelineConfig::desk`] shrinks sizes for CPU runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// RoI colour-std threshold R.
    pub roi_threshold: f64,
    /// Patch positivity threshold τ.
    pub tau: f64,
    /// Pre-prediction ratio threshold T.
    pub t: f64,
    pub epsilon: f64,
    pub alpha_e: f64,
    pub alpha_d: f64,
    pub alpha_m: f64,
    /// Hard-label area threshold S.
    pub hard_threshold: f64,
    pub key_threshold: f64,
    pub seed: u64,
    pub dm_adv_form: DmAdvForm,
    pub stage1_arch: ClassifierArch,
    pub stage2_archs: Vec<ClassifierArch>,
    /// Patches requested from each sampling rule.
    pub train_patches: usize,
    pub augment_enabled: bool,
    pub tile: TileSpec,
    pub backbone: BackboneConfig,
    pub schedule: TrainSchedule,
    pub classifier: ClassifierTrainConfig,
    pub augment: AugmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let adv = AdvWeights::default();
        Self {
            roi_threshold: 30.0,
            tau: 0.1,
            t: 0.1,
            epsilon: 0.1,
            alpha_e: adv.alpha_e,
            alpha_d: adv.alpha_d,
            alpha_m: adv.alpha_m,
            hard_threshold: 0.05,
            key_threshold: 0.5,
            seed: 0,
            dm_adv_form: DmAdvForm::default(),
            stage1_arch: ClassifierArch::Residual,
            stage2_archs: ClassifierArch::ALL.to_vec(),
            train_patches: 512,
            augment_enabled: true,
            tile: TileSpec::default(),
            backbone: BackboneConfig::default(),
            schedule: TrainSchedule::default(),
            classifier: ClassifierTrainConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// 256-pixel patches at stride 128, the tiny backbone at 64² and 32²
    /// classifier inputs trained for 12 epochs.
    pub fn desk() -> Self {
        Self {
            tile: TileSpec {
                patch_size: 256,
                stride: 128,
            },
            backbone: BackboneConfig::tiny(64),
            classifier: ClassifierTrainConfig {
                epochs: 12,
                ..ClassifierTrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.roi_threshold >= 0.0 && self.roi_threshold.is_finite()) {
            return bad(format!("roi_threshold={} must be non-negative", self.roi_threshold));
        }
        self.stage1_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon={} outside [0, 1)", self.epsilon));
        }
        if !(self.hard_threshold > 0.0 && self.hard_threshold < 1.0) {
            return bad(format!("hard_threshold={} outside (0, 1)", self.hard_threshold));
        }
        if !(0.0..=1.0).contains(&self.key_threshold) {
            return bad(format!("key_threshold={} outside [0, 1]", self.key_threshold));
        }
        if self.stage2_archs.is_empty() {
            return bad("stage2_archs must name at least one architecture".into());
        }
        if self.train_patches < 2 {
            return bad("train_patches must be at least 2".into());
        }
        let c = &self.classifier;
        if c.input_size < 8 || c.epochs == 0 || c.batch_size < 2 || !(c.learning_rate > 0.0) {
            return bad(format!("classifier settings {c:?}"));
        }
        self.adv_weights().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.tile.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.backbone.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.schedule.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config { tau: self.tau, t: self.t }
    }

    pub fn adv_weights(&self) -> AdvWeights {
        AdvWeights {
            alpha_e: self.alpha_e,
            alpha_d: self.alpha_d,
            alpha_m: self.alpha_m,
        }
    }

    pub fn labeling(&self, a1_max: u64) -> LabelingConfig {
        LabelingConfig {
            hard_threshold: self.hard_threshold,
            epsilon: self.epsilon,
            a1_max,
        }
    }

    pub fn augment_config(&self) -> Option<&AugmentConfig> {
        self.augment_enabled.then_some(&self.augment)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The effective configuration as TOML, written next to every output.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

/// Per-slide timings and patch counts through the stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub stage_reached: u8,
    pub decision: PreLabel,
    pub score: f64,
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
    pub stage3_seconds: f64,
    pub n_extracted: usize,
    pub n_roi_kept: usize,
    pub n_scored: usize,
    pub n_key: usize,
    /// Calls made to Stage-2 scorers and to the segmentation model.
    pub stage2_invocations: usize,
    pub stage3_invocations: usize,
}

impl StageReport {
    pub fn total_seconds(&self) -> f64 {
        self.stage1_seconds + self.stage2_seconds + self.stage3_seconds
    }

    pub fn counts_monotone(&self) -> bool {
        self.n_extracted >= self.n_roi_kept && self.n_roi_kept >= self.n_scored && self.n_scored >= self.n_key
    }
}

/// Probability rasters for a batch of patches, one per patch at its own size.
pub trait MaskPredictor {
    fn predict(&self, patches: &[&RgbImage]) -> Result<Vec<ProbMap>, PipelineError>;
}

impl<M: MaskPredictor + ?Sized> MaskPredictor for &M {
    fn predict(&self, patches: &[&RgbImage]) -> Result<Vec<ProbMap>, PipelineError> {
        (**self).predict(patches)
    }
}

impl MaskPredictor for Segmenter {
    fn predict(&self, patches: &[&RgbImage]) -> Result<Vec<ProbMap>, PipelineError> {
        self.segment(patches).map_err(|e| PipelineError::Model(e.to_string()))
    }
}

/// Wraps a model and counts how often it is invoked.
#[derive(Debug)]
pub struct Counted<M> {
    pub inner: M,
    calls: AtomicUsize,
}

impl<M> Counted<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: PatchScorer> PatchScorer for Counted<S> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn score(&self, patch: &RgbImage) -> f64 {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(patch)
    }

    fn score_batch(&self, patches: &[&RgbImage]) -> Vec<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score_batch(patches)
    }
}

impl<P: MaskPredictor> MaskPredictor for Counted<P> {
    fn predict(&self, patches: &[&RgbImage]) -> Result<Vec<ProbMap>, PipelineError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(patches)
    }
}

/// Models used by [`run_inference`].
pub struct Models<'a> {
    pub stage1: &'a dyn PatchScorer,
    pub stage2: Vec<&'a dyn PatchScorer>,
    pub segmenter: Option<&'a dyn MaskPredictor>,
}

#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub decision: WsiDecision,
    pub map: Option<StitchedMap>,
    /// The stitched map binarised at 0.5.
    pub mask: Option<BinaryMask>,
    pub report: StageReport,
    /// Stage-1 scores, then the Stage-2 ensemble means when Stage 2 ran.
    pub scores: Vec<ScoreRow>,
}

pub const MASK_THRESHOLD: f32 = 0.5;

fn score_rows(slide: &str, patches: &[&crate::tiling::PatchRecord], scores: &[f64], model: &str) -> Vec<ScoreRow> {
    patches
        .iter()
        .zip(scores)
        .map(|(p, &s)| ScoreRow {
            slide_id: slide.to_string(),
            origin_x: p.origin_x,
            origin_y: p.origin_y,
            model_id: model.to_string(),
            score: s,
        })
        .collect()
}

/// Runs the cascade on one slide. Stage 1 tiles, filters and scores the slide
/// and decides its label; a negative slide stops there. A positive slide gets
/// its RoI patches scored by every Stage-2 model, the patches whose ensemble
/// mean reaches the key threshold are segmented, and their probabilities are
/// averaged into a slide-sized map that is zero wherever no key patch lies.
pub fn run_inference(slide: &SlideImage, cfg: &PipelineConfig, models: &Models<'_>) -> Result<InferenceOutcome, PipelineError> {
    let t1 = Instant::now();
    let patches = extract_grid(slide, &cfg.tile)?;
    let kept: Vec<&crate::tiling::PatchRecord> = patches.iter().filter(|p| roi_keep(p, cfg.roi_threshold)).collect();
    let mut report = StageReport {
        slide_id: slide.id.clone(),
        width: slide.width(),
        height: slide.height(),
        stage_reached: 1,
        decision: PreLabel::Negative,
        score: 0.0,
        stage1_seconds: 0.0,
        stage2_seconds: 0.0,
        stage3_seconds: 0.0,
        n_extracted: patches.len(),
        n_roi_kept: kept.len(),
        n_scored: 0,
        n_key: 0,
        stage2_invocations: 0,
        stage3_invocations: 0,
    };
    let empty_decision = WsiDecision {
        pre_label: PreLabel::Negative,
        score: 0.0,
        n_positive_patches: 0,
        n_negative_patches: 0,
    };
    if kept.is_empty() {
        report.stage1_seconds = t1.elapsed().as_secs_f64();
        return Ok(InferenceOutcome {
            decision: empty_decision,
            map: None,
            mask: None,
            report,
            scores: Vec::new(),
        });
    }
    let images: Vec<&RgbImage> = kept.iter().map(|p| &p.pixels).collect();
    let s1 = models.stage1.score_batch(&images);
    if s1.len() != images.len() {
        return Err(PipelineError::Model(format!("stage-1 scorer returned {} scores for {} patches", s1.len(), images.len())));
    }
    let mut scores = score_rows(&slide.id, &kept, &s1, models.stage1.id());
    let indexed: Vec<PatchScore> = s1.iter().enumerate().map(|(index, &p)| PatchScore { index, p }).collect();
    let decision = wsi_score(&indexed, &cfg.stage1_config()).map_err(|e| PipelineError::Model(e.to_string()))?;
    report.n_scored = kept.len();
    report.decision = decision.pre_label;
    report.score = decision.score;
    report.stage1_seconds = t1.elapsed().as_secs_f64();
    if decision.pre_label == PreLabel::Negative {
        return Ok(InferenceOutcome {
            decision,
            map: None,
            mask: None,
            report,
            scores,
        });
    }

    if models.stage2.is_empty() {
        return Err(PipelineError::ModelMissing("stage-2 scorers".into()));
    }
    let segmenter = models
        .segmenter
        .ok_or_else(|| PipelineError::ModelMissing("segmentation model".into()))?;

    let t2 = Instant::now();
    report.stage_reached = 2;
    let mut per_model = Vec::with_capacity(models.stage2.len());
    for m in &models.stage2 {
        let s = m.score_batch(&images);
        report.stage2_invocations += 1;
        if s.len() != images.len() {
            return Err(PipelineError::Model(format!("scorer {} returned {} scores", m.id(), s.len())));
        }
        per_model.push(s.iter().enumerate().map(|(index, &p)| PatchScore { index, p }).collect::<Vec<_>>());
    }
    let ensembled = ensemble_average(&per_model).map_err(|e| PipelineError::Model(e.to_string()))?;
    let ens: Vec<f64> = ensembled.iter().map(|s| s.p).collect();
    scores.extend(score_rows(&slide.id, &kept, &ens, "ensemble"));
    let key = select_key_patches(&ensembled, cfg.key_threshold);
    report.n_key = key.len();
    report.stage2_seconds = t2.elapsed().as_secs_f64();

    let t3 = Instant::now();
    report.stage_reached = 3;
    let mut acc = StitchAccumulator::new(slide.width(), slide.height());
    if !key.is_empty() {
        let key_images: Vec<&RgbImage> = key.iter().map(|&i| images[i]).collect();
        let probs = segmenter.predict(&key_images)?;
        report.stage3_invocations += 1;
        if probs.len() != key.len() {
            return Err(PipelineError::Model(format!("segmenter returned {} maps for {} patches", probs.len(), key.len())));
        }
        for (&i, p) in key.iter().zip(&probs) {
            acc.add(kept[i].origin(), p)?;
        }
    }
    let map = acc.finish();
    let mask = map.probabilities.binarize(MASK_THRESHOLD);
    report.stage3_seconds = t3.elapsed().as_secs_f64();
    Ok(InferenceOutcome {
        decision,
        map: Some(map),
        mask: Some(mask),
        report,
        scores,
    })
}

/// Mean timings of a group of slides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingGroup {
    pub slides: usize,
    pub mean_stage1_seconds: f64,
    pub mean_stage2_seconds: f64,
    pub mean_stage3_seconds: f64,
    pub mean_total_seconds: f64,
}

impl TimingGroup {
    fn of<'a>(reports: impl Iterator<Item = &'a StageReport>) -> Self {
        let mut g = TimingGroup::default();
        for r in reports {
            g.slides += 1;
            g.mean_stage1_seconds += r.stage1_seconds;
            g.mean_stage2_seconds += r.stage2_seconds;
            g.mean_stage3_seconds += r.stage3_seconds;
            g.mean_total_seconds += r.total_seconds();
        }
        if g.slides > 0 {
            let n = g.slides as f64;
            g.mean_stage1_seconds /= n;
            g.mean_stage2_seconds /= n;
            g.mean_stage3_seconds /= n;
            g.mean_total_seconds /= n;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub per_slide: Vec<StageReport>,
    pub all: TimingGroup,
    pub positive: TimingGroup,
    pub negative: TimingGroup,
}

/// Per-slide and aggregate timings, split by final decision.
pub fn timing_report(reports: &[StageReport]) -> TimingSummary {
    TimingSummary {
        per_slide: reports.to_vec(),
        all: TimingGroup::of(reports.iter()),
        positive: TimingGroup::of(reports.iter().filter(|r| r.decision == PreLabel::Positive)),
        negative: TimingGroup::of(reports.iter().filter(|r| r.decision == PreLabel::Negative)),
    }
}

/// Trained models of all three stages.
pub struct ModelBundle {
    pub stage1: CnnScorer,
    pub stage2: Vec<CnnScorer>,
    pub segmenter: Segmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScorerEntry {
    id: String,
    arch: ClassifierArch,
    input_size: u32,
    file: String,
}

fn save_scorer(s: &CnnScorer, dir: &Path, file: &str) -> Result<ScorerEntry, PipelineError> {
    s.save(&dir.join(file)).map_err(|e| PipelineError::Model(e.to_string()))?;
    Ok(ScorerEntry {
        id: s.id().to_string(),
        arch: s.arch(),
        input_size: s.input_size(),
        file: file.to_string(),
    })
}

fn load_scorer(e: &ScorerEntry, dir: &Path) -> Result<CnnScorer, PipelineError> {
    CnnScorer::load(e.id.clone(), e.arch, e.input_size, &dir.join(&e.file))
        .map_err(|err| PipelineError::Model(format!("{}: {err}", e.file)))
}

fn read_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::ModelMissing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Model(format!("{}: {e}", path.display())))
}

pub const STAGE1_FILE: &str = "stage1";
pub const STAGE2_FILE: &str = "stage2";
pub const SEG_FILE: &str = "seg";

/// Writes `stage1.bin` and its `stage1.json` manifest.
pub fn save_stage1(dir: &Path, scorer: &CnnScorer) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let entry = save_scorer(scorer, dir, STAGE1_FILE)?;
    write_json(&dir.join(format!("{STAGE1_FILE}.json")), &entry)
}

/// Writes `stage2_<k>.bin` per scorer and the `stage2.json` manifest.
pub fn save_stage2(dir: &Path, scorers: &[CnnScorer]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let entries = scorers
        .iter()
        .enumerate()
        .map(|(k, s)| save_scorer(s, dir, &format!("{STAGE2_FILE}_{k}")))
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&dir.join(format!("{STAGE2_FILE}.json")), &entries)
}

pub fn save_segmenter(dir: &Path, seg: &Segmenter) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    seg.save(&dir.join(SEG_FILE)).map_err(|e| PipelineError::Model(e.to_string()))?;
    Ok(())
}

pub fn load_stage1(dir: &Path) -> Result<CnnScorer, PipelineError> {
    load_scorer(&read_manifest(&dir.join(format!("{STAGE1_FILE}.json")))?, dir)
}

pub fn load_stage2(dir: &Path) -> Result<Vec<CnnScorer>, PipelineError> {
    let entries: Vec<ScorerEntry> = read_manifest(&dir.join(format!("{STAGE2_FILE}.json")))?;
    entries.iter().map(|e| load_scorer(e, dir)).collect()
}

pub fn load_segmenter(dir: &Path) -> Result<Segmenter, PipelineError> {
    let stem = dir.join(SEG_FILE);
    if !stem.with_extension("json").exists() {
        return Err(PipelineError::ModelMissing(stem.with_extension("json").display().to_string()));
    }
    Segmenter::load(&stem).map_err(|e| PipelineError::Model(e.to_string()))
}

impl ModelBundle {
    pub fn models(&self) -> Models<'_> {
        Models {
            stage1: &self.stage1,
            stage2: self.stage2.iter().map(|s| s as &dyn PatchScorer).collect(),
            segmenter: Some(&self.segmenter),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        save_stage1(dir, &self.stage1)?;
        save_stage2(dir, &self.stage2)?;
        save_segmenter(dir, &self.segmenter)
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            stage1: load_stage1(dir)?,
            stage2: load_stage2(dir)?,
            segmenter: load_segmenter(dir)?,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_csv_file<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), PipelineError> {
    let file = std::fs::File::create(path)?;
    write_csv(std::io::BufWriter::new(file), rows)?;
    Ok(())
}

/// Files written by [`write_outcomes`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub decisions: PathBuf,
    pub scores: PathBuf,
    pub reports: PathBuf,
    pub masks: Vec<PathBuf>,
}

/// Writes `decisions.csv`, `scores.csv`, `stage_reports.json`, and for every
/// slide that reached Stage 3 `masks/<id>.png` and `probs/<id>.png`.
pub fn write_outcomes(dir: &Path, outcomes: &[InferenceOutcome]) -> Result<OutputFiles, PipelineError> {
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("probs"))?;
    let decisions: Vec<DecisionRow> = outcomes
        .iter()
        .map(|o| DecisionRow {
            slide_id: o.report.slide_id.clone(),
            pre_label: o.decision.pre_label,
            score: o.decision.score,
        })
        .collect();
    let files = OutputFiles {
        decisions: dir.join("decisions.csv"),
        scores: dir.join("scores.csv"),
        reports: dir.join("stage_reports.json"),
        masks: Vec::new(),
    };
    write_csv_file(&files.decisions, &decisions)?;
    let scores: Vec<ScoreRow> = outcomes.iter().flat_map(|o| o.scores.iter().cloned()).collect();
    write_csv_file(&files.scores, &scores)?;
    let reports: Vec<StageReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    write_json(&files.reports, &timing_report(&reports))?;
    let mut files = files;
    for o in outcomes {
        if let (Some(map), Some(mask)) = (&o.map, &o.mask) {
            let path = dir.join("masks").join(format!("{}.png", o.report.slide_id));
            write_mask_png(&path, mask).map_err(|e| PipelineError::Io(e.to_string()))?;
            write_prob_png(&dir.join("probs").join(format!("{}.png", o.report.slide_id)), &map.probabilities)
                .map_err(|e| PipelineError::Io(e.to_string()))?;
            files.masks.push(path);
        }
    }
    Ok(files)
}
