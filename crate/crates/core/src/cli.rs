//! Command-line front end. Every subcommand writes the effective
//! configuration next to its outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adversarial::DmAdvForm;
use crate::backbone::Preset;
use crate::classification::{DecisionRow, PreLabel};
use crate::metrics::{accuracy, auc, confusion, dice, precision, recall, roc_points, specificity};
use crate::pipeline::synth::{cohort_specs, generate_synthetic_slide, CohortSpec};
use crate::pipeline::{
    collect_patches, load_segmenter, load_stage1, load_stage2, read_dataset, run_inference, save_segmenter,
    save_stage1, save_stage2, segmentation_pool, segmentation_samples, stage1_dataset, stage2_dataset, timing_report, train_segmentation,
    train_stage1, train_stage2, write_csv_file, write_dataset, write_json, write_outcomes, Models, PipelineConfig,
    PipelineError, TimingSummary,
};
use crate::raster::{read_mask_png, Plane};

#[derive(Debug, Parser)]
#[command(name = "wsi-cascade", version, about = "Three-stage whole-slide malignancy detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated slide cohort.
    Synth(SynthArgs),
    /// Train the Stage-1 triage scorer.
    TrainStage1(DataArgs),
    /// Train the Stage-2 scorer ensemble.
    TrainStage2(DataArgs),
    /// Train the segmentation network with the adversarial schedule.
    TrainSeg(DataArgs),
    /// Run the cascade on every slide of a dataset.
    Infer(InferArgs),
    /// Score decisions and masks against annotations.
    Eval(EvalArgs),
    /// Summarise inference timings by decision.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// 256-pixel patches, tiny backbone at 64².
    Desk,
    /// Full-size defaults: 1536-pixel patches, reference backbone at 512².
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Small,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DmFormArg {
    AsPrinted,
    Conventional,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base configuration used when no file is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// RoI colour-std threshold R.
    #[arg(long, global = true)]
    pub roi_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Pre-prediction ratio threshold T.
    #[arg(long = "t", global = true)]
    pub t: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub alpha_e: Option<f64>,
    #[arg(long, global = true)]
    pub alpha_d: Option<f64>,
    #[arg(long, global = true)]
    pub alpha_m: Option<f64>,
    /// Hard-label area threshold S.
    #[arg(long, global = true)]
    pub hard_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub key_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub patch_size: Option<u32>,
    #[arg(long, global = true)]
    pub stride: Option<u32>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, global = true)]
    pub input_size: Option<u32>,
    #[arg(long, global = true)]
    pub s0: Option<usize>,
    #[arg(long, global = true)]
    pub d0: Option<usize>,
    #[arg(long, global = true)]
    pub alt_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub train_patches: Option<usize>,
    /// Classifier epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub dm_adv_form: Option<DmFormArg>,
    /// Disable online augmentation of classifier patches.
    #[arg(long, global = true)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub n_slides: usize,
    #[arg(long, default_value_t = 512)]
    pub min_size: u32,
    #[arg(long, default_value_t = 2048)]
    pub max_size: u32,
    #[arg(long, default_value_t = 0.5)]
    pub positive_fraction: f64,
    #[arg(long, default_value = "slide")]
    pub prefix: String,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the trained models.
    #[arg(long)]
    pub models: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Output directory of `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Annotated dataset directory.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Output directory of `infer`.
    #[arg(long)]
    pub pred: PathBuf,
}

impl CommonArgs {
    /// Base config (file or profile) with flag overrides applied and validated.
    pub fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match (&self.config, self.profile.unwrap_or(Profile::Desk)) {
            (Some(path), _) => PipelineConfig::from_file(path)?,
            (None, Profile::Desk) => PipelineConfig::desk(),
            (None, Profile::Full) => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            roi_threshold => roi_threshold,
            tau => tau,
            t => t,
            epsilon => epsilon,
            alpha_e => alpha_e,
            alpha_d => alpha_d,
            alpha_m => alpha_m,
            hard_threshold => hard_threshold,
            key_threshold => key_threshold,
            patch_size => tile.patch_size,
            stride => tile.stride,
            input_size => backbone.input_size,
            s0 => schedule.s0,
            d0 => schedule.d0,
            alt_epochs => schedule.alt_epochs,
            train_patches => train_patches,
            epochs => classifier.epochs,
        );
        if let Some(p) = self.preset {
            let preset = match p {
                PresetArg::Tiny => Preset::Tiny,
                PresetArg::Small => Preset::Small,
                PresetArg::Reference => Preset::Reference,
            };
            cfg.backbone.preset = preset;
        }
        if let Some(f) = self.dm_adv_form {
            cfg.dm_adv_form = match f {
                DmFormArg::AsPrinted => DmAdvForm::AsPrinted,
                DmFormArg::Conventional => DmAdvForm::Conventional,
            };
        }
        if self.no_augment {
            cfg.augment_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_effective_config(dir: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("effective_config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Slide-level and mask-level scores of one inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slides: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    /// Mean stitched-mask dice over annotated positive slides.
    pub mean_dice_positive: Option<f64>,
    pub per_slide_dice: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
struct RocRow {
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

fn read_decisions(path: &Path) -> Result<Vec<DecisionRow>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Compares an `infer` output directory with an annotated dataset.
pub fn evaluate(pred: &Path, data: &Path) -> Result<(EvalReport, Vec<(f64, f64, f64)>), PipelineError> {
    let decisions = read_decisions(&pred.join("decisions.csv"))?;
    let slides = read_dataset(data, true)?;
    let mut scored = Vec::new();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut per_slide_dice = Vec::new();
    for d in &decisions {
        let slide = slides
            .iter()
            .find(|s| s.id == d.slide_id)
            .ok_or_else(|| PipelineError::Data(format!("slide {} not in dataset", d.slide_id)))?;
        let label = u8::from(slide.is_positive());
        scored.push((d.score, label));
        preds.push(u8::from(d.pre_label == PreLabel::Positive));
        labels.push(label);
        if let (true, Some(gt)) = (slide.is_positive(), &slide.ground_truth) {
            let path = pred.join("masks").join(format!("{}.png", d.slide_id));
            let mask = if path.exists() {
                read_mask_png(&path).map_err(|e| PipelineError::Data(e.to_string()))?
            } else {
                Plane::filled(gt.width(), gt.height(), 0u8)
            };
            let v = dice(&mask, gt).map_err(|e| PipelineError::Data(e.to_string()))?;
            per_slide_dice.push((d.slide_id.clone(), v));
        }
    }
    if decisions.is_empty() {
        return Err(PipelineError::Data("no decisions to evaluate".into()));
    }
    let c = confusion(&preds, &labels).map_err(|e| PipelineError::Data(e.to_string()))?;
    let roc = roc_points(&scored).unwrap_or_default();
    let report = EvalReport {
        slides: decisions.len(),
        positives: labels.iter().filter(|&&l| l == 1).count(),
        auc: auc(&scored).ok(),
        accuracy: accuracy(&c).map_err(|e| PipelineError::Data(e.to_string()))?,
        recall: recall(&c).ok(),
        precision: precision(&c).ok(),
        specificity: specificity(&c).ok(),
        mean_dice_positive: (!per_slide_dice.is_empty())
            .then(|| per_slide_dice.iter().map(|(_, v)| v).sum::<f64>() / per_slide_dice.len() as f64),
        per_slide_dice,
    };
    Ok((report, roc))
}

fn load_models(dir: &Path) -> Result<crate::pipeline::ModelBundle, PipelineError> {
    Ok(crate::pipeline::ModelBundle {
        stage1: load_stage1(dir)?,
        stage2: load_stage2(dir)?,
        segmenter: load_segmenter(dir)?,
    })
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<(), PipelineError> {
    let out = &cli.common.out_dir;
    match &cli.command {
        Command::Synth(a) => {
            let cfg = cli.common.resolve()?;
            let cohort = CohortSpec {
                n_slides: a.n_slides,
                min_size: a.min_size,
                max_size: a.max_size,
                positive_fraction: a.positive_fraction,
                ..CohortSpec::default()
            };
            let specs = cohort_specs(&cohort, cfg.seed)?;
            let slides = specs
                .iter()
                .enumerate()
                .map(|(i, s)| generate_synthetic_slide(&format!("{}{i:03}", a.prefix), s))
                .collect::<Result<Vec<_>, _>>()?;
            let stains: Vec<String> = specs.iter().map(|s| format!("{:?}", s.stain_domain)).collect();
            let rows = write_dataset(out, &slides, &stains)?;
            write_json(&out.join("cohort.json"), &specs)?;
            write_effective_config(out, &cfg)?;
            println!(
                "wrote {} slides ({} positive) to {}",
                rows.len(),
                rows.iter().filter(|r| r.positive).count(),
                out.display()
            );
        }
        Command::TrainStage1(a) => {
            let cfg = cli.common.resolve()?;
            let patches = collect_patches(&read_dataset(&a.data, true)?, &cfg)?;
            let data = stage1_dataset(&patches, &cfg, cfg.seed)?;
            let (scorer, report) = train_stage1(&cfg, &data, cfg.seed)?;
            save_stage1(out, &scorer)?;
            write_json(&out.join("stage1_report.json"), &report)?;
            write_effective_config(out, &cfg)?;
            println!("stage-1 trained on {} patches, final loss {:.4}", data.len(), report.epoch_losses.last().unwrap_or(&f64::NAN));
        }
        Command::TrainStage2(a) => {
            let cfg = cli.common.resolve()?;
            let patches = collect_patches(&read_dataset(&a.data, true)?, &cfg)?;
            let data = stage2_dataset(&patches, &cfg, cfg.seed.wrapping_add(1))?;
            let (scorers, reports): (Vec<_>, Vec<_>) = train_stage2(&cfg, &data, cfg.seed.wrapping_add(10))?.into_iter().unzip();
            save_stage2(out, &scorers)?;
            write_json(&out.join("stage2_report.json"), &reports)?;
            write_effective_config(out, &cfg)?;
            println!("stage-2 ensemble of {} trained on {} patches", scorers.len(), data.len());
        }
        Command::TrainSeg(a) => {
            let cfg = cli.common.resolve()?;
            let patches = collect_patches(&read_dataset(&a.data, true)?, &cfg)?;
            let positives = segmentation_pool(&patches, &cfg, cfg.seed.wrapping_add(2));
            let samples = segmentation_samples(&positives)?;
            let (nets, report) = train_segmentation(&cfg, &samples, cfg.seed.wrapping_add(20))?;
            save_segmenter(out, &nets.segmenter())?;
            nets.save(&out.join("adversarial")).map_err(|e| PipelineError::Model(e.to_string()))?;
            write_json(&out.join("seg_report.json"), &report)?;
            write_csv_file(&out.join("seg_losses.csv"), &report.epochs)?;
            write_effective_config(out, &cfg)?;
            println!(
                "segmentation trained on {} patches (domains {:?}), final L_seg {:.4}",
                samples.len(),
                report.domain_sizes,
                report.l_seg_final().unwrap_or(f64::NAN)
            );
        }
        Command::Infer(a) => {
            let cfg = cli.common.resolve()?;
            let bundle = load_models(&a.models)?;
            let models: Models<'_> = bundle.models();
            let slides = read_dataset(&a.data, false)?;
            let outcomes = slides
                .iter()
                .map(|s| run_inference(s, &cfg, &models))
                .collect::<Result<Vec<_>, _>>()?;
            let files = write_outcomes(out, &outcomes)?;
            write_effective_config(out, &cfg)?;
            for o in &outcomes {
                println!(
                    "{}\t{}\t{:.4}\tstage {}\t{} key patches",
                    o.report.slide_id, o.decision.pre_label, o.decision.score, o.report.stage_reached, o.report.n_key
                );
            }
            println!("decisions: {}", files.decisions.display());
        }
        Command::Eval(a) => {
            let (report, roc) = evaluate(&a.pred, &a.data)?;
            std::fs::create_dir_all(out)?;
            write_json(&out.join("metrics.json"), &report)?;
            let rows: Vec<RocRow> = roc.into_iter().map(|(threshold, fpr, tpr)| RocRow { threshold, fpr, tpr }).collect();
            write_csv_file(&out.join("roc.csv"), &rows)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        }
        Command::Report(a) => {
            let path = a.pred.join("stage_reports.json");
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
            let summary: TimingSummary = serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
            let summary = timing_report(&summary.per_slide);
            std::fs::create_dir_all(out)?;
            write_json(&out.join("timing_summary.json"), &summary)?;
            println!("slide\tdecision\tstage\ttotal_s\tstage1_s\tstage2_s\tstage3_s");
            for r in &summary.per_slide {
                println!(
                    "{}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
                    r.slide_id,
                    r.decision,
                    r.stage_reached,
                    r.total_seconds(),
                    r.stage1_seconds,
                    r.stage2_seconds,
                    r.stage3_seconds
                );
            }
            for (name, g) in [("positive", &summary.positive), ("negative", &summary.negative), ("all", &summary.all)] {
                println!("{name}: {} slides, mean total {:.3}s", g.slides, g.mean_total_seconds);
            }
        }
    }
    Ok(())
}
