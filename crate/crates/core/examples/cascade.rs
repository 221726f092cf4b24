//! End to end: generate a small annotated cohort, train the three stages,
//! run the cascade on unseen slides and score the result.
//!
//! Uses a reduced cohort and epoch count so it finishes in a couple of
//! minutes; the `wsi-cascade` binary runs the same steps at full desk size.

use wsi_cascade::metrics::{auc, dice};
use wsi_cascade::pipeline::synth::{generate_cohort, CohortSpec};
use wsi_cascade::pipeline::{run_inference, timing_report, train_cascade, write_outcomes, PipelineConfig};
use wsi_cascade::raster::Plane;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::desk();
    cfg.classifier.epochs = 8;
    cfg.train_patches = 160;
    let train = generate_cohort(
        &CohortSpec {
            n_slides: 10,
            min_size: 512,
            max_size: 1024,
            ..CohortSpec::default()
        },
        "train",
        1,
    )?;
    let test = generate_cohort(
        &CohortSpec {
            n_slides: 4,
            min_size: 512,
            max_size: 1024,
            ..CohortSpec::default()
        },
        "test",
        2,
    )?;

    let (bundle, report) = train_cascade(&cfg, &train, 1)?;
    println!(
        "trained on {} tissue patches in {:.0}s / {:.0}s / {:.0}s (stage 1 / 2 / segmentation)",
        report.n_patches, report.stage_seconds[0], report.stage_seconds[1], report.stage_seconds[2]
    );

    let models = bundle.models();
    let mut outcomes = Vec::new();
    let mut scored = Vec::new();
    for slide in &test {
        let o = run_inference(slide, &cfg, &models)?;
        let truth = if slide.is_positive() { "positive" } else { "negative" };
        let mut line = format!(
            "{}: {} (truth {truth}), score {:.3}, stage {}",
            slide.id, o.decision.pre_label, o.decision.score, o.report.stage_reached
        );
        if let Some(gt) = slide.ground_truth.as_ref().filter(|_| slide.is_positive()) {
            let mask = o.mask.clone().unwrap_or_else(|| Plane::filled(gt.width(), gt.height(), 0));
            line += &format!(", dice {:.3}", dice(&mask, gt)?);
        }
        println!("{line}");
        scored.push((o.decision.score, u8::from(slide.is_positive())));
        outcomes.push(o);
    }
    println!("slide AUC {:.3}", auc(&scored)?);

    let summary = timing_report(&outcomes.iter().map(|o| o.report.clone()).collect::<Vec<_>>());
    println!(
        "mean time: negative {:.3}s, positive {:.3}s",
        summary.negative.mean_total_seconds, summary.positive.mean_total_seconds
    );
    let out = std::env::temp_dir().join("wsi-cascade-example");
    let files = write_outcomes(&out, &outcomes)?;
    println!("decisions written to {}", files.decisions.display());
    Ok(())
}
