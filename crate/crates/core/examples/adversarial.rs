//! Split lesion patches into two stain domains and run a short adversarial
//! training schedule, printing every loss series.

use wsi_cascade::adversarial::{DomainTag, TrainSchedule};
use wsi_cascade::pipeline::synth::{generate_cohort, CohortSpec};
use wsi_cascade::pipeline::{collect_patches, segmentation_pool, segmentation_samples, train_segmentation, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::desk();
    cfg.train_patches = 48;
    cfg.schedule = TrainSchedule {
        s0: 2,
        d0: 1,
        alt_epochs: 1,
        ..TrainSchedule::default()
    };
    let cohort = CohortSpec {
        n_slides: 6,
        min_size: 512,
        max_size: 768,
        positive_fraction: 1.0,
        a_fraction: 0.5,
        ..CohortSpec::default()
    };
    let slides = generate_cohort(&cohort, "adv", 3)?;
    let patches = collect_patches(&slides, &cfg)?;
    let samples = segmentation_samples(&segmentation_pool(&patches, &cfg, 1))?;
    let n_a = samples.iter().filter(|s| s.domain == DomainTag::A).count();
    println!("{} lesion patches: {} in domain A, {} in domain B", samples.len(), n_a, samples.len() - n_a);

    let (_, report) = train_segmentation(&cfg, &samples, 1)?;
    println!("epoch  phase           l_seg    l_de     l_dd     l_dm     l_adv    l_full");
    let f = |v: Option<f64>| v.map_or("       -".to_string(), |x| format!("{x:8.4}"));
    for e in &report.epochs {
        println!(
            "{:>5}  {:<14}{} {} {} {} {} {}",
            e.epoch,
            format!("{:?}", e.phase),
            f(e.l_seg),
            f(e.l_de),
            f(e.l_dd),
            f(e.l_dm),
            f(e.l_adv),
            f(e.l_full)
        );
    }
    Ok(())
}
