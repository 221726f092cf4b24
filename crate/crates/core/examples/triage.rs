//! Slide-level triage from patch scores, then Stage-2 ensembling and key-patch
//! selection. Scores come from fixed lists so the arithmetic is easy to follow.

use wsi_cascade::classification::{ensemble_average, select_key_patches, wsi_score, PatchScore, Stage1Config};

fn scores(ps: &[f64]) -> Vec<PatchScore> {
    ps.iter().enumerate().map(|(index, &p)| PatchScore { index, p }).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = Stage1Config::default();
    let slides = [
        ("benign", vec![0.02, 0.04, 0.01, 0.08, 0.03, 0.05, 0.02, 0.06, 0.04, 0.01]),
        ("borderline", vec![0.9, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05]),
        ("suspicious", vec![0.95, 0.7, 0.4, 0.08, 0.05, 0.2, 0.03, 0.6, 0.02, 0.09]),
    ];
    println!("tau = {}, T = {}", cfg.tau, cfg.t);
    for (name, ps) in &slides {
        let d = wsi_score(&scores(ps), &cfg)?;
        println!(
            "{name:>10}: {} of {} patches >= tau -> {} (score {:.3})",
            d.n_positive_patches,
            ps.len(),
            d.pre_label,
            d.score
        );
    }

    let per_model = vec![
        scores(&[0.9, 0.2, 0.6, 0.1]),
        scores(&[0.8, 0.4, 0.5, 0.3]),
        scores(&[0.7, 0.3, 0.3, 0.2]),
    ];
    let mean = ensemble_average(&per_model)?;
    let key = select_key_patches(&mean, 0.5);
    for s in &mean {
        println!("patch {} ensemble {:.3}{}", s.index, s.p, if key.contains(&s.index) { "  key" } else { "" });
    }
    Ok(())
}
