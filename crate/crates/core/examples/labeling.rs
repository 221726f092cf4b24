//! Hard and area-smoothed labels for slide patches, balanced sampling, and a
//! seeded augmentation that keeps pixels and masks aligned.

use wsi_cascade::labeling::{
    augment_patch, max_malignant_area, sample_training_patches, smooth_label, write_labeled_manifest, AugmentConfig,
    LabeledManifestRow, LabeledPatch, LabelingConfig,
};
use wsi_cascade::pipeline::synth::{generate_synthetic_slide, StainDomain, SyntheticSlideSpec};
use wsi_cascade::tiling::{extract_grid, roi_keep, TileSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tile = TileSpec::new(128, 64)?;
    let mut patches = Vec::new();
    for (id, n_lesions, stain) in [("pos", 2, StainDomain::ALike), ("neg", 0, StainDomain::BLike)] {
        let spec = SyntheticSlideSpec {
            height: 512,
            width: 512,
            n_lesions,
            lesion_radius_range: (50.0, 90.0),
            stain_domain: stain,
            texture_noise: 0.3,
            seed: 5,
        };
        let slide = generate_synthetic_slide(id, &spec)?;
        for p in extract_grid(&slide, &tile)? {
            if roi_keep(&p, 30.0) {
                patches.push(LabeledPatch::new(p, slide.is_positive(), 0.05));
            }
        }
    }

    let cfg = LabelingConfig {
        hard_threshold: 0.05,
        epsilon: 0.1,
        a1_max: max_malignant_area(&patches),
    };
    let picked = sample_training_patches(&patches, 16, 3)?;
    let rows: Vec<LabeledManifestRow> = picked
        .iter()
        .map(|&i| {
            let p = &patches[i];
            Ok(LabeledManifestRow::new(p, &smooth_label(p.hard_label, p.a1, &cfg)?))
        })
        .collect::<Result<_, wsi_cascade::labeling::LabelError>>()?;
    println!("{} tissue patches, A1max = {} px; balanced sample:", patches.len(), cfg.a1_max);
    write_labeled_manifest(std::io::stdout(), &rows)?;

    let first = &patches[picked[0]].patch;
    let aug = augment_patch(first, 42, &AugmentConfig::default());
    let moved = first
        .pixels
        .pixels()
        .zip(aug.pixels.pixels())
        .filter(|(a, b)| a != b)
        .count();
    println!(
        "augmentation (seed 42) changed {moved} of {} pixels; mask area {} -> {}",
        first.pixels.len() / 3,
        first.mask_crop.as_ref().map_or(0, |m| m.count_ones()),
        aug.mask_crop.as_ref().map_or(0, |m| m.count_ones())
    );
    Ok(())
}
