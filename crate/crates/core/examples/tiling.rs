//! Cut a synthetic slide into overlapping patches, drop background, and stitch
//! per-patch rasters back into a slide-sized map.

use wsi_cascade::pipeline::synth::{generate_synthetic_slide, StainDomain, SyntheticSlideSpec};
use wsi_cascade::raster::ProbMap;
use wsi_cascade::tiling::{extract_grid, malignant_ratio, pixel_std, roi_keep, stitch, TileSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSlideSpec {
        height: 640,
        width: 896,
        n_lesions: 2,
        lesion_radius_range: (60.0, 110.0),
        stain_domain: StainDomain::ALike,
        texture_noise: 0.3,
        seed: 11,
    };
    let slide = generate_synthetic_slide("demo", &spec)?;
    let tile = TileSpec::new(256, 128)?;
    let patches = extract_grid(&slide, &tile)?;
    let kept: Vec<_> = patches.iter().filter(|p| roi_keep(p, 30.0)).collect();
    println!(
        "{}x{} slide -> {} patches, {} kept as tissue",
        slide.width(),
        slide.height(),
        patches.len(),
        kept.len()
    );
    for p in kept.iter().take(6) {
        let ratio = p.mask_crop.as_ref().map(malignant_ratio).unwrap_or(0.0);
        println!(
            "  ({:>3},{:>3}) std {:>5.1} lesion {:>5.1}%",
            p.origin_x,
            p.origin_y,
            pixel_std(&p.pixels),
            100.0 * ratio
        );
    }

    // stitch each kept patch's own lesion crop back together
    let rasters: Vec<((u32, u32), ProbMap)> = kept
        .iter()
        .map(|p| {
            let m = p.mask_crop.as_ref().expect("annotated slide");
            (p.origin(), m.map(f32::from))
        })
        .collect();
    let refs: Vec<((u32, u32), &ProbMap)> = rasters.iter().map(|(o, r)| (*o, r)).collect();
    let map = stitch(&refs, slide.height(), slide.width())?;
    let recovered = map.probabilities.binarize(0.5);
    let truth = slide.ground_truth.as_ref().expect("annotated slide");
    println!(
        "stitched lesion pixels {} of {} annotated",
        recovered.count_ones(),
        truth.count_ones()
    );
    Ok(())
}
