//! Build segmentation backbones with different component switches and print
//! the shapes of every feature tap.

use burn::tensor::{Distribution, Tensor};
use wsi_cascade::backbone::{dice_loss, BackboneConfig, Preset, SegModel};
use wsi_cascade::nn::InferBackend;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dev = Default::default();
    let configs = [
        ("tiny, all components", BackboneConfig::tiny(64)),
        ("tiny, plain", BackboneConfig::plain(Preset::Tiny, 64)),
        ("small, all components", BackboneConfig { preset: Preset::Small, ..BackboneConfig::tiny(64) }),
    ];
    for (name, cfg) in configs {
        let model = SegModel::<InferBackend>::new(&cfg, 0, &dev)?;
        let x = Tensor::<InferBackend, 4>::random([2, 3, 64, 64], Distribution::Uniform(0.0, 1.0), &dev);
        let out = model.forward_with_taps(x)?;
        println!("{name}: probs {:?}, center channels {}", out.probs.dims(), cfg.center_channels());
        for (i, t) in out.encoder_taps.iter().enumerate() {
            print!("  E{} {:?}", i + 1, &t.dims()[1..]);
        }
        println!();
        for (j, t) in out.decoder_taps.iter().enumerate() {
            print!("  D{} {:?}", 5 - j, &t.dims()[1..]);
        }
        println!();
        let target = Tensor::<InferBackend, 4>::random([2, 1, 64, 64], Distribution::Bernoulli(0.3), &dev);
        let loss = dice_loss(out.probs, target)?.into_scalar();
        println!("  dice loss against random target {loss:.4}");
    }
    Ok(())
}
