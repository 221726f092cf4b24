use burn::module::Module;
use burn::optim::GradientsParams;
use burn::tensor::Tensor;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsi_cascade::adversarial::*;
use wsi_cascade::backbone::BackboneConfig;
use wsi_cascade::nn::{rgb_batch, to_vec_f32, TrainBackend};
use wsi_cascade::raster::{BinaryMask, Plane};

fn stained_patch(domain: DomainTag, size: u32, seed: u64) -> (RgbImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, lesion) = match domain {
        DomainTag::A => ([236.0, 170.0, 200.0], [170.0, 70.0, 130.0]),
        DomainTag::B => ([170.0, 140.0, 215.0], [80.0, 40.0, 140.0]),
    };
    let cx = rng.random_range(0.3..0.7) * size as f64;
    let cy = rng.random_range(0.3..0.7) * size as f64;
    let r = rng.random_range(0.15..0.3) * size as f64;
    let mut img = RgbImage::new(size, size);
    let mut mask = Plane::filled(size, size, 0u8);
    for y in 0..size {
        for x in 0..size {
            let inside = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r;
            let c = if inside { lesion } else { base };
            let noise: f64 = rng.random_range(-12.0..12.0);
            img.put_pixel(x, y, Rgb(c.map(|v: f64| (v + noise).clamp(0.0, 255.0) as u8)));
            if inside {
                mask.set(x, y, 1);
            }
        }
    }
    (img, mask)
}

fn dataset(n_a: usize, n_b: usize, size: u32) -> Vec<SegSample> {
    (0..n_a + n_b)
        .map(|i| {
            let domain = if i < n_a { DomainTag::A } else { DomainTag::B };
            let (image, mask) = stained_patch(domain, size, i as u64);
            SegSample { image, mask, domain }
        })
        .collect()
}

fn params(seg: &impl Module<TrainBackend>) -> Vec<f32> {
    struct Collect(Vec<f32>);
    impl burn::module::ModuleVisitor<TrainBackend> for Collect {
        fn visit_float<const D: usize>(&mut self, _: burn::module::ParamId, t: &Tensor<TrainBackend, D>) {
            self.0.extend(to_vec_f32(t.clone()));
        }
    }
    let mut c = Collect(Vec::new());
    seg.visit(&mut c);
    c.0
}

#[test]
fn discriminator_loss_leaves_generator_without_gradient() {
    let cfg = BackboneConfig::tiny(32);
    let dev = Default::default();
    let nets = AdversarialNets::<TrainBackend>::new(&cfg, 3, &dev).unwrap();
    let data = dataset(2, 2, 32);
    let refs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let out = nets.seg.forward_with_taps(rgb_batch(&refs, 32, &dev)).unwrap();
    let split = |taps: &[Tensor<TrainBackend, 4>], s: usize| -> Vec<_> {
        taps.iter().map(|t| t.clone().narrow(0, s, 2)).collect()
    };
    let (ea, eb) = (split(&out.encoder_taps, 0), split(&out.encoder_taps, 2));

    let loss = d_loss(&nets.d_e, &eb, &ea);
    let grads = loss.backward();
    assert!(GradientsParams::from_grads(grads, &nets.seg).is_empty());

    let loss = adv_loss(&nets.d_e, &ea, &eb);
    let mut grads = loss.backward();
    assert!(GradientsParams::from_module(&mut grads, &nets.d_e).is_empty());
    assert!(!GradientsParams::from_module(&mut grads, &nets.seg).is_empty());
}

#[test]
fn zero_weights_reproduce_segmentation_only_updates() {
    let cfg = BackboneConfig::tiny(32);
    let dev = Default::default();
    let data = dataset(4, 4, 32);
    let mut sched = TrainSchedule {
        s0: 1,
        d0: 1,
        alt_epochs: 1,
        batch_size: 2,
        steps_per_epoch: 2,
        ..TrainSchedule::default()
    };
    let nets = AdversarialNets::<TrainBackend>::new(&cfg, 11, &dev).unwrap();
    let (adv, report) = run_schedule(nets, &data, &sched, &AdvWeights::ZERO, DmAdvForm::AsPrinted, 5).unwrap();
    assert!(report.adversarial);
    assert!(report.series("adv_e").iter().all(|v| v.is_finite()));

    sched.s0 = 2;
    sched.d0 = 0;
    sched.alt_epochs = 0;
    let nets = AdversarialNets::<TrainBackend>::new(&cfg, 11, &dev).unwrap();
    let (plain, _) = run_schedule(nets, &data, &sched, &AdvWeights::ZERO, DmAdvForm::AsPrinted, 5).unwrap();
    assert_eq!(params(&adv.seg), params(&plain.seg));
}

#[test]
fn split_recovers_stain_domains() {
    let data = dataset(30, 20, 32);
    let refs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let tags = domain_split(&refs).unwrap();
    let agree = tags.iter().zip(&data).filter(|(t, s)| **t == s.domain).count();
    assert!(agree as f64 >= 0.95 * data.len() as f64, "{agree}/50");

    let mut shuffled: Vec<usize> = (0..data.len()).collect();
    shuffled.reverse();
    let refs2: Vec<&RgbImage> = shuffled.iter().map(|&i| &data[i].image).collect();
    let tags2 = domain_split(&refs2).unwrap();
    for (k, &i) in shuffled.iter().enumerate() {
        assert_eq!(tags2[k], tags[i]);
    }
}

#[test]
fn full_schedule_reports_finite_series() {
    let cfg = BackboneConfig::tiny(64);
    let dev = Default::default();
    let data = dataset(8, 8, 64);
    let sched = TrainSchedule {
        s0: 2,
        d0: 1,
        alt_epochs: 1,
        batch_size: 4,
        ..TrainSchedule::default()
    };
    let nets = AdversarialNets::<TrainBackend>::new(&cfg, 1, &dev).unwrap();
    let (_, report) = run_schedule(nets, &data, &sched, &AdvWeights::default(), DmAdvForm::AsPrinted, 1).unwrap();
    for (name, s) in report.all_series() {
        assert!(!s.is_empty(), "{name}");
        assert!(s.iter().all(|v| v.is_finite()), "{name}: {s:?}");
    }
    assert_eq!(report.epochs.len(), sched.total_epochs());
}

#[test]
fn single_domain_falls_back_to_segmentation() {
    let cfg = BackboneConfig::tiny(32);
    let dev = Default::default();
    let data = dataset(4, 0, 32);
    let sched = TrainSchedule {
        s0: 1,
        d0: 1,
        alt_epochs: 1,
        batch_size: 2,
        ..TrainSchedule::default()
    };
    let nets = AdversarialNets::<TrainBackend>::new(&cfg, 1, &dev).unwrap();
    let (_, report) = run_schedule(nets, &data, &sched, &AdvWeights::default(), DmAdvForm::AsPrinted, 1).unwrap();
    assert!(!report.adversarial);
    assert!(report.series("l_de").is_empty());
    assert_eq!(report.series("l_seg").len(), 2);
}
