use std::path::Path;

use burn::module::{AutodiffModule, Module};
use burn::optim::{AdamConfig, GradientsParams, Optimizer};
use burn::tensor::{Tensor, TensorData};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adv_loss, adv_loss_mask, build_mirror_discriminator, d_loss, d_loss_mask, full_loss, AdvWeights,
    AdversarialError, DmAdvForm, DomainTag, MaskDiscriminator, MirrorDiscriminator, Side,
};
use crate::backbone::{dice_loss, recorder, BackboneConfig, BackboneError, SegModel, Segmenter};
use crate::nn::{rgb_batch, InferBackend, TrainBackend};
use crate::raster::{resize_mask, resize_rgb, BinaryMask};

/// One training patch with its ground-truth lesion mask and domain.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub domain: DomainTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Segmentation-only epochs.
    pub s0: usize,
    /// Discriminator pre-training epochs with the generator frozen.
    pub d0: usize,
    /// Alternating rounds, each one discriminator epoch then one generator epoch.
    pub alt_epochs: usize,
    /// Patches per domain in every step.
    pub batch_size: usize,
    /// Cap on steps per epoch, 0 for a full pass.
    pub steps_per_epoch: usize,
    pub seg_learning_rate: f64,
    pub disc_learning_rate: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            s0: 4,
            d0: 1,
            alt_epochs: 2,
            batch_size: 4,
            steps_per_epoch: 0,
            seg_learning_rate: 2e-3,
            disc_learning_rate: 1e-3,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), AdversarialError> {
        if self.batch_size == 0 {
            return Err(AdversarialError::InvalidConfig("batch_size must be positive".into()));
        }
        for (name, v) in [("seg_learning_rate", self.seg_learning_rate), ("disc_learning_rate", self.disc_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AdversarialError::InvalidConfig(format!("{name}={v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.s0 + self.d0 + 2 * self.alt_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Segmentation,
    Discriminator,
    Generator,
}

/// Mean losses of one epoch; terms not computed in that phase are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    pub l_seg: Option<f64>,
    pub l_de: Option<f64>,
    pub l_dd: Option<f64>,
    pub l_dm: Option<f64>,
    pub adv_e: Option<f64>,
    pub adv_d: Option<f64>,
    pub adv_m: Option<f64>,
    /// `α_e·adv_e + α_d·adv_d + α_m·adv_m`
    pub l_adv: Option<f64>,
    pub l_full: Option<f64>,
}

impl EpochLosses {
    fn empty(epoch: usize, phase: Phase) -> Self {
        Self {
            epoch,
            phase,
            steps: 0,
            l_seg: None,
            l_de: None,
            l_dd: None,
            l_dm: None,
            adv_e: None,
            adv_d: None,
            adv_m: None,
            l_adv: None,
            l_full: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochLosses>,
    /// False when one domain is empty and the run fell back to segmentation only.
    pub adversarial: bool,
    pub domain_sizes: [usize; 2],
    pub pretrain_epochs: usize,
}

pub const SERIES: [&str; 6] = ["l_seg", "l_de", "l_dd", "l_dm", "l_adv", "l_full"];

impl TrainingReport {
    /// Per-epoch values of one loss, skipping epochs where it was not computed.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|e| match name {
                "l_seg" => e.l_seg,
                "l_de" => e.l_de,
                "l_dd" => e.l_dd,
                "l_dm" => e.l_dm,
                "adv_e" => e.adv_e,
                "adv_d" => e.adv_d,
                "adv_m" => e.adv_m,
                "l_adv" => e.l_adv,
                "l_full" => e.l_full,
                _ => None,
            })
            .collect()
    }

    pub fn all_series(&self) -> Vec<(&'static str, Vec<f64>)> {
        SERIES.iter().map(|&n| (n, self.series(n))).collect()
    }

    /// `L_seg` of the last segmentation-only epoch.
    pub fn l_seg_after_pretraining(&self) -> Option<f64> {
        self.epochs
            .iter()
            .take(self.pretrain_epochs)
            .last()
            .and_then(|e| e.l_seg)
    }

    /// `L_seg` of the last epoch that updated the generator.
    pub fn l_seg_final(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.l_seg)
    }
}

/// The generator and its three discriminators.
#[derive(Debug, Clone)]
pub struct AdversarialNets<B: burn::tensor::backend::Backend> {
    pub config: BackboneConfig,
    pub seg: SegModel<B>,
    pub d_e: MirrorDiscriminator<B>,
    pub d_d: MirrorDiscriminator<B>,
    pub d_m: MaskDiscriminator<B>,
}

impl<B: burn::tensor::backend::Backend> AdversarialNets<B> {
    pub fn new(cfg: &BackboneConfig, seed: u64, device: &B::Device) -> Result<Self, AdversarialError> {
        let seg = SegModel::new(cfg, seed, device)?;
        let s = cfg.input_size as usize;
        let shapes = cfg.tap_shapes(s, s);
        Ok(Self {
            config: cfg.clone(),
            seg,
            d_e: build_mirror_discriminator(Side::Encoder, &shapes.encoder, seed.wrapping_add(1), device)?,
            d_d: build_mirror_discriminator(Side::Decoder, &shapes.decoder, seed.wrapping_add(2), device)?,
            d_m: MaskDiscriminator::new(cfg, seed.wrapping_add(3), device),
        })
    }

    /// Writes `seg.{bin,json}`, `d_e.bin`, `d_d.bin` and `d_m.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), BackboneError> {
        let io = |e: burn::record::RecorderError| BackboneError::Checkpoint(e.to_string());
        std::fs::create_dir_all(dir).map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        self.seg.clone().save_file(dir.join("seg"), &recorder()).map_err(io)?;
        crate::backbone::write_sidecar(
            &dir.join("seg"),
            &crate::backbone::CheckpointMeta::for_backbone("segmentation", &self.config),
        )?;
        self.d_e.clone().save_file(dir.join("d_e"), &recorder()).map_err(io)?;
        self.d_d.clone().save_file(dir.join("d_d"), &recorder()).map_err(io)?;
        self.d_m.clone().save_file(dir.join("d_m"), &recorder()).map_err(io)?;
        Ok(())
    }
}

impl AdversarialNets<TrainBackend> {
    pub fn segmenter(&self) -> Segmenter {
        Segmenter {
            config: self.config.clone(),
            model: self.seg.valid(),
        }
    }
}

impl From<BackboneError> for AdversarialError {
    fn from(e: BackboneError) -> Self {
        AdversarialError::InvalidConfig(e.to_string())
    }
}

struct Prepared {
    images: Vec<RgbImage>,
    masks: Vec<Vec<f32>>,
    size: usize,
}

impl Prepared {
    fn new(data: &[SegSample], size: u32) -> Self {
        Self {
            images: data.iter().map(|s| resize_rgb(&s.image, size, size)).collect(),
            masks: data
                .iter()
                .map(|s| {
                    resize_mask(&s.mask, size, size)
                        .as_slice()
                        .iter()
                        .map(|&v| f32::from(v > 0))
                        .collect()
                })
                .collect(),
            size: size as usize,
        }
    }

    fn images<B: burn::tensor::backend::Backend>(&self, idx: &[usize], device: &B::Device) -> Tensor<B, 4> {
        let refs: Vec<&RgbImage> = idx.iter().map(|&i| &self.images[i]).collect();
        rgb_batch(&refs, self.size as u32, device)
    }

    fn masks<B: burn::tensor::backend::Backend>(&self, idx: &[usize], device: &B::Device) -> Tensor<B, 4> {
        let data: Vec<f32> = idx.iter().flat_map(|&i| self.masks[i].iter().copied()).collect();
        Tensor::from_data(TensorData::new(data, [idx.len(), 1, self.size, self.size]), device)
    }
}

/// One step's indices: domain A first, then domain B.
struct Step {
    a: Vec<usize>,
    b: Vec<usize>,
}

impl Step {
    fn all(&self) -> Vec<usize> {
        self.a.iter().chain(&self.b).copied().collect()
    }
}

const GEN_STREAM: u64 = 0x6765_6e00;
const DISC_STREAM: u64 = 0x6469_7300;

/// Batches of one epoch. Both domains are shuffled from `(seed, stream, counter)`
/// and the smaller one is cycled so every step has `batch` patches of each.
fn epoch_steps(a: &[usize], b: &[usize], batch: usize, cap: usize, seed: u64, stream: u64, counter: usize) -> Vec<Step> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_add(counter as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.shuffle(&mut rng);
    b.shuffle(&mut rng);
    let longest = a.len().max(b.len());
    let mut n = longest.div_ceil(batch);
    if cap > 0 {
        n = n.min(cap);
    }
    let take = |v: &[usize], k: usize| -> Vec<usize> {
        if v.is_empty() {
            return Vec::new();
        }
        (0..batch.min(longest - k * batch))
            .map(|j| v[(k * batch + j) % v.len()])
            .collect()
    };
    (0..n).map(|k| Step { a: take(&a, k), b: take(&b, k) }).collect()
}

fn scalar(t: &Tensor<TrainBackend, 1>) -> f64 {
    t.clone().into_scalar() as f64
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs `s0` segmentation epochs, `d0` discriminator epochs and then
/// `alt_epochs` rounds of one discriminator epoch followed by one generator
/// epoch. Discriminator epochs see the generator in evaluation mode, so
/// neither its weights nor its normalisation statistics change. With one
/// domain empty every generator epoch is segmentation only.
pub fn run_schedule(
    mut nets: AdversarialNets<TrainBackend>,
    data: &[SegSample],
    sched: &TrainSchedule,
    weights: &AdvWeights,
    form: DmAdvForm,
    seed: u64,
) -> Result<(AdversarialNets<TrainBackend>, TrainingReport), AdversarialError> {
    sched.validate()?;
    weights.validate()?;
    if data.is_empty() {
        return Err(AdversarialError::TooFewPatches(0));
    }
    let device = Default::default();
    let prep = Prepared::new(data, nets.config.input_size);
    let a: Vec<usize> = (0..data.len()).filter(|&i| data[i].domain == DomainTag::A).collect();
    let b: Vec<usize> = (0..data.len()).filter(|&i| data[i].domain == DomainTag::B).collect();
    let adversarial = !a.is_empty() && !b.is_empty();
    let bs = sched.batch_size;

    let mut opt_g = AdamConfig::new().init();
    let mut opt_e = AdamConfig::new().init();
    let mut opt_d = AdamConfig::new().init();
    let mut opt_m = AdamConfig::new().init();

    let mut plan = vec![Phase::Segmentation; sched.s0];
    if adversarial {
        plan.extend(std::iter::repeat_n(Phase::Discriminator, sched.d0));
        for _ in 0..sched.alt_epochs {
            plan.push(Phase::Discriminator);
            plan.push(Phase::Generator);
        }
    } else {
        plan.extend(std::iter::repeat_n(Phase::Segmentation, sched.alt_epochs));
    }

    let mut epochs = Vec::with_capacity(plan.len());
    let (mut gen_epoch, mut disc_epoch) = (0usize, 0usize);
    for (epoch, &phase) in plan.iter().enumerate() {
        let mut rec = EpochLosses::empty(epoch, phase);
        match phase {
            Phase::Segmentation | Phase::Generator => {
                let steps = epoch_steps(&a, &b, bs, sched.steps_per_epoch, seed, GEN_STREAM, gen_epoch);
                gen_epoch += 1;
                let (mut seg, mut ae, mut ad, mut am, mut adv, mut full) = (vec![], vec![], vec![], vec![], vec![], vec![]);
                for step in &steps {
                    let idx = step.all();
                    if idx.len() < 2 {
                        continue;
                    }
                    let x = prep.images::<TrainBackend>(&idx, &device);
                    let gt = prep.masks::<TrainBackend>(&idx, &device);
                    let out = nets.seg.forward_with_taps(x)?;
                    let l_seg = dice_loss(out.probs.clone(), gt)?;
                    seg.push(scalar(&l_seg));
                    let loss = if phase == Phase::Generator {
                        let na = step.a.len();
                        let nb = step.b.len();
                        let split = |taps: &[Tensor<TrainBackend, 4>]| -> (Vec<_>, Vec<_>) {
                            (
                                taps.iter().map(|t| t.clone().narrow(0, 0, na)).collect(),
                                taps.iter().map(|t| t.clone().narrow(0, na, nb)).collect(),
                            )
                        };
                        let (ea, eb) = split(&out.encoder_taps);
                        let (da, db) = split(&out.decoder_taps);
                        let adv_e = adv_loss(&nets.d_e, &ea, &eb);
                        let adv_d = adv_loss(&nets.d_d, &da, &db);
                        let adv_m = adv_loss_mask(&nets.d_m, out.probs, form);
                        let (ve, vd, vm) = (scalar(&adv_e), scalar(&adv_d), scalar(&adv_m));
                        ae.push(ve);
                        ad.push(vd);
                        am.push(vm);
                        adv.push(full_loss(0.0, ve, vd, vm, weights));
                        full_loss(l_seg, adv_e, adv_d, adv_m, weights)
                    } else {
                        l_seg
                    };
                    full.push(scalar(&loss));
                    let grads = GradientsParams::from_grads(loss.backward(), &nets.seg);
                    nets.seg = opt_g.step(sched.seg_learning_rate, nets.seg, grads);
                }
                rec.steps = seg.len();
                rec.l_seg = mean(&seg);
                rec.adv_e = mean(&ae);
                rec.adv_d = mean(&ad);
                rec.adv_m = mean(&am);
                rec.l_adv = mean(&adv);
                rec.l_full = mean(&full);
            }
            Phase::Discriminator => {
                let steps = epoch_steps(&a, &b, bs, sched.steps_per_epoch, seed, DISC_STREAM, disc_epoch);
                disc_epoch += 1;
                let frozen = nets.seg.valid();
                let (mut le, mut ld, mut lm) = (vec![], vec![], vec![]);
                for step in &steps {
                    let idx = step.all();
                    let na = step.a.len();
                    let nb = step.b.len();
                    let out = frozen.forward_with_taps(prep.images::<InferBackend>(&idx, &device))?;
                    let lift = |t: &Tensor<InferBackend, 4>, start: usize, len: usize| {
                        Tensor::<TrainBackend, 4>::from_inner(t.clone().narrow(0, start, len))
                    };
                    let ea: Vec<_> = out.encoder_taps.iter().map(|t| lift(t, 0, na)).collect();
                    let eb: Vec<_> = out.encoder_taps.iter().map(|t| lift(t, na, nb)).collect();
                    let da: Vec<_> = out.decoder_taps.iter().map(|t| lift(t, 0, na)).collect();
                    let db: Vec<_> = out.decoder_taps.iter().map(|t| lift(t, na, nb)).collect();

                    let l = d_loss(&nets.d_e, &eb, &ea);
                    le.push(scalar(&l));
                    let g = GradientsParams::from_grads(l.backward(), &nets.d_e);
                    nets.d_e = opt_e.step(sched.disc_learning_rate, nets.d_e, g);

                    let l = d_loss(&nets.d_d, &db, &da);
                    ld.push(scalar(&l));
                    let g = GradientsParams::from_grads(l.backward(), &nets.d_d);
                    nets.d_d = opt_d.step(sched.disc_learning_rate, nets.d_d, g);

                    let gt = prep.masks::<TrainBackend>(&idx, &device);
                    let pred = Tensor::<TrainBackend, 4>::from_inner(out.probs);
                    let l = d_loss_mask(&nets.d_m, gt, pred)?;
                    lm.push(scalar(&l));
                    let g = GradientsParams::from_grads(l.backward(), &nets.d_m);
                    nets.d_m = opt_m.step(sched.disc_learning_rate, nets.d_m, g);
                }
                rec.steps = le.len();
                rec.l_de = mean(&le);
                rec.l_dd = mean(&ld);
                rec.l_dm = mean(&lm);
            }
        }
        epochs.push(rec);
    }
    Ok((
        nets,
        TrainingReport {
            epochs,
            adversarial,
            domain_sizes: [a.len(), b.len()],
            pretrain_epochs: sched.s0,
        },
    ))
}
