//! Domain-adversarial training: mirror discriminators over encoder and decoder
//! taps, a mask discriminator, their BCE losses, the combined objective, the
//! appearance-based domain split and the alternating schedule.

pub mod schedule;

use std::ops::{Add, Mul};

use burn::module::Module;
use burn::nn::conv::Conv2d;
use burn::nn::{Linear, LinearConfig};
use burn::tensor::activation::{leaky_relu, sigmoid};
use burn::tensor::backend::Backend;
use burn::tensor::module::adaptive_avg_pool2d;
use burn::tensor::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::blocks::conv;
use crate::backbone::{BackboneConfig, Encoder};
use crate::nn::{conv2d, resize_bilinear, seeded_init};

pub use schedule::{run_schedule, AdversarialNets, EpochLosses, Phase, SegSample, TrainSchedule, TrainingReport};

#[derive(Debug, Error, PartialEq)]
pub enum AdversarialError {
    #[error("tap shapes incompatible with a {side:?}-side mirror: {reason}")]
    ShapeIncompatible { side: Side, reason: String },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("all appearance vectors are identical")]
    DegenerateData,
    #[error("domain split needs at least two patches, got {0}")]
    TooFewPatches(usize),
    #[error("invalid adversarial config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainTag {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvWeights {
    pub alpha_e: f64,
    pub alpha_d: f64,
    pub alpha_m: f64,
}

impl Default for AdvWeights {
    fn default() -> Self {
        Self {
            alpha_e: 0.01,
            alpha_d: 0.001,
            alpha_m: 0.001,
        }
    }
}

impl AdvWeights {
    pub const ZERO: AdvWeights = AdvWeights {
        alpha_e: 0.0,
        alpha_d: 0.0,
        alpha_m: 0.0,
    };

    pub fn validate(&self) -> Result<(), AdversarialError> {
        for (name, v) in [("alpha_e", self.alpha_e), ("alpha_d", self.alpha_d), ("alpha_m", self.alpha_m)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AdversarialError::InvalidConfig(format!("{name}={v} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

/// Generator objective used against the mask discriminator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmAdvForm {
    /// `−E[ln(1 − D_m(G(x)))]`
    #[default]
    AsPrinted,
    /// `−E[ln D_m(G(x))]`
    Conventional,
}

/// `L_seg + α_e·adv_e + α_d·adv_d + α_m·adv_m`.
pub fn full_loss<T>(seg: T, adv_e: T, adv_d: T, adv_m: T, w: &AdvWeights) -> T
where
    T: Add<Output = T> + Mul<f64, Output = T>,
{
    seg + adv_e * w.alpha_e + adv_d * w.alpha_d + adv_m * w.alpha_m
}

pub const BCE_EPS: f64 = 1e-7;

fn ln_clamped<B: Backend>(p: Tensor<B, 2>) -> Tensor<B, 2> {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS).log()
}

/// `−E[ln p_real] − E[ln(1 − p_fake)]` over discriminator outputs `[N, 1]`.
pub fn bce_real_fake<B: Backend>(p_real: Tensor<B, 2>, p_fake: Tensor<B, 2>) -> Tensor<B, 1> {
    bce_real(p_real) + bce_fake(p_fake)
}

/// `−E[ln p]`.
pub fn bce_real<B: Backend>(p: Tensor<B, 2>) -> Tensor<B, 1> {
    ln_clamped(p).mean().neg()
}

/// `−E[ln(1 − p)]`.
pub fn bce_fake<B: Backend>(p: Tensor<B, 2>) -> Tensor<B, 1> {
    ln_clamped(p.neg() + 1.0).mean().neg()
}

/// Concatenated input of one mirror layer, `[C, H, W]` of each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConcatShape {
    pub layer: usize,
    pub own: [usize; 3],
    pub tap: [usize; 3],
}

/// Discriminator whose layers mirror a generator part: layer 1 reads tap 1,
/// every later layer resamples its own features to the next tap's size and
/// convolves the channel concatenation (own ‖ tap). No cropping anywhere.
#[derive(Module, Debug)]
pub struct MirrorDiscriminator<B: Backend> {
    layers: Vec<Conv2d<B>>,
    head: Linear<B>,
    tap_channels: Vec<usize>,
}

fn own_width(tap_channels: usize) -> usize {
    tap_channels.clamp(4, 64)
}

pub fn build_mirror_discriminator<B: Backend>(
    side: Side,
    tap_shapes: &[[usize; 3]],
    seed: u64,
    device: &B::Device,
) -> Result<MirrorDiscriminator<B>, AdversarialError> {
    let incompatible = |reason: String| AdversarialError::ShapeIncompatible { side, reason };
    if tap_shapes.is_empty() {
        return Err(incompatible("no taps".into()));
    }
    for (i, w) in tap_shapes.windows(2).enumerate() {
        let (prev, next) = (w[0], w[1]);
        let ok = match side {
            Side::Encoder => next[1] <= prev[1] && next[2] <= prev[2],
            Side::Decoder => next[1] >= prev[1] && next[2] >= prev[2],
        };
        if !ok {
            return Err(incompatible(format!("tap {} {:?} then tap {} {:?}", i + 1, prev, i + 2, next)));
        }
    }
    if let Some(t) = tap_shapes.iter().find(|t| t.iter().any(|&d| d == 0)) {
        return Err(incompatible(format!("empty tap {t:?}")));
    }
    let widths: Vec<usize> = tap_shapes.iter().map(|t| own_width(t[0])).collect();
    Ok(seeded_init::<B, _>(seed, || {
        let layers = tap_shapes
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let cin = if i == 0 { t[0] } else { widths[i - 1] + t[0] };
                conv(cin, widths[i], 3, 1, 1, true).init(device)
            })
            .collect();
        MirrorDiscriminator {
            layers,
            head: LinearConfig::new(*widths.last().expect("non-empty"), 1).init(device),
            tap_channels: tap_shapes.iter().map(|t| t[0]).collect(),
        }
    }))
}

impl<B: Backend> MirrorDiscriminator<B> {
    /// Input channels of each layer.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.dims()[1]).collect()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Probabilities `[N, 1]` and the shapes joined at every concatenation.
    pub fn forward_traced(&self, taps: &[Tensor<B, 4>]) -> (Tensor<B, 2>, Vec<ConcatShape>) {
        assert_eq!(taps.len(), self.layers.len(), "one tap per mirror layer");
        let mut trace = Vec::with_capacity(taps.len().saturating_sub(1));
        let mut h = leaky_relu(conv2d(&self.layers[0], taps[0].clone()), 0.2);
        for (i, (layer, tap)) in self.layers.iter().zip(taps).enumerate().skip(1) {
            let [_, tc, th, tw] = tap.dims();
            let own = resize_bilinear(h, th, tw);
            let [_, oc, oh, ow] = own.dims();
            trace.push(ConcatShape {
                layer: i + 1,
                own: [oc, oh, ow],
                tap: [tc, th, tw],
            });
            h = leaky_relu(conv2d(layer, Tensor::cat(vec![own, tap.clone()], 1)), 0.2);
        }
        let pooled = adaptive_avg_pool2d(h, [1, 1]).flatten::<2>(1, 3);
        (sigmoid(self.head.forward(pooled)), trace)
    }

    pub fn forward(&self, taps: &[Tensor<B, 4>]) -> Tensor<B, 2> {
        self.forward_traced(taps).0
    }
}

fn detached<B: Backend>(taps: &[Tensor<B, 4>]) -> Vec<Tensor<B, 4>> {
    taps.iter().map(|t| t.clone().detach()).collect()
}

/// Discriminator loss with B as the real class: `−E_B[ln D] − E_A[ln(1 − D)]`.
/// Taps are detached, so no gradient reaches the generator.
pub fn d_loss<B: Backend>(
    disc: &MirrorDiscriminator<B>,
    taps_b: &[Tensor<B, 4>],
    taps_a: &[Tensor<B, 4>],
) -> Tensor<B, 1> {
    bce_real_fake(disc.forward(&detached(taps_b)), disc.forward(&detached(taps_a)))
}

/// Label-flipped loss for the generator: `−E_A[ln D] − E_B[ln(1 − D)]`.
/// The discriminator is evaluated with frozen parameters.
pub fn adv_loss<B: Backend>(
    disc: &MirrorDiscriminator<B>,
    taps_a: &[Tensor<B, 4>],
    taps_b: &[Tensor<B, 4>],
) -> Tensor<B, 1> {
    let frozen = disc.clone().no_grad();
    bce_real_fake(frozen.forward(taps_a), frozen.forward(taps_b))
}

/// Mask discriminator: the encoder topology on a one-channel input, followed by
/// global pooling and a single logit. 1 means ground-truth mask.
#[derive(Module, Debug)]
pub struct MaskDiscriminator<B: Backend> {
    encoder: Encoder<B>,
    head: Linear<B>,
}

impl<B: Backend> MaskDiscriminator<B> {
    pub fn new(cfg: &BackboneConfig, seed: u64, device: &B::Device) -> Self {
        seeded_init::<B, _>(seed, || Self {
            encoder: Encoder::new(cfg, 1, device),
            head: LinearConfig::new(cfg.encoder_channels()[4], 1).init(device),
        })
    }

    pub fn forward(&self, masks: Tensor<B, 4>) -> Tensor<B, 2> {
        let deepest = self.encoder.forward(masks).pop().expect("five stages");
        sigmoid(self.head.forward(adaptive_avg_pool2d(deepest, [1, 1]).flatten::<2>(1, 3)))
    }
}

/// `−E[ln D_m(ŷ)] − E[ln(1 − D_m(G(x)))]`, predictions detached.
pub fn d_loss_mask<B: Backend>(
    dm: &MaskDiscriminator<B>,
    gt_masks: Tensor<B, 4>,
    pred_masks: Tensor<B, 4>,
) -> Result<Tensor<B, 1>, AdversarialError> {
    if gt_masks.dims() != pred_masks.dims() {
        return Err(AdversarialError::ShapeMismatch(gt_masks.dims().to_vec(), pred_masks.dims().to_vec()));
    }
    Ok(bce_real_fake(dm.forward(gt_masks), dm.forward(pred_masks.detach())))
}

/// Generator loss against the frozen mask discriminator.
pub fn adv_loss_mask<B: Backend>(dm: &MaskDiscriminator<B>, pred_masks: Tensor<B, 4>, form: DmAdvForm) -> Tensor<B, 1> {
    let p = dm.clone().no_grad().forward(pred_masks);
    match form {
        DmAdvForm::AsPrinted => bce_fake(p),
        DmAdvForm::Conventional => bce_real(p),
    }
}

/// Per-channel mean and standard deviation of the pixel values.
pub fn appearance_features(img: &RgbImage) -> [f64; 6] {
    let n = (img.width() as f64) * (img.height() as f64);
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for px in img.pixels() {
        for c in 0..3 {
            let v = px[c] as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let mut f = [0.0; 6];
    for c in 0..3 {
        let mean = sum[c] / n;
        f[c] = mean;
        f[3 + c] = (sq[c] / n - mean * mean).max(0.0).sqrt();
    }
    f
}

fn dist2(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_less(a: &[f64; 6], b: &[f64; 6]) -> bool {
    a.partial_cmp(b) == Some(std::cmp::Ordering::Less)
}

/// Index of the point farthest from `from`; ties go to the lexicographically
/// smallest vector so the choice does not depend on input order.
fn farthest(points: &[[f64; 6]], from: &[f64; 6]) -> usize {
    let mut best = 0;
    for i in 1..points.len() {
        let (d, db) = (dist2(&points[i], from), dist2(&points[best], from));
        if d > db || (d == db && lex_less(&points[i], &points[best])) {
            best = i;
        }
    }
    best
}

fn centroid(points: &[[f64; 6]], members: impl Iterator<Item = usize>) -> Option<[f64; 6]> {
    let mut c = [0.0; 6];
    let mut n = 0usize;
    for i in members {
        for k in 0..6 {
            c[k] += points[i][k];
        }
        n += 1;
    }
    (n > 0).then(|| c.map(|v| v / n as f64))
}

/// Two-means clustering of appearance vectors. The larger cluster is `A`;
/// equal sizes go to the cluster with the lexicographically smaller centroid.
pub fn two_means(points: &[[f64; 6]]) -> Result<Vec<DomainTag>, AdversarialError> {
    if points.len() < 2 {
        return Err(AdversarialError::TooFewPatches(points.len()));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(AdversarialError::DegenerateData);
    }
    let mean = centroid(points, 0..points.len()).expect("non-empty");
    let mut c0 = points[farthest(points, &mean)];
    let mut c1 = points[farthest(points, &c0)];
    let mut assign = vec![0u8; points.len()];
    for _ in 0..100 {
        let next: Vec<u8> = points
            .iter()
            .map(|p| u8::from(dist2(p, &c1) < dist2(p, &c0)))
            .collect();
        let stable = next == assign;
        assign = next;
        match (
            centroid(points, (0..points.len()).filter(|&i| assign[i] == 0)),
            centroid(points, (0..points.len()).filter(|&i| assign[i] == 1)),
        ) {
            (Some(a), Some(b)) => {
                c0 = a;
                c1 = b;
            }
            _ => break,
        }
        if stable {
            break;
        }
    }
    let n1 = assign.iter().filter(|&&a| a == 1).count();
    let n0 = points.len() - n1;
    let zero_is_a = n0 > n1 || (n0 == n1 && !lex_less(&c1, &c0));
    Ok(assign
        .into_iter()
        .map(|a| if (a == 0) == zero_is_a { DomainTag::A } else { DomainTag::B })
        .collect())
}

/// Appearance-based A/B split of training patches.
pub fn domain_split(patches: &[&RgbImage]) -> Result<Vec<DomainTag>, AdversarialError> {
    let features: Vec<[f64; 6]> = patches.iter().map(|p| appearance_features(p)).collect();
    two_means(&features)
}
