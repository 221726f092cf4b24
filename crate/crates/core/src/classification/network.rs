//! Small CNN patch classifiers and the [`PatchScorer`] wrapper around them.
//!
//! Three architectures with different inductive biases: densely connected,
//! residual and grouped-convolution residual. All take a normalised
//! `[N, 3, S, S]` batch and emit two logits (benign, malignant).

use std::path::Path;

use burn::module::{AutodiffModule, Module};
use burn::nn::conv::{Conv2d, Conv2dConfig};
use burn::nn::{BatchNorm, BatchNormConfig, Linear, LinearConfig, PaddingConfig2d};
use burn::optim::{AdamConfig, GradientsParams, Optimizer};
use burn::record::{BinFileRecorder, FullPrecisionSettings, RecorderError};
use burn::tensor::activation::{log_softmax, relu, softmax};
use burn::tensor::backend::Backend;
use burn::tensor::module::{adaptive_avg_pool2d, avg_pool2d};
use burn::tensor::{Tensor, TensorData};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PatchScorer;
use crate::labeling::{augment_patch, AugmentConfig, SmoothedLabel};
use crate::nn::{conv2d, rgb_batch, seeded_init, to_vec_f32, InferBackend, TrainBackend};
use crate::tiling::PatchRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierArch {
    Dense,
    Residual,
    Grouped,
}

impl ClassifierArch {
    pub const ALL: [ClassifierArch; 3] = [Self::Dense, Self::Residual, Self::Grouped];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::Residual => "residual",
            Self::Grouped => "grouped",
        }
    }
}

#[derive(Module, Debug)]
pub struct ConvBn<B: Backend> {
    conv: Conv2d<B>,
    bn: BatchNorm<B, 2>,
}

impl<B: Backend> ConvBn<B> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, groups: usize, device: &B::Device) -> Self {
        Self {
            conv: Conv2dConfig::new([cin, cout], [k, k])
                .with_stride([stride, stride])
                .with_padding(PaddingConfig2d::Explicit(k / 2, k / 2))
                .with_groups(groups)
                .with_bias(false)
                .init(device),
            bn: BatchNormConfig::new(cout).init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        self.bn.forward(conv2d(&self.conv, x))
    }
}

#[derive(Module, Debug)]
pub struct BasicBlock<B: Backend> {
    a: ConvBn<B>,
    b: ConvBn<B>,
    shortcut: Option<ConvBn<B>>,
}

impl<B: Backend> BasicBlock<B> {
    fn new(cin: usize, cout: usize, stride: usize, device: &B::Device) -> Self {
        Self {
            a: ConvBn::new(cin, cout, 3, stride, 1, device),
            b: ConvBn::new(cout, cout, 3, 1, 1, device),
            shortcut: (cin != cout || stride != 1).then(|| ConvBn::new(cin, cout, 1, stride, 1, device)),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let skip = match &self.shortcut {
            Some(s) => s.forward(x.clone()),
            None => x.clone(),
        };
        relu(self.b.forward(relu(self.a.forward(x))) + skip)
    }
}

#[derive(Module, Debug)]
pub struct GroupedBlock<B: Backend> {
    reduce: ConvBn<B>,
    group: ConvBn<B>,
    expand: ConvBn<B>,
    shortcut: Option<ConvBn<B>>,
}

impl<B: Backend> GroupedBlock<B> {
    fn new(cin: usize, mid: usize, cout: usize, groups: usize, stride: usize, device: &B::Device) -> Self {
        Self {
            reduce: ConvBn::new(cin, mid, 1, 1, 1, device),
            group: ConvBn::new(mid, mid, 3, stride, groups, device),
            expand: ConvBn::new(mid, cout, 1, 1, 1, device),
            shortcut: (cin != cout || stride != 1).then(|| ConvBn::new(cin, cout, 1, stride, 1, device)),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let skip = match &self.shortcut {
            Some(s) => s.forward(x.clone()),
            None => x.clone(),
        };
        let y = relu(self.reduce.forward(x));
        let y = relu(self.group.forward(y));
        relu(self.expand.forward(y) + skip)
    }
}

#[derive(Module, Debug)]
pub struct DenseLayer<B: Backend> {
    bn: BatchNorm<B, 2>,
    conv: Conv2d<B>,
}

impl<B: Backend> DenseLayer<B> {
    fn new(cin: usize, growth: usize, device: &B::Device) -> Self {
        Self {
            bn: BatchNormConfig::new(cin).init(device),
            conv: Conv2dConfig::new([cin, growth], [3, 3])
                .with_padding(PaddingConfig2d::Explicit(1, 1))
                .with_bias(false)
                .init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let new = conv2d(&self.conv, relu(self.bn.forward(x.clone())));
        Tensor::cat(vec![x, new], 1)
    }
}

#[derive(Module, Debug)]
pub struct Transition<B: Backend> {
    bn: BatchNorm<B, 2>,
    conv: Conv2d<B>,
}

impl<B: Backend> Transition<B> {
    fn new(cin: usize, cout: usize, device: &B::Device) -> Self {
        Self {
            bn: BatchNormConfig::new(cin).init(device),
            conv: Conv2dConfig::new([cin, cout], [1, 1]).with_bias(false).init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let y = conv2d(&self.conv, relu(self.bn.forward(x)));
        avg_pool2d(y, [2, 2], [2, 2], [0, 0], true)
    }
}

#[derive(Module, Debug)]
pub struct DenseNet<B: Backend> {
    stem: ConvBn<B>,
    block1: Vec<DenseLayer<B>>,
    trans1: Transition<B>,
    block2: Vec<DenseLayer<B>>,
    trans2: Transition<B>,
    head: Linear<B>,
}

impl<B: Backend> DenseNet<B> {
    fn new(device: &B::Device) -> Self {
        let growth = 8;
        let block = |cin: usize| -> Vec<DenseLayer<B>> {
            (0..3).map(|i| DenseLayer::new(cin + i * growth, growth, device)).collect()
        };
        Self {
            stem: ConvBn::new(3, 16, 3, 1, 1, device),
            block1: block(16),
            trans1: Transition::new(16 + 3 * growth, 24, device),
            block2: block(24),
            trans2: Transition::new(24 + 3 * growth, 32, device),
            head: LinearConfig::new(32, 2).init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 2> {
        let mut y = relu(self.stem.forward(x));
        for l in &self.block1 {
            y = l.forward(y);
        }
        y = self.trans1.forward(y);
        for l in &self.block2 {
            y = l.forward(y);
        }
        y = self.trans2.forward(y);
        self.head.forward(adaptive_avg_pool2d(y, [1, 1]).flatten(1, 3))
    }
}

#[derive(Module, Debug)]
pub struct ResNet<B: Backend> {
    stem: ConvBn<B>,
    blocks: Vec<BasicBlock<B>>,
    head: Linear<B>,
}

impl<B: Backend> ResNet<B> {
    fn new(device: &B::Device) -> Self {
        Self {
            stem: ConvBn::new(3, 16, 3, 1, 1, device),
            blocks: vec![
                BasicBlock::new(16, 16, 1, device),
                BasicBlock::new(16, 32, 2, device),
                BasicBlock::new(32, 64, 2, device),
            ],
            head: LinearConfig::new(64, 2).init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 2> {
        let mut y = relu(self.stem.forward(x));
        for b in &self.blocks {
            y = b.forward(y);
        }
        self.head.forward(adaptive_avg_pool2d(y, [1, 1]).flatten(1, 3))
    }
}

#[derive(Module, Debug)]
pub struct GroupedNet<B: Backend> {
    stem: ConvBn<B>,
    blocks: Vec<GroupedBlock<B>>,
    head: Linear<B>,
}

impl<B: Backend> GroupedNet<B> {
    fn new(device: &B::Device) -> Self {
        Self {
            stem: ConvBn::new(3, 16, 3, 1, 1, device),
            blocks: vec![
                GroupedBlock::new(16, 32, 32, 8, 2, device),
                GroupedBlock::new(32, 64, 64, 8, 2, device),
            ],
            head: LinearConfig::new(64, 2).init(device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 2> {
        let mut y = relu(self.stem.forward(x));
        for b in &self.blocks {
            y = b.forward(y);
        }
        self.head.forward(adaptive_avg_pool2d(y, [1, 1]).flatten(1, 3))
    }
}

#[derive(Module, Debug)]
pub enum ClassifierNet<B: Backend> {
    Dense(DenseNet<B>),
    Residual(ResNet<B>),
    Grouped(GroupedNet<B>),
}

impl<B: Backend> ClassifierNet<B> {
    pub fn new(arch: ClassifierArch, seed: u64, device: &B::Device) -> Self {
        seeded_init::<B, _>(seed, || match arch {
            ClassifierArch::Dense => Self::Dense(DenseNet::new(device)),
            ClassifierArch::Residual => Self::Residual(ResNet::new(device)),
            ClassifierArch::Grouped => Self::Grouped(GroupedNet::new(device)),
        })
    }

    pub fn arch(&self) -> ClassifierArch {
        match self {
            Self::Dense(_) => ClassifierArch::Dense,
            Self::Residual(_) => ClassifierArch::Residual,
            Self::Grouped(_) => ClassifierArch::Grouped,
        }
    }

    /// Logits `[N, 2]`.
    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 2> {
        match self {
            Self::Dense(m) => m.forward(x),
            Self::Residual(m) => m.forward(x),
            Self::Grouped(m) => m.forward(x),
        }
    }
}

/// Mean soft-target cross-entropy of logits against `[N, 2]` target distributions.
pub fn soft_cross_entropy<B: Backend>(logits: Tensor<B, 2>, targets: Tensor<B, 2>) -> Tensor<B, 1> {
    (log_softmax(logits, 1) * targets).sum_dim(1).mean().neg()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub input_size: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            epochs: 8,
            batch_size: 16,
            learning_rate: 2e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub patch: PatchRecord,
    pub target: SmoothedLabel,
}

/// Trains one classifier with soft targets and returns it wrapped as a scorer,
/// together with the mean training loss of every epoch.
///
/// Augmentation, when given, is redrawn per sample and epoch from `seed`.
pub fn train_classifier(
    arch: ClassifierArch,
    samples: &[TrainingSample],
    cfg: &ClassifierTrainConfig,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> (CnnScorer, Vec<f64>) {
    let device = Default::default();
    let mut model = ClassifierNet::<TrainBackend>::new(arch, seed, &device);
    let mut optim = AdamConfig::new().init();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if chunk.len() < 2 {
                continue;
            }
            let patches: Vec<PatchRecord> = chunk
                .iter()
                .map(|&i| match augment {
                    Some(a) => augment_patch(&samples[i].patch, sample_seed(seed, epoch, i), a),
                    None => samples[i].patch.clone(),
                })
                .collect();
            let refs: Vec<&RgbImage> = patches.iter().map(|p| &p.pixels).collect();
            let x = rgb_batch::<TrainBackend>(&refs, cfg.input_size, &device);
            let t: Vec<f32> = chunk
                .iter()
                .flat_map(|&i| samples[i].target.as_array().map(|v| v as f32))
                .collect();
            let targets = Tensor::from_data(TensorData::new(t, [chunk.len(), 2]), &device);
            let loss = soft_cross_entropy(model.forward(x), targets);
            losses.push(loss.clone().into_scalar() as f64);
            let grads = GradientsParams::from_grads(loss.backward(), &model);
            model = optim.step(cfg.learning_rate, model, grads);
        }
        history.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
    }
    let scorer = CnnScorer::new(format!("{}-{seed}", arch.name()), model.valid(), cfg.input_size);
    (scorer, history)
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(index as u64)
}

/// A trained classifier used in evaluation mode.
#[derive(Debug, Clone)]
pub struct CnnScorer {
    id: String,
    model: ClassifierNet<InferBackend>,
    input_size: u32,
}

const SCORE_BATCH: usize = 64;

impl CnnScorer {
    pub fn new(id: String, model: ClassifierNet<InferBackend>, input_size: u32) -> Self {
        Self { id, model, input_size }
    }

    pub fn arch(&self) -> ClassifierArch {
        self.model.arch()
    }

    pub fn input_size(&self) -> u32 {
        self.input_size
    }

    pub fn save(&self, path: &Path) -> Result<(), RecorderError> {
        self.model
            .clone()
            .save_file(path.to_path_buf(), &BinFileRecorder::<FullPrecisionSettings>::new())
    }

    pub fn load(id: String, arch: ClassifierArch, input_size: u32, path: &Path) -> Result<Self, RecorderError> {
        let device = Default::default();
        let model = ClassifierNet::<InferBackend>::new(arch, 0, &device).load_file(
            path.to_path_buf(),
            &BinFileRecorder::<FullPrecisionSettings>::new(),
            &device,
        )?;
        Ok(Self::new(id, model, input_size))
    }
}

impl PatchScorer for CnnScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, patch: &RgbImage) -> f64 {
        self.score_batch(&[patch])[0]
    }

    fn score_batch(&self, patches: &[&RgbImage]) -> Vec<f64> {
        let device = Default::default();
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(SCORE_BATCH) {
            let x = rgb_batch::<InferBackend>(chunk, self.input_size, &device);
            let probs = softmax(self.model.forward(x), 1);
            let v = to_vec_f32(probs);
            out.extend(v.chunks(2).map(|p| p[1] as f64));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::NdArray;

    #[test]
    fn soft_cross_entropy_matches_scalar_form() {
        type F = NdArray<f64>;
        let device = Default::default();
        let logits = [0.3f64, -1.2, 2.0, 0.5];
        let targets = [0.9f64, 0.1, 0.05, 0.95];
        let l = Tensor::<F, 2>::from_data(TensorData::new(logits.to_vec(), [2, 2]), &device);
        let t = Tensor::<F, 2>::from_data(TensorData::new(targets.to_vec(), [2, 2]), &device);
        let got = soft_cross_entropy(l, t).into_scalar();
        let mut expect = 0.0;
        for i in 0..2 {
            let (a, b) = (logits[2 * i], logits[2 * i + 1]);
            let lse = (a.exp() + b.exp()).ln();
            let probs = [(a - lse).exp(), (b - lse).exp()];
            let target = SmoothedLabel {
                p_benign: targets[2 * i],
                p_malignant: targets[2 * i + 1],
            };
            expect += crate::labeling::soft_target_cross_entropy(probs, &target).unwrap();
        }
        assert!((got - expect / 2.0).abs() < 1e-9, "{got} vs {}", expect / 2.0);
    }

    #[test]
    fn every_arch_emits_two_logits() {
        let device = Default::default();
        for arch in ClassifierArch::ALL {
            let m = ClassifierNet::<InferBackend>::new(arch, 1, &device);
            let x = Tensor::<InferBackend, 4>::zeros([3, 3, 32, 32], &device);
            assert_eq!(m.forward(x).dims(), [3, 2]);
        }
    }

    #[test]
    fn scorer_is_deterministic_and_in_unit_interval() {
        let device = Default::default();
        let scorer = CnnScorer::new("r".into(), ClassifierNet::new(ClassifierArch::Residual, 3, &device), 32);
        let img = RgbImage::from_fn(64, 64, |x, y| image::Rgb([(x * 3) as u8, (y * 2) as u8, 90]));
        let a = scorer.score(&img);
        assert_eq!(a, scorer.score(&img));
        assert!((0.0..=1.0).contains(&a));
    }
}
