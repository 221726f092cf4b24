//! Encoder-decoder segmentation network with IBN encoder stages, an atrous
//! centre with pyramid pooling, SCSE-gated instance-norm decoder units and a
//! hypercolumn head.

pub mod blocks;

use std::path::{Path, PathBuf};

use burn::module::Module;
use burn::nn::conv::Conv2d;
use burn::nn::{BatchNorm, BatchNormConfig};
use burn::record::{BinFileRecorder, FullPrecisionSettings};
use burn::tensor::activation::relu;
use burn::tensor::backend::Backend;
use burn::tensor::module::max_pool2d;
use burn::tensor::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{conv2d, resize_bilinear, rgb_batch, seeded_init, to_vec_f32, InferBackend};
use crate::raster::{resize_prob, Plane, ProbMap};
use blocks::{conv, BlockSpec, DecoderBlock, HypercolumnHead, Ppm, ResBlock};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("bad input shape: {0}")]
    BadShape(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Reference,
}

/// Encoder topology of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetSpec {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub bottleneck: bool,
}

impl Preset {
    pub fn spec(self) -> PresetSpec {
        match self {
            Preset::Tiny => PresetSpec {
                stem_width: 8,
                stem_kernel: 3,
                widths: [8, 16, 32, 64],
                blocks: [1, 1, 1, 1],
                bottleneck: false,
            },
            Preset::Small => PresetSpec {
                stem_width: 16,
                stem_kernel: 3,
                widths: [16, 32, 64, 128],
                blocks: [1, 2, 2, 1],
                bottleneck: false,
            },
            Preset::Reference => PresetSpec {
                stem_width: 64,
                stem_kernel: 7,
                widths: [256, 512, 1024, 2048],
                blocks: [3, 4, 6, 3],
                bottleneck: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub preset: Preset,
    /// Encoder stages (2 to 5) whose residual blocks use IBN.
    pub ibn_stages: Vec<u8>,
    pub atrous: bool,
    pub atrous_rates: [usize; 2],
    pub ppm: bool,
    pub ppm_scales: Vec<usize>,
    pub scse: bool,
    pub hypercolumn: bool,
    pub input_size: u32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Reference,
            ibn_stages: vec![2, 3, 4],
            atrous: true,
            atrous_rates: [2, 4],
            ppm: true,
            ppm_scales: vec![1, 2, 3, 6],
            scse: true,
            hypercolumn: true,
            input_size: 512,
        }
    }
}

/// Channel and spatial sizes of every tap for a given input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapShapes {
    /// `[C, H, W]` for E1..E5.
    pub encoder: Vec<[usize; 3]>,
    /// `[C, H, W]` for D5..D1 (coarse to fine).
    pub decoder: Vec<[usize; 3]>,
    pub center_channels: usize,
}

impl BackboneConfig {
    pub fn tiny(input_size: u32) -> Self {
        Self {
            preset: Preset::Tiny,
            input_size,
            ..Self::default()
        }
    }

    /// Everything off: a plain residual U-shaped network.
    pub fn plain(preset: Preset, input_size: u32) -> Self {
        Self {
            preset,
            ibn_stages: vec![],
            atrous: false,
            ppm: false,
            scse: false,
            hypercolumn: false,
            input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::InvalidConfig(m));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size {} is not a positive multiple of 32", self.input_size));
        }
        if let Some(s) = self.ibn_stages.iter().find(|&&s| !(2..=5).contains(&s)) {
            return bad(format!("ibn stage E{s} has no residual blocks (valid: 2..=5)"));
        }
        if self.atrous && self.atrous_rates.iter().any(|&r| r == 0) {
            return bad("atrous rates must be >= 1".into());
        }
        if self.ppm {
            if self.ppm_scales.is_empty() {
                return bad("ppm enabled with no scales".into());
            }
            if self.ppm_scales[0] == 0 || self.ppm_scales.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("ppm scales {:?} must be strictly increasing positive integers", self.ppm_scales));
            }
        }
        Ok(())
    }

    /// Output channels of E1..E5.
    pub fn encoder_channels(&self) -> [usize; 5] {
        let s = self.preset.spec();
        [s.stem_width, s.widths[0], s.widths[1], s.widths[2], s.widths[3]]
    }

    /// Output channels of D5..D1: each unit narrows to the next finer skip's width.
    pub fn decoder_channels(&self) -> [usize; 5] {
        let e = self.encoder_channels();
        [e[3], e[2], e[1], e[0], e[0]]
    }

    pub fn center_channels(&self) -> usize {
        let c = self.encoder_channels()[4];
        if self.ppm {
            Ppm::<InferBackend>::out_channels(c, self.ppm_scales.len())
        } else {
            c
        }
    }

    /// Cumulative downsampling factor after each encoder stage.
    pub fn encoder_strides(&self) -> [usize; 5] {
        if self.atrous {
            [2, 4, 8, 8, 8]
        } else {
            [2, 4, 8, 16, 32]
        }
    }

    pub fn tap_shapes(&self, h: usize, w: usize) -> TapShapes {
        let ec = self.encoder_channels();
        let dc = self.decoder_channels();
        let st = self.encoder_strides();
        let encoder: Vec<[usize; 3]> = (0..5).map(|i| [ec[i], h / st[i], w / st[i]]).collect();
        let decoder = (0..5)
            .map(|j| {
                let [_, eh, ew] = encoder[4 - j];
                [dc[j], eh, ew]
            })
            .collect();
        TapShapes {
            encoder,
            decoder,
            center_channels: self.center_channels(),
        }
    }
}

/// Five-stage residual encoder. `E1` is a strided stem, `E2` opens with a
/// max-pool, `E3`..`E5` open with a strided (or, under atrous, dilated) block.
#[derive(Module, Debug)]
pub struct Encoder<B: Backend> {
    stem: Conv2d<B>,
    stem_norm: BatchNorm<B, 2>,
    stages: Vec<Vec<ResBlock<B>>>,
}

impl<B: Backend> Encoder<B> {
    pub fn new(cfg: &BackboneConfig, in_channels: usize, device: &B::Device) -> Self {
        let spec = cfg.preset.spec();
        let mut stages = Vec::with_capacity(4);
        let mut cin = spec.stem_width;
        for (i, (&width, &count)) in spec.widths.iter().zip(&spec.blocks).enumerate() {
            let stage = i as u8 + 2;
            let (stride, dilation) = match stage {
                2 => (1, 1),
                3 => (2, 1),
                4 | 5 if cfg.atrous => (1, cfg.atrous_rates[stage as usize - 4]),
                _ => (2, 1),
            };
            let ibn = cfg.ibn_stages.contains(&stage);
            let blocks = (0..count)
                .map(|b| {
                    ResBlock::new(
                        BlockSpec {
                            cin: if b == 0 { cin } else { width },
                            cout: width,
                            stride: if b == 0 { stride } else { 1 },
                            dilation,
                            bottleneck: spec.bottleneck,
                            ibn,
                        },
                        device,
                    )
                })
                .collect();
            stages.push(blocks);
            cin = width;
        }
        Self {
            stem: conv(in_channels, spec.stem_width, spec.stem_kernel, 2, 1, false).init(device),
            stem_norm: BatchNormConfig::new(spec.stem_width).init(device),
            stages,
        }
    }

    /// Outputs of E1..E5.
    pub fn forward(&self, x: Tensor<B, 4>) -> Vec<Tensor<B, 4>> {
        let mut taps = Vec::with_capacity(5);
        let mut y = relu(self.stem_norm.forward(conv2d(&self.stem, x)));
        taps.push(y.clone());
        for (i, stage) in self.stages.iter().enumerate() {
            if i == 0 {
                y = max_pool2d(y, [3, 3], [2, 2], [1, 1], [1, 1]);
            }
            for block in stage {
                y = block.forward(y);
            }
            taps.push(y.clone());
        }
        taps
    }

    /// Stage numbers (2..=5) whose blocks carry IBN.
    pub fn ibn_stages(&self) -> Vec<u8> {
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.iter().all(|b| b.has_ibn()))
            .map(|(i, _)| i as u8 + 2)
            .collect()
    }
}

#[derive(Module, Debug)]
pub struct SegModel<B: Backend> {
    encoder: Encoder<B>,
    ppm: Option<Ppm<B>>,
    decoder: Vec<DecoderBlock<B>>,
    head: HypercolumnHead<B>,
    hypercolumn: bool,
}

/// Probabilities plus the feature taps consumed by the mirror discriminators.
#[derive(Debug, Clone)]
pub struct SegOutput<B: Backend> {
    /// `[N, 1, H, W]` in [0, 1].
    pub probs: Tensor<B, 4>,
    /// E1..E5.
    pub encoder_taps: Vec<Tensor<B, 4>>,
    /// D5..D1.
    pub decoder_taps: Vec<Tensor<B, 4>>,
}

impl<B: Backend> SegModel<B> {
    pub fn new(cfg: &BackboneConfig, seed: u64, device: &B::Device) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let ec = cfg.encoder_channels();
        let dc = cfg.decoder_channels();
        Ok(seeded_init::<B, _>(seed, || {
            let center = cfg.center_channels();
            let inputs = [center, 2 * ec[3], 2 * ec[2], 2 * ec[1], 2 * ec[0]];
            let decoder = inputs
                .iter()
                .zip(&dc)
                .map(|(&cin, &cout)| DecoderBlock::new(cin, cout, cfg.scse, device))
                .collect();
            let head_taps: Vec<usize> = if cfg.hypercolumn { dc.to_vec() } else { vec![dc[4]] };
            Self {
                encoder: Encoder::new(cfg, 3, device),
                ppm: cfg.ppm.then(|| Ppm::new(ec[4], &cfg.ppm_scales, device)),
                decoder,
                head: HypercolumnHead::new(&head_taps, device),
                hypercolumn: cfg.hypercolumn,
            }
        }))
    }

    pub fn encoder(&self) -> &Encoder<B> {
        &self.encoder
    }

    pub fn has_ppm(&self) -> bool {
        self.ppm.is_some()
    }

    pub fn decoder_scse(&self) -> Vec<bool> {
        self.decoder.iter().map(|d| d.has_scse()).collect()
    }

    pub fn head(&self) -> &HypercolumnHead<B> {
        &self.head
    }

    pub fn forward_with_taps(&self, x: Tensor<B, 4>) -> Result<SegOutput<B>, BackboneError> {
        let [_, c, h, w] = x.dims();
        if c != 3 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(BackboneError::BadShape(format!(
                "expected [N, 3, H, W] with H, W positive multiples of 32, got {:?}",
                x.dims()
            )));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: Tensor<B, 4>) -> SegOutput<B> {
        let [_, _, h, w] = x.dims();
        let encoder_taps = self.encoder.forward(x);
        let mut y = encoder_taps[4].clone();
        if let Some(ppm) = &self.ppm {
            y = ppm.forward(y);
        }
        let mut decoder_taps = Vec::with_capacity(5);
        for (j, unit) in self.decoder.iter().enumerate() {
            if j > 0 {
                let skip = &encoder_taps[4 - j];
                let [_, _, sh, sw] = skip.dims();
                y = Tensor::cat(vec![resize_bilinear(y, sh, sw), skip.clone()], 1);
            }
            y = unit.forward(y);
            decoder_taps.push(y.clone());
        }
        let probs = if self.hypercolumn {
            self.head.forward(&decoder_taps, h, w)
        } else {
            self.head.forward(&decoder_taps[4..], h, w)
        };
        SegOutput {
            probs,
            encoder_taps,
            decoder_taps,
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Result<Tensor<B, 4>, BackboneError> {
        Ok(self.forward_with_taps(x)?.probs)
    }
}

pub const DICE_SMOOTH: f64 = 1.0;

/// Soft Dice loss `1 − (2Σpt + λ)/(Σp + Σt + λ)` per sample, averaged over the batch.
pub fn dice_loss<B: Backend>(pred: Tensor<B, 4>, target: Tensor<B, 4>) -> Result<Tensor<B, 1>, BackboneError> {
    if pred.dims() != target.dims() {
        return Err(BackboneError::ShapeMismatch(pred.dims().to_vec(), target.dims().to_vec()));
    }
    let p = pred.flatten::<2>(1, 3);
    let t = target.flatten::<2>(1, 3);
    let inter = (p.clone() * t.clone()).sum_dim(1);
    let denom = p.sum_dim(1) + t.sum_dim(1) + DICE_SMOOTH;
    let ratio = (inter * 2.0 + DICE_SMOOTH) / denom;
    Ok((ratio.neg() + 1.0).mean())
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub backbone: BackboneConfig,
    pub encoder_channels: [usize; 5],
    pub decoder_channels: [usize; 5],
    pub center_channels: usize,
}

impl CheckpointMeta {
    pub fn for_backbone(kind: &str, cfg: &BackboneConfig) -> Self {
        Self {
            kind: kind.to_string(),
            backbone: cfg.clone(),
            encoder_channels: cfg.encoder_channels(),
            decoder_channels: cfg.decoder_channels(),
            center_channels: cfg.center_channels(),
        }
    }
}

pub(crate) fn recorder() -> BinFileRecorder<FullPrecisionSettings> {
    BinFileRecorder::new()
}

pub(crate) fn write_sidecar(stem: &Path, meta: &CheckpointMeta) -> Result<(), BackboneError> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
    std::fs::write(stem.with_extension("json"), text).map_err(|e| BackboneError::Checkpoint(e.to_string()))
}

pub(crate) fn read_sidecar(stem: &Path) -> Result<CheckpointMeta, BackboneError> {
    let text = std::fs::read_to_string(stem.with_extension("json"))
        .map_err(|e| BackboneError::Checkpoint(format!("{}: {e}", stem.with_extension("json").display())))?;
    serde_json::from_str(&text).map_err(|e| BackboneError::Checkpoint(e.to_string()))
}

/// A trained segmentation model in evaluation mode together with its config.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub config: BackboneConfig,
    pub model: SegModel<InferBackend>,
}

const SEG_BATCH: usize = 8;

impl Segmenter {
    /// Writes `<stem>.bin` and the `<stem>.json` sidecar.
    pub fn save(&self, stem: &Path) -> Result<PathBuf, BackboneError> {
        self.model
            .clone()
            .save_file(stem.to_path_buf(), &recorder())
            .map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        write_sidecar(stem, &CheckpointMeta::for_backbone("segmentation", &self.config))?;
        Ok(stem.with_extension("bin"))
    }

    pub fn load(stem: &Path) -> Result<Self, BackboneError> {
        let meta = read_sidecar(stem)?;
        let device = Default::default();
        let model = SegModel::<InferBackend>::new(&meta.backbone, 0, &device)?
            .load_file(stem.to_path_buf(), &recorder(), &device)
            .map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        Ok(Self {
            config: meta.backbone,
            model,
        })
    }

    /// Probability rasters at each patch's own resolution.
    pub fn segment(&self, patches: &[&RgbImage]) -> Result<Vec<ProbMap>, BackboneError> {
        let device = Default::default();
        let size = self.config.input_size;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(SEG_BATCH) {
            let x = rgb_batch::<InferBackend>(chunk, size, &device);
            let probs = to_vec_f32(self.model.forward(x)?);
            let plane = (size * size) as usize;
            for (i, patch) in chunk.iter().enumerate() {
                let p = Plane::from_vec(size, size, probs[i * plane..(i + 1) * plane].to_vec())
                    .expect("plane sized from input");
                out.push(resize_prob(&p, patch.width(), patch.height()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::NdArray;

    type F = NdArray<f64>;

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = BackboneConfig::tiny(64);
        assert!(c.validate().is_ok());
        c.input_size = 48;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny(64);
        c.ppm_scales = vec![1, 3, 2];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny(64);
        c.ibn_stages = vec![1];
        assert!(c.validate().is_err());
        assert!(SegModel::<F>::new(&c, 0, &Default::default()).is_err());
    }

    #[test]
    fn center_channels_count_ppm_branches() {
        let c = BackboneConfig::tiny(64);
        // 64 encoder channels plus four branches of 64 / 4
        assert_eq!(c.center_channels(), 64 + 4 * 16);
        let mut off = c.clone();
        off.ppm = false;
        assert_eq!(off.center_channels(), 64);
    }

    #[test]
    fn components_follow_flags() {
        let d = Default::default();
        let m = SegModel::<F>::new(&BackboneConfig::tiny(32), 1, &d).unwrap();
        assert!(m.has_ppm());
        assert_eq!(m.decoder_scse(), vec![true; 5]);
        assert_eq!(m.encoder().ibn_stages(), vec![2, 3, 4]);
        assert_eq!(m.head().in_channels(), BackboneConfig::tiny(32).decoder_channels().iter().sum::<usize>());
        let p = SegModel::<F>::new(&BackboneConfig::plain(Preset::Tiny, 32), 1, &d).unwrap();
        assert!(!p.has_ppm());
        assert_eq!(p.decoder_scse(), vec![false; 5]);
        assert!(p.encoder().ibn_stages().is_empty());
        assert_eq!(p.head().in_channels(), 8);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let d = Default::default();
        let m = SegModel::<F>::new(&BackboneConfig::tiny(32), 1, &d).unwrap();
        assert!(m.forward(Tensor::zeros([1, 3, 48, 32], &d)).is_err());
        assert!(m.forward(Tensor::zeros([1, 1, 32, 32], &d)).is_err());
    }

    #[test]
    fn dice_examples() {
        let d = Default::default();
        let t = Tensor::<F, 4>::from_floats([[[[1.0, 0.0], [1.0, 1.0]]]], &d);
        assert!(dice_loss(t.clone(), t.clone()).unwrap().into_scalar().abs() < 1e-12);
        let n = 16.0;
        let got = dice_loss(Tensor::<F, 4>::zeros([1, 1, 4, 4], &d), Tensor::ones([1, 1, 4, 4], &d))
            .unwrap()
            .into_scalar();
        assert!((got - (1.0 - 1.0 / (n + 1.0))).abs() < 1e-12);
        let z = Tensor::<F, 4>::zeros([2, 1, 3, 3], &d);
        assert_eq!(dice_loss(z.clone(), z).unwrap().into_scalar(), 0.0);
        assert!(dice_loss(Tensor::<F, 4>::zeros([1, 1, 2, 2], &d), Tensor::zeros([1, 1, 2, 3], &d)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackboneConfig::tiny(32);
        let seg = Segmenter {
            config: cfg.clone(),
            model: SegModel::new(&cfg, 3, &Default::default()).unwrap(),
        };
        let stem = dir.path().join("seg");
        seg.save(&stem).unwrap();
        let back = Segmenter::load(&stem).unwrap();
        assert_eq!(back.config, cfg);
        let img = RgbImage::from_fn(40, 40, |x, y| image::Rgb([(x * 5) as u8, (y * 6) as u8, 128]));
        assert_eq!(seg.segment(&[&img]).unwrap(), back.segment(&[&img]).unwrap());
    }
}
