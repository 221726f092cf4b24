//! Building blocks of the segmentation network.

use burn::module::Module;
use burn::nn::conv::{Conv2d, Conv2dConfig};
use burn::nn::{BatchNorm, BatchNormConfig, InstanceNorm, InstanceNormConfig, PaddingConfig2d};
use burn::tensor::activation::{relu, sigmoid};
use burn::tensor::backend::Backend;
use burn::tensor::module::adaptive_avg_pool2d;
use burn::tensor::Tensor;

use crate::nn::{conv2d, resize_bilinear};

pub(crate) fn conv(cin: usize, cout: usize, k: usize, stride: usize, dilation: usize, bias: bool) -> Conv2dConfig {
    let pad = dilation * (k / 2);
    Conv2dConfig::new([cin, cout], [k, k])
        .with_stride([stride, stride])
        .with_dilation([dilation, dilation])
        .with_padding(PaddingConfig2d::Explicit(pad, pad))
        .with_bias(bias)
}

/// Channel-split normalisation: the first `split` channels are instance
/// normalised, the rest batch normalised. `split == 0` is plain batch norm.
#[derive(Module, Debug)]
pub struct Ibn<B: Backend> {
    instance: Option<InstanceNorm<B>>,
    batch: BatchNorm<B, 2>,
    split: usize,
}

impl<B: Backend> Ibn<B> {
    pub fn new(channels: usize, ibn: bool, device: &B::Device) -> Self {
        let split = if ibn { channels / 2 } else { 0 };
        Self {
            instance: (split > 0).then(|| InstanceNormConfig::new(split).init(device)),
            batch: BatchNormConfig::new(channels - split).init(device),
            split,
        }
    }

    pub fn is_ibn(&self) -> bool {
        self.instance.is_some()
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        match &self.instance {
            None => self.batch.forward(x),
            Some(inorm) => {
                let c = x.dims()[1];
                let a = inorm.forward(x.clone().narrow(1, 0, self.split));
                let b = self.batch.forward(x.narrow(1, self.split, c - self.split));
                Tensor::cat(vec![a, b], 1)
            }
        }
    }
}

/// Residual block with basic (two 3×3) or bottleneck (1×1, 3×3, 1×1) body.
/// The first normalisation may be IBN.
#[derive(Module, Debug)]
pub struct ResBlock<B: Backend> {
    convs: Vec<Conv2d<B>>,
    first_norm: Ibn<B>,
    norms: Vec<BatchNorm<B, 2>>,
    shortcut_conv: Option<Conv2d<B>>,
    shortcut_norm: Option<BatchNorm<B, 2>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bottleneck: bool,
    pub ibn: bool,
}

impl<B: Backend> ResBlock<B> {
    pub fn new(s: BlockSpec, device: &B::Device) -> Self {
        let (convs, widths): (Vec<Conv2d<B>>, Vec<usize>) = if s.bottleneck {
            let mid = (s.cout / 4).max(1);
            (
                vec![
                    conv(s.cin, mid, 1, 1, 1, false).init(device),
                    conv(mid, mid, 3, s.stride, s.dilation, false).init(device),
                    conv(mid, s.cout, 1, 1, 1, false).init(device),
                ],
                vec![mid, mid, s.cout],
            )
        } else {
            (
                vec![
                    conv(s.cin, s.cout, 3, s.stride, s.dilation, false).init(device),
                    conv(s.cout, s.cout, 3, 1, s.dilation, false).init(device),
                ],
                vec![s.cout, s.cout],
            )
        };
        let projection = s.cin != s.cout || s.stride != 1;
        Self {
            convs,
            first_norm: Ibn::new(widths[0], s.ibn, device),
            norms: widths[1..].iter().map(|&w| BatchNormConfig::new(w).init(device)).collect(),
            shortcut_conv: projection.then(|| conv(s.cin, s.cout, 1, s.stride, 1, false).init(device)),
            shortcut_norm: projection.then(|| BatchNormConfig::new(s.cout).init(device)),
        }
    }

    pub fn has_ibn(&self) -> bool {
        self.first_norm.is_ibn()
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let skip = match (&self.shortcut_conv, &self.shortcut_norm) {
            (Some(c), Some(n)) => n.forward(conv2d(c, x.clone())),
            _ => x.clone(),
        };
        let last = self.convs.len() - 1;
        let mut y = x;
        for (i, c) in self.convs.iter().enumerate() {
            y = conv2d(c, y);
            y = if i == 0 {
                self.first_norm.forward(y)
            } else {
                self.norms[i - 1].forward(y)
            };
            if i != last {
                y = relu(y);
            }
        }
        relu(y + skip)
    }
}

/// Concurrent spatial and channel squeeze-and-excitation.
#[derive(Module, Debug)]
pub struct Scse<B: Backend> {
    squeeze: Conv2d<B>,
    excite: Conv2d<B>,
    spatial: Conv2d<B>,
}

/// `max(x · channel_gate, x · spatial_gate)` with broadcasting gates.
pub fn scse_combine<B: Backend>(x: Tensor<B, 4>, channel_gate: Tensor<B, 4>, spatial_gate: Tensor<B, 4>) -> Tensor<B, 4> {
    let c = x.clone() * channel_gate;
    let s = x * spatial_gate;
    c.max_pair(s)
}

impl<B: Backend> Scse<B> {
    pub fn new(channels: usize, device: &B::Device) -> Self {
        let hidden = (channels / 8).max(2);
        Self {
            squeeze: conv(channels, hidden, 1, 1, 1, true).init(device),
            excite: conv(hidden, channels, 1, 1, 1, true).init(device),
            spatial: conv(channels, 1, 1, 1, 1, true).init(device),
        }
    }

    /// Channel gate `[N, C, 1, 1]` and spatial gate `[N, 1, H, W]`, both in [0, 1].
    pub fn gates(&self, x: Tensor<B, 4>) -> (Tensor<B, 4>, Tensor<B, 4>) {
        let pooled = adaptive_avg_pool2d(x.clone(), [1, 1]);
        let channel = sigmoid(conv2d(&self.excite, relu(conv2d(&self.squeeze, pooled))));
        let spatial = sigmoid(conv2d(&self.spatial, x));
        (channel, spatial)
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let (c, s) = self.gates(x.clone());
        scse_combine(x, c, s)
    }
}

/// Pyramid pooling: each scale pools to `s×s`, projects to `C/4` channels and
/// is upsampled back; the branches are concatenated after the input.
#[derive(Module, Debug)]
pub struct Ppm<B: Backend> {
    branches: Vec<Conv2d<B>>,
    scales: Vec<usize>,
}

impl<B: Backend> Ppm<B> {
    pub fn branch_width(channels: usize) -> usize {
        (channels / 4).max(1)
    }

    pub fn new(channels: usize, scales: &[usize], device: &B::Device) -> Self {
        let w = Self::branch_width(channels);
        Self {
            branches: scales.iter().map(|_| conv(channels, w, 1, 1, 1, true).init(device)).collect(),
            scales: scales.to_vec(),
        }
    }

    pub fn out_channels(channels: usize, n_scales: usize) -> usize {
        channels + n_scales * Self::branch_width(channels)
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [_, _, h, w] = x.dims();
        let mut parts = vec![x.clone()];
        for (conv, &s) in self.branches.iter().zip(&self.scales) {
            let pooled = adaptive_avg_pool2d(x.clone(), [s, s]);
            parts.push(resize_bilinear(relu(conv2d(conv, pooled)), h, w));
        }
        Tensor::cat(parts, 1)
    }
}

/// Decoder unit: residual block with instance norm, optionally SCSE gated.
#[derive(Module, Debug)]
pub struct DecoderBlock<B: Backend> {
    conv1: Conv2d<B>,
    norm1: InstanceNorm<B>,
    conv2: Conv2d<B>,
    norm2: InstanceNorm<B>,
    shortcut: Option<Conv2d<B>>,
    scse: Option<Scse<B>>,
}

impl<B: Backend> DecoderBlock<B> {
    pub fn new(cin: usize, cout: usize, scse: bool, device: &B::Device) -> Self {
        Self {
            conv1: conv(cin, cout, 3, 1, 1, false).init(device),
            norm1: InstanceNormConfig::new(cout).init(device),
            conv2: conv(cout, cout, 3, 1, 1, false).init(device),
            norm2: InstanceNormConfig::new(cout).init(device),
            shortcut: (cin != cout).then(|| conv(cin, cout, 1, 1, 1, false).init(device)),
            scse: scse.then(|| Scse::new(cout, device)),
        }
    }

    pub fn has_scse(&self) -> bool {
        self.scse.is_some()
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let skip = match &self.shortcut {
            Some(c) => conv2d(c, x.clone()),
            None => x.clone(),
        };
        let y = relu(self.norm1.forward(conv2d(&self.conv1, x)));
        let y = relu(self.norm2.forward(conv2d(&self.conv2, y)) + skip);
        match &self.scse {
            Some(s) => s.forward(y),
            None => y,
        }
    }
}

/// 1×1 projection of the channel-concatenation of upsampled taps, followed by
/// a sigmoid.
///
/// The projection is stored per tap and applied before upsampling; since both
/// the projection and the bilinear resize are linear with unit-sum weights,
/// this equals concatenating at full resolution and projecting once.
#[derive(Module, Debug)]
pub struct HypercolumnHead<B: Backend> {
    projections: Vec<Conv2d<B>>,
    in_channels: usize,
}

impl<B: Backend> HypercolumnHead<B> {
    pub fn new(tap_channels: &[usize], device: &B::Device) -> Self {
        Self {
            projections: tap_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| conv(c, 1, 1, 1, 1, i == 0).init(device))
                .collect(),
            in_channels: tap_channels.iter().sum(),
        }
    }

    /// Channels of the concatenated hypercolumn.
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Logits `[N, 1, H, W]`.
    pub fn logits(&self, taps: &[Tensor<B, 4>], h: usize, w: usize) -> Tensor<B, 4> {
        let mut acc: Option<Tensor<B, 4>> = None;
        for (p, t) in self.projections.iter().zip(taps) {
            let up = resize_bilinear(conv2d(p, t.clone()), h, w);
            acc = Some(match acc {
                Some(a) => a + up,
                None => up,
            });
        }
        acc.expect("at least one tap")
    }

    pub fn forward(&self, taps: &[Tensor<B, 4>], h: usize, w: usize) -> Tensor<B, 4> {
        sigmoid(self.logits(taps, h, w))
    }

    /// The equivalent single `[1, ΣC]` weight row and bias, in tap order.
    pub fn fused_weights(&self) -> (Vec<f32>, f32) {
        let mut weights = Vec::with_capacity(self.in_channels);
        let mut bias = 0.0;
        for p in &self.projections {
            weights.extend(crate::nn::to_vec_f32(p.weight.val()));
            if let Some(b) = &p.bias {
                bias += crate::nn::to_vec_f32(b.val())[0];
            }
        }
        (weights, bias)
    }
}
