//! Backend aliases and tensor helpers shared by the network modules.

use std::sync::Mutex;

use burn::backend::{Autodiff, NdArray};
use burn::module::{Module, ModuleVisitor, ParamId};
use burn::nn::conv::Conv2d;
use burn::nn::PaddingConfig2d;
use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};
use image::RgbImage;

use crate::raster::resize_rgb;

pub type InferBackend = NdArray<f32>;
pub type TrainBackend = Autodiff<InferBackend>;

static INIT_LOCK: Mutex<()> = Mutex::new(());

struct Materialise;

impl<B: Backend> ModuleVisitor<B> for Materialise {
    fn visit_float<const D: usize>(&mut self, _id: ParamId, _tensor: &Tensor<B, D>) {}
}

/// Builds a module from a fixed seed.
///
/// Parameters are initialised lazily from the backend's global generator, so
/// seeding and materialising happen under one process-wide lock.
pub fn seeded_init<B: Backend, M: Module<B>>(seed: u64, init: impl FnOnce() -> M) -> M {
    let _guard = INIT_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    B::seed(seed);
    let module = init();
    module.visit(&mut Materialise);
    module
}

/// Row-stochastic `[out, input]` matrix of pixel-centre linear interpolation weights.
pub fn interpolation_matrix(input: usize, out: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; out * input];
    let scale = input as f64 / out as f64;
    let max = (input - 1) as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let w = (src - lo as f64) as f32;
        m[i * input + lo] += 1.0 - w;
        m[i * input + hi] += w;
    }
    m
}

/// Differentiable bilinear resize of `[N, C, H, W]` written as two matrix
/// products, so it has a backward pass on every backend.
pub fn resize_bilinear<B: Backend>(x: Tensor<B, 4>, out_h: usize, out_w: usize) -> Tensor<B, 4> {
    let [n, c, h, w] = x.dims();
    if (h, w) == (out_h, out_w) {
        return x;
    }
    let device = x.device();
    let ry = Tensor::<B, 1>::from_floats(interpolation_matrix(h, out_h).as_slice(), &device)
        .reshape([1, out_h, h])
        .expand([n * c, out_h, h]);
    let rxt = Tensor::<B, 1>::from_floats(interpolation_matrix(w, out_w).as_slice(), &device)
        .reshape([1, out_w, w])
        .swap_dims(1, 2)
        .expand([n * c, w, out_w]);
    let flat = x.reshape([n * c, h, w]);
    ry.matmul(flat).matmul(rxt).reshape([n, c, out_h, out_w])
}

/// Convolution through the parameters of a burn [`Conv2d`], computed as
/// shifted slices (im2col) followed by one matrix product per group.
///
/// Numerically equal to `conv.forward(x)`; its backward pass is made of
/// slices and matrix products, which is far cheaper on the ndarray backend
/// than the native convolution gradient.
pub fn conv2d<B: Backend>(conv: &Conv2d<B>, x: Tensor<B, 4>) -> Tensor<B, 4> {
    let [n, c, h, w] = x.dims();
    let [o, cg, kh, kw] = conv.weight.dims();
    let [sh, sw] = conv.stride;
    let [dh, dw] = conv.dilation;
    let groups = conv.groups;
    let (ph, pw) = match &conv.padding.0 {
        PaddingConfig2d::Explicit(ph, pw) => (*ph, *pw),
        PaddingConfig2d::Valid => (0, 0),
        PaddingConfig2d::Same => (dh * (kh - 1) / 2, dw * (kw - 1) / 2),
    };
    let oh = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let ow = (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let weight = conv.weight.val();

    let cols = if (kh, kw, sh, sw, ph, pw) == (1, 1, 1, 1, 0, 0) {
        x.reshape([n, c, h * w])
    } else {
        // room for `s * out` rows after every kernel offset
        let need_h = dh * (kh - 1) + sh * oh;
        let need_w = dw * (kw - 1) + sw * ow;
        let extra_h = need_h.saturating_sub(h + 2 * ph);
        let extra_w = need_w.saturating_sub(w + 2 * pw);
        let padded = if ph + pw + extra_h + extra_w > 0 {
            x.pad((pw, pw + extra_w, ph, ph + extra_h), 0.0)
        } else {
            x
        };
        let mut shifted = Vec::with_capacity(kh * kw);
        for i in 0..kh {
            for j in 0..kw {
                let win = padded.clone().slice([
                    0..n,
                    0..c,
                    i * dh..i * dh + sh * oh,
                    j * dw..j * dw + sw * ow,
                ]);
                let win = if (sh, sw) == (1, 1) {
                    win
                } else {
                    win.reshape([n, c, oh, sh, ow, sw])
                        .narrow(3, 0, 1)
                        .narrow(5, 0, 1)
                        .reshape([n, c, oh, ow])
                };
                shifted.push(win.reshape([n, c, 1, oh * ow]));
            }
        }
        Tensor::cat(shifted, 2).reshape([n, c * kh * kw, oh * ow])
    };

    let k = cg * kh * kw;
    let og = o / groups;
    let weight = weight.reshape([o, k]);
    let out = if groups == 1 {
        weight.unsqueeze::<3>().expand([n, o, k]).matmul(cols)
    } else {
        let parts = (0..groups)
            .map(|g| {
                let wg = weight.clone().narrow(0, g * og, og).unsqueeze::<3>().expand([n, og, k]);
                wg.matmul(cols.clone().narrow(1, g * k, k))
            })
            .collect();
        Tensor::cat(parts, 1)
    };
    let out = out.reshape([n, o, oh, ow]);
    match &conv.bias {
        Some(b) => out + b.val().reshape([1, o, 1, 1]),
        None => out,
    }
}

/// Stacks RGB patches into a normalised `[N, 3, size, size]` tensor.
pub fn rgb_batch<B: Backend>(patches: &[&RgbImage], size: u32, device: &B::Device) -> Tensor<B, 4> {
    let plane = (size * size) as usize;
    let mut data = vec![0.0f32; patches.len() * 3 * plane];
    for (i, patch) in patches.iter().enumerate() {
        let resized = resize_rgb(patch, size, size);
        let base = i * 3 * plane;
        for (j, px) in resized.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + j] = (px[c] as f32 / 255.0 - 0.5) / 0.25;
            }
        }
    }
    Tensor::from_data(
        TensorData::new(data, [patches.len(), 3, size as usize, size as usize]),
        device,
    )
}

pub fn to_vec_f32<B: Backend, const D: usize>(t: Tensor<B, D>) -> Vec<f32> {
    t.into_data()
        .convert::<f32>()
        .to_vec::<f32>()
        .expect("converted to f32")
}
