//! A small convolutional network with hand-written gradients.
//!
//! The body is a stack of `[conv 3x3 (same) -> ReLU -> maxpool 2x2]` blocks.
//! Two heads sit on top of it:
//!
//! * [`Head::Regression`]: global average pool, one dense unit, sigmoid. The
//!   output is a single GVI estimate in (0, 1).
//! * [`Head::Segmentation`]: 1x1 convolution to one channel, nearest
//!   upsampling to the input size, per-pixel sigmoid (probability of
//!   vegetation). A single sigmoid stands in for a two-unit
//!   vegetation/background output; the two are equivalent for a binary task.
//!
//! Parameters are kept as a flat list of tensors in a fixed order
//! (`conv0.weight, conv0.bias, conv1.weight, ..., head.weight, head.bias`);
//! gradients, the optimizer and checkpoints all use that order.

mod checkpoint;
mod loss;
pub mod ops;
mod tensor;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, BinaryMask, RgbImage};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};
pub use loss::{bce_with_logits, mse_through_sigmoid, LossKind};
pub use tensor::Tensor;
pub use train::{train, EpochReport, Target, TrainConfig, TrainReport, TrainSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Regression,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each conv block.
    pub blocks: Vec<usize>,
    pub head: Head,
}

impl NetConfig {
    pub const DEFAULT_INPUT: usize = 128;

    pub fn regression(blocks: Vec<usize>) -> Self {
        Self {
            in_channels: 3,
            input_height: Self::DEFAULT_INPUT,
            input_width: Self::DEFAULT_INPUT,
            blocks,
            head: Head::Regression,
        }
    }

    pub fn segmentation(blocks: Vec<usize>) -> Self {
        Self {
            head: Head::Segmentation,
            ..Self::regression(blocks)
        }
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.blocks.contains(&0) {
            return Err(Error::validation("channel counts must be positive"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for _ in &self.blocks {
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 {
            return Err(Error::validation(format!(
                "input {}x{} is too small for {} pooling blocks",
                self.input_height,
                self.input_width,
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Channels entering block `b` (and the head when `b == blocks.len()`).
    fn channels_before(&self, b: usize) -> usize {
        if b == 0 {
            self.in_channels
        } else {
            self.blocks[b - 1]
        }
    }

    /// Spatial size at the input of block `b`.
    fn dims_before(&self, b: usize) -> (usize, usize) {
        (self.input_height >> b, self.input_width >> b)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (b, &out) in self.blocks.iter().enumerate() {
            shapes.push(vec![out, self.channels_before(b), 3, 3]);
            shapes.push(vec![out]);
        }
        shapes.push(vec![self.channels_before(self.blocks.len())]);
        shapes.push(vec![1]);
        shapes
    }
}

/// One entry of the layer stack, as addressed by layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv3x3 { block: usize },
    Relu { block: usize },
    MaxPool { block: usize },
    GlobalAvgPool,
    Dense,
    Conv1x1,
    Upsample,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    config: NetConfig,
    params: Vec<Tensor>,
}

impl ConvNet {
    /// He-normal initialised weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let head_weight = shapes.len() - 2;
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                // Conv kernels: He; head weights feed a sigmoid: 1/sqrt(fan_in).
                let std = match shape.len() {
                    4 => (2.0 / (shape[1] * 9) as f32).sqrt(),
                    _ if i == head_weight => (1.0 / shape[0] as f32).sqrt(),
                    _ => 0.0,
                };
                let data = if std == 0.0 {
                    vec![0.0; n]
                } else {
                    let normal = Normal::new(0.0f32, std).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = config.param_shapes().into_iter().map(Tensor::zeros).collect();
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: NetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Load("parameter shapes do not match the config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        for block in 0..self.config.blocks.len() {
            layers.extend([Layer::Conv3x3 { block }, Layer::Relu { block }, Layer::MaxPool { block }]);
        }
        match self.config.head {
            Head::Regression => layers.extend([Layer::GlobalAvgPool, Layer::Dense, Layer::Sigmoid]),
            Head::Segmentation => layers.extend([Layer::Conv1x1, Layer::Upsample, Layer::Sigmoid]),
        }
        layers
    }

    /// Index of the last 3x3 convolution in [`ConvNet::layers`].
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers()
            .iter()
            .rposition(|l| matches!(l, Layer::Conv3x3 { .. }))
    }

    fn head_weight(&self) -> &[f32] {
        self.params[2 * self.config.blocks.len()].data()
    }

    fn head_bias(&self) -> f32 {
        self.params[2 * self.config.blocks.len() + 1].data()[0]
    }

    /// Shape of the logits for a batch of `n`.
    fn logit_shape(&self, n: usize) -> Vec<usize> {
        match self.config.head {
            Head::Regression => vec![n],
            Head::Segmentation => vec![n, 1, self.config.input_height, self.config.input_width],
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let c = &self.config;
        let s = batch.shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_height || s[3] != c.input_width {
            return Err(Error::validation(format!(
                "batch shape {s:?} does not match network input [N, {}, {}, {}]",
                c.in_channels, c.input_height, c.input_width
            )));
        }
        Ok(s[0])
    }

    /// Runs a batch `[N, C, H, W]`. Outputs are sigmoid probabilities: shape
    /// `[N]` for regression, `[N, 1, H, W]` for segmentation.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardPass> {
        let n = self.check_batch(batch)?;
        let per = batch.len() / n.max(1);
        let mut caches = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(self.logit_shape(n).iter().product());
        for i in 0..n {
            let cache = self.forward_one(&batch.data()[i * per..(i + 1) * per]);
            logits.extend_from_slice(&cache.logits);
            caches.push(cache);
        }
        let logits = Tensor::new(self.logit_shape(n), logits)?;
        logits.ensure_finite("logits")?;
        let output = Tensor::new(
            logits.shape().to_vec(),
            logits.data().iter().map(|&z| ops::sigmoid(z)).collect(),
        )?;
        Ok(ForwardPass {
            output,
            logits,
            caches,
        })
    }

    fn forward_one(&self, input: &[f32]) -> ImageCache {
        let cfg = &self.config;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut x = input.to_vec();
        for (b, &out_c) in cfg.blocks.iter().enumerate() {
            let in_c = cfg.channels_before(b);
            let (h, w) = cfg.dims_before(b);
            let mut act = vec![0.0; out_c * h * w];
            ops::conv3x3_forward(
                &x,
                in_c,
                h,
                w,
                self.params[2 * b].data(),
                self.params[2 * b + 1].data(),
                out_c,
                &mut act,
            );
            ops::relu_inplace(&mut act);
            let mut pooled = vec![0.0; out_c * (h / 2) * (w / 2)];
            let argmax = ops::maxpool2_forward(&act, out_c, h, w, &mut pooled);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                activation: act,
                argmax,
            });
        }
        let c = cfg.channels_before(cfg.blocks.len());
        let (h, w) = cfg.dims_before(cfg.blocks.len());
        let plane = h * w;
        let wgt = self.head_weight();
        let bias = self.head_bias();
        let logits = match cfg.head {
            Head::Regression => {
                let gap: Vec<f32> = (0..c)
                    .map(|k| x[k * plane..(k + 1) * plane].iter().sum::<f32>() / plane as f32)
                    .collect();
                vec![bias + gap.iter().zip(wgt).map(|(a, b)| a * b).sum::<f32>()]
            }
            Head::Segmentation => {
                let mut coarse = vec![bias; plane];
                for k in 0..c {
                    for (z, v) in coarse.iter_mut().zip(&x[k * plane..(k + 1) * plane]) {
                        *z += wgt[k] * v;
                    }
                }
                raster::resize_grid(
                    &coarse,
                    w as u32,
                    h as u32,
                    cfg.input_width as u32,
                    cfg.input_height as u32,
                )
                .expect("head dims are valid")
            }
        };
        ImageCache {
            blocks,
            features: x,
            logits,
        }
    }

    /// Gradients of every parameter given `d_logits`, the gradient of the
    /// loss with respect to the pre-sigmoid logits (same shape as
    /// [`ForwardPass::logits`]).
    pub fn backward(&self, pass: &ForwardPass, d_logits: &Tensor) -> Result<Gradients> {
        if d_logits.shape() != pass.logits.shape() {
            return Err(Error::validation(format!(
                "logit gradient shape {:?} does not match logits {:?}",
                d_logits.shape(),
                pass.logits.shape()
            )));
        }
        let mut params: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let per = d_logits.len() / pass.caches.len().max(1);
        let mut activations = Vec::with_capacity(pass.caches.len());
        for (i, cache) in pass.caches.iter().enumerate() {
            let g = &d_logits.data()[i * per..(i + 1) * per];
            activations.push(self.backward_one(cache, g, &mut params));
        }
        for p in &params {
            p.ensure_finite("gradient")?;
        }
        Ok(Gradients {
            params,
            activations,
        })
    }

    fn backward_one(&self, cache: &ImageCache, d_logit: &[f32], grads: &mut [Tensor]) -> Vec<Vec<f32>> {
        let cfg = &self.config;
        let nb = cfg.blocks.len();
        let c = cfg.channels_before(nb);
        let (h, w) = cfg.dims_before(nb);
        let plane = h * w;
        let wgt = self.head_weight();
        let mut d_feat = vec![0.0f32; c * plane];
        match cfg.head {
            Head::Regression => {
                let g = d_logit[0];
                let dw = grads[2 * nb].data_mut();
                for k in 0..c {
                    let gap = cache.features[k * plane..(k + 1) * plane].iter().sum::<f32>() / plane as f32;
                    dw[k] += g * gap;
                    d_feat[k * plane..(k + 1) * plane].fill(g * wgt[k] / plane as f32);
                }
                grads[2 * nb + 1].data_mut()[0] += g;
            }
            Head::Segmentation => {
                // Nearest upsampling: each coarse logit collects the gradient
                // of every output pixel that copied it.
                let mut d_coarse = vec![0.0f32; plane];
                for y in 0..cfg.input_height {
                    let sy = raster::nearest_source(y as u32, h as u32, cfg.input_height as u32) as usize;
                    for x in 0..cfg.input_width {
                        let sx = raster::nearest_source(x as u32, w as u32, cfg.input_width as u32) as usize;
                        d_coarse[sy * w + sx] += d_logit[y * cfg.input_width + x];
                    }
                }
                let dw = grads[2 * nb].data_mut();
                for k in 0..c {
                    let f = &cache.features[k * plane..(k + 1) * plane];
                    dw[k] += f.iter().zip(&d_coarse).map(|(a, b)| a * b).sum::<f32>();
                    for (d, g) in d_feat[k * plane..(k + 1) * plane].iter_mut().zip(&d_coarse) {
                        *d = wgt[k] * g;
                    }
                }
                grads[2 * nb + 1].data_mut()[0] += d_coarse.iter().sum::<f32>();
            }
        }

        let mut d_acts = vec![Vec::new(); nb];
        for b in (0..nb).rev() {
            let bc = &cache.blocks[b];
            let out_c = cfg.blocks[b];
            let in_c = cfg.channels_before(b);
            let (h, w) = cfg.dims_before(b);
            let mut d_act = vec![0.0f32; out_c * h * w];
            ops::maxpool2_backward(&bc.argmax, &d_feat, &mut d_act);
            d_acts[b] = d_act.clone();
            for (d, a) in d_act.iter_mut().zip(&bc.activation) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dw, rest) = grads[2 * b..].split_at_mut(1);
            let mut d_in = (b > 0).then(|| vec![0.0f32; in_c * h * w]);
            ops::conv3x3_backward(
                &bc.input,
                in_c,
                h,
                w,
                self.params[2 * b].data(),
                out_c,
                &d_act,
                dw[0].data_mut(),
                rest[0].data_mut(),
                d_in.as_deref_mut(),
            );
            if let Some(d) = d_in {
                d_feat = d;
            }
        }
        d_acts
    }

    /// Probabilities for a batch of images (resized to the network input).
    pub fn predict(&self, images: &[&RgbImage]) -> Result<Tensor> {
        if images.is_empty() {
            return Ok(Tensor::zeros(self.logit_shape(0)));
        }
        let batch = images_to_batch(images, &self.config)?;
        Ok(self.forward(&batch)?.output)
    }
}

/// Scalar GVI estimate from a regression network.
pub fn predict_gvi(net: &ConvNet, image: &RgbImage) -> Result<f64> {
    Ok(predict_gvi_batch(net, &[image])?[0])
}

/// One estimate per image, in input order.
pub fn predict_gvi_batch(net: &ConvNet, images: &[&RgbImage]) -> Result<Vec<f64>> {
    if net.config.head != Head::Regression {
        return Err(Error::validation("GVI prediction needs a regression head"));
    }
    Ok(net.predict(images)?.data().iter().map(|&p| f64::from(p)).collect())
}

/// Vegetation mask at the image's own size; a pixel is vegetation iff its
/// probability is strictly above 0.5.
pub fn predict_mask(net: &ConvNet, image: &RgbImage) -> Result<BinaryMask> {
    if net.config.head != Head::Segmentation {
        return Err(Error::validation("mask prediction needs a segmentation head"));
    }
    let probs = net.predict(&[image])?;
    let cfg = &net.config;
    let mask = threshold_mask(probs.data(), cfg.input_width as u32, cfg.input_height as u32)?;
    raster::resize_mask_nearest(&mask, image.width(), image.height())
}

pub fn threshold_mask(probs: &[f32], width: u32, height: u32) -> Result<BinaryMask> {
    BinaryMask::from_vec(width, height, probs.iter().map(|&p| p > 0.5).collect())
}

/// `[3, H, W]` network input for one image: resized to the configured
/// input size, channels scaled to [-1, 1].
pub fn image_to_input(img: &RgbImage, config: &NetConfig) -> Result<Vec<f32>> {
    if config.in_channels != 3 {
        return Err(Error::validation("RGB input needs a 3-channel network"));
    }
    let (h, w) = (config.input_height as u32, config.input_width as u32);
    let resized;
    let img = if img.width() == w && img.height() == h {
        img
    } else {
        resized = raster::resize_nearest(img, w, h)?;
        &resized
    };
    let plane = (h * w) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for k in 0..3 {
            out[k * plane + i] = (f32::from(p[k]) - 127.5) / 127.5;
        }
    }
    Ok(out)
}

pub fn images_to_batch(images: &[&RgbImage], config: &NetConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * config.input_height * config.input_width);
    for img in images {
        data.extend(image_to_input(img, config)?);
    }
    Tensor::new(
        vec![images.len(), 3, config.input_height, config.input_width],
        data,
    )
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f32>,
    /// ReLU output of the block's convolution.
    activation: Vec<f32>,
    argmax: Vec<u32>,
}

#[derive(Debug, Clone)]
struct ImageCache {
    blocks: Vec<BlockCache>,
    /// Input to the head.
    features: Vec<f32>,
    logits: Vec<f32>,
}

/// Result of [`ConvNet::forward`], holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    pub logits: Tensor,
    caches: Vec<ImageCache>,
}

impl ForwardPass {
    /// Rectified conv output of `block` for batch item `item`, shaped
    /// `[channels, h, w]`.
    pub fn activation(&self, item: usize, block: usize) -> &[f32] {
        &self.caches[item].blocks[block].activation
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same order and shapes as [`ConvNet::params`].
    pub params: Vec<Tensor>,
    /// Per batch item, per block: gradient with respect to the block's
    /// rectified conv output.
    pub activations: Vec<Vec<Vec<f32>>>,
}

/// Stateful forward/backward pairing used by training: `backward` refers to
/// the most recent `forward`.
#[derive(Debug)]
pub struct Session<'a> {
    net: &'a ConvNet,
    pass: Option<ForwardPass>,
}

impl<'a> Session<'a> {
    pub fn new(net: &'a ConvNet) -> Self {
        Self { net, pass: None }
    }

    pub fn forward(&mut self, batch: &Tensor) -> Result<&ForwardPass> {
        self.pass = Some(self.net.forward(batch)?);
        Ok(self.pass.as_ref().expect("just set"))
    }

    pub fn backward(&self, d_logits: &Tensor) -> Result<Gradients> {
        let pass = self
            .pass
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        self.net.backward(pass, d_logits)
    }
}
