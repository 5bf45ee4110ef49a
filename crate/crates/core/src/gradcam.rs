//! Gradient-weighted class activation maps for the regression network.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::{images_to_batch, ConvNet, Head, Layer, Tensor};
use crate::raster::{self, Dimensions, RgbImage};

/// Per-pixel intensities in [0, 1] at the analyzed image's size.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Heatmap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Sum of intensities.
    pub fn mass(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }
}

impl Dimensions for Heatmap {
    fn width(&self) -> u32 {
        self.width
    }

    fn height(&self) -> u32 {
        self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CamInfo {
    pub layer_index: usize,
    pub block: usize,
    /// Predicted GVI (sigmoid output).
    pub prediction: f64,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    pub heatmap: Heatmap,
    pub info: CamInfo,
}

/// Grad-CAM of the regression logit with respect to the rectified output of
/// the 3x3 convolution at `layer_index` (see [`ConvNet::layers`]).
pub fn grad_cam(net: &ConvNet, image: &RgbImage, layer_index: usize) -> Result<CamResult> {
    let cfg = net.config();
    if cfg.head != Head::Regression {
        return Err(Error::validation("Grad-CAM needs a regression head"));
    }
    let block = match net.layers().get(layer_index) {
        Some(Layer::Conv3x3 { block }) => *block,
        Some(other) => {
            return Err(Error::validation(format!("layer {layer_index} is {other:?}, not a 3x3 convolution")))
        }
        None => return Err(Error::validation(format!("layer index {layer_index} is out of range"))),
    };

    let batch = images_to_batch(&[image], cfg)?;
    let pass = net.forward(&batch)?;
    let grads = net.backward(&pass, &Tensor::new(vec![1], vec![1.0])?)?;
    let acts = pass.activation(0, block);
    let d_acts = &grads.activations[0][block];

    let channels = cfg.blocks[block];
    let (mut h, mut w) = (cfg.input_height, cfg.input_width);
    for _ in 0..block {
        h /= 2;
        w /= 2;
    }
    let plane = h * w;
    debug_assert_eq!(acts.len(), channels * plane);

    let mut raw = vec![0f64; plane];
    for k in 0..channels {
        let grad = &d_acts[k * plane..(k + 1) * plane];
        let alpha = grad.iter().map(|&g| f64::from(g)).sum::<f64>() / plane as f64;
        for (r, &a) in raw.iter_mut().zip(&acts[k * plane..(k + 1) * plane]) {
            *r += alpha * f64::from(a);
        }
    }
    let max = raw.iter().fold(0f64, |m, &v| m.max(v));
    let normalized: Vec<f32> = raw
        .iter()
        .map(|&v| if max > 0.0 { (v.max(0.0) / max) as f32 } else { 0.0 })
        .collect();
    let data = raster::resize_grid(&normalized, w as u32, h as u32, image.width(), image.height())?;

    Ok(CamResult {
        heatmap: Heatmap { width: image.width(), height: image.height(), data },
        info: CamInfo {
            layer_index,
            block,
            prediction: f64::from(pass.output.data()[0]),
            logit: f64::from(pass.logits.data()[0]),
        },
    })
}

/// Heatmap color: blue at 0, red at 1.
pub fn colormap(v: f32) -> [f64; 3] {
    let t = f64::from(v.clamp(0.0, 1.0));
    [255.0 * t, 0.0, 255.0 * (1.0 - t)]
}

/// Blends the colormapped heatmap over the image with weight 0.5.
pub fn render_overlay(image: &RgbImage, heatmap: &Heatmap) -> Result<RgbImage> {
    raster::require_same_dims(image, heatmap, "overlay")?;
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let c = colormap(heatmap.get(x, y));
        let p = image.get(x, y);
        std::array::from_fn(|k| (0.5 * f64::from(p[k]) + 0.5 * c[k]).round() as u8)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::NetConfig;

    fn single_map_net() -> ConvNet {
        let cfg = NetConfig::regression(vec![1]).with_input(8, 8);
        let mut net = ConvNet::new(cfg, 5).unwrap();
        // Positive head weight: the logit gradient reaching the map is
        // non-negative everywhere.
        net.params_mut()[2].data_mut()[0] = 0.7;
        net
    }

    fn scene() -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| [(x * 13) as u8, (y * 11) as u8, ((x + y) * 5) as u8]).unwrap()
    }

    #[test]
    fn single_map_heatmap_is_the_normalized_activation() {
        let net = single_map_net();
        let img = scene();
        let cam = grad_cam(&net, &img, 0).unwrap();

        let pass = net.forward(&images_to_batch(&[&img], net.config()).unwrap()).unwrap();
        let act = pass.activation(0, 0);
        let max = act.iter().cloned().fold(0f32, f32::max);
        assert!(max > 0.0);
        for y in 0..16 {
            for x in 0..16 {
                let expect = act[((y / 2) * 8 + x / 2) as usize] / max;
                assert!((cam.heatmap.get(x, y) - expect).abs() < 1e-6);
            }
        }
        assert_eq!(cam.heatmap.as_slice().iter().cloned().fold(0f32, f32::max), 1.0);
    }

    #[test]
    fn zero_head_weights_give_a_zero_map() {
        let mut net = ConvNet::new(NetConfig::regression(vec![4, 4]).with_input(16, 16), 2).unwrap();
        net.params_mut()[4].fill(0.0);
        let cam = grad_cam(&net, &scene(), 3).unwrap();
        assert!(cam.heatmap.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(cam.info.prediction, 0.5);
    }

    #[test]
    fn scaling_head_weights_leaves_the_map_unchanged() {
        let net = ConvNet::new(NetConfig::regression(vec![4, 6]).with_input(16, 16), 9).unwrap();
        let layer = net.last_conv_layer().unwrap();
        let base = grad_cam(&net, &scene(), layer).unwrap();
        for c in [0.25f32, 3.0, 40.0] {
            let mut scaled = net.clone();
            scaled.params_mut()[4].scale(c);
            let cam = grad_cam(&scaled, &scene(), layer).unwrap();
            for (a, b) in base.heatmap.as_slice().iter().zip(cam.heatmap.as_slice()) {
                assert!((a - b).abs() < 1e-5, "c={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn values_are_in_unit_range_and_dims_follow_the_image() {
        let net = ConvNet::new(NetConfig::regression(vec![4, 6]).with_input(16, 16), 1).unwrap();
        let img = RgbImage::from_fn(37, 21, |x, y| [(x * 7) as u8, (y * 9) as u8, 40]).unwrap();
        for layer in [0, 3] {
            let cam = grad_cam(&net, &img, layer).unwrap();
            assert_eq!((cam.heatmap.width(), cam.heatmap.height()), (37, 21));
            assert!(cam.heatmap.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(cam.info.layer_index, layer);
        }
    }

    #[test]
    fn non_conv_layers_are_rejected() {
        let net = ConvNet::new(NetConfig::regression(vec![4]).with_input(8, 8), 1).unwrap();
        for layer in [1, 2, 3, 4, 5, 99] {
            assert!(matches!(grad_cam(&net, &scene(), layer), Err(Error::Validation(_))), "{layer}");
        }
        let seg = ConvNet::new(NetConfig::segmentation(vec![4]).with_input(8, 8), 1).unwrap();
        assert!(grad_cam(&seg, &scene(), 0).is_err());
    }

    #[test]
    fn overlay_colormap_ends() {
        let img = RgbImage::filled(3, 2, [100, 100, 100]).unwrap();
        let zero = Heatmap { width: 3, height: 2, data: vec![0.0; 6] };
        let one = Heatmap { width: 3, height: 2, data: vec![1.0; 6] };
        let blue = render_overlay(&img, &zero).unwrap();
        let red = render_overlay(&img, &one).unwrap();
        assert!(blue.pixels().all(|p| p == [50, 50, 178]));
        assert!(red.pixels().all(|p| p == [178, 50, 50]));
        assert_eq!((red.width(), red.height()), (3, 2));
        let small = Heatmap { width: 2, height: 2, data: vec![0.0; 4] };
        assert!(matches!(render_overlay(&img, &small), Err(Error::Validation(_))));
    }
}
