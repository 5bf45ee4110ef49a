use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{images_to_batch, ConvNet, Head, LossKind, Session, Tensor};
use crate::error::{Error, Result};
use crate::raster::{self, BinaryMask, RgbImage};

/// Label for one training image.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Gvi(f32),
    Mask(BinaryMask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: RgbImage,
    pub target: Target,
}

/// SGD with momentum. `loss` defaults to MSE for the regression head and
/// BCE for the segmentation head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Option<LossKind>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        Ok(())
    }

    pub fn loss_for(&self, head: Head) -> LossKind {
        self.loss.unwrap_or(match head {
            Head::Regression => LossKind::Mse,
            Head::Segmentation => LossKind::Bce,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

fn targets_for(net: &ConvNet, samples: &[&TrainSample]) -> Result<Vec<f32>> {
    let cfg = net.config();
    let mut out = Vec::new();
    for s in samples {
        match (&s.target, cfg.head) {
            (Target::Gvi(v), Head::Regression) => out.push(*v),
            (Target::Mask(m), Head::Segmentation) => {
                let m = raster::resize_mask_nearest(m, cfg.input_width as u32, cfg.input_height as u32)?;
                out.extend(m.as_slice().iter().map(|&v| if v { 1.0 } else { 0.0 }));
            }
            _ => return Err(Error::validation("sample label kind does not match the network head")),
        }
    }
    Ok(out)
}

/// Trains in place. Single-threaded; the sample order of every epoch is
/// drawn from `cfg.seed`, so a fixed seed reproduces the parameter
/// trajectory bit for bit. `on_epoch` runs after each epoch (checkpointing
/// hooks in here).
pub fn train(
    net: &mut ConvNet,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ConvNet) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    let loss = cfg.loss_for(net.config().head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
            let batch = images_to_batch(&images, net.config())?;
            let targets = targets_for(net, &samples)?;

            let grads = {
                let mut session = Session::new(net);
                let pass = session.forward(&batch)?;
                let (batch_loss, d_logits) = loss.evaluate(&pass.logits, &targets)?;
                total += batch_loss * samples.len() as f64;
                session.backward(&d_logits)?
            };
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grads.params) {
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= cfg.learning_rate * *vv;
                }
                p.ensure_finite("parameters after update")?;
            }
        }
        let report = EpochReport {
            epoch,
            loss: total / data.len() as f64,
        };
        on_epoch(&report, net)?;
        epochs.push(report);
    }
    Ok(TrainReport { epochs })
}
