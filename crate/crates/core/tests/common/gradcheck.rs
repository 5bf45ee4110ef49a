//! Central finite-difference oracle for network gradients. Uses only the
//! forward pass and the loss value, never the backward pass.

use gvi_core::nnet::{ConvNet, Head, LossKind, NetConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: (usize, usize),
}

fn loss_at(net: &ConvNet, batch: &Tensor, targets: &[f32], loss: LossKind) -> f64 {
    let pass = net.forward(batch).expect("forward");
    loss.evaluate(&pass.logits, targets).expect("loss").0
}

/// Compares analytic gradients against `(L(p+h) - L(p-h)) / (2h)` for every
/// parameter; returns the worst `|analytic - fd| / max(floor, |fd|)`.
pub fn check_all(net: &ConvNet, batch: &Tensor, targets: &[f32], loss: LossKind, step: f32, floor: f64) -> GradCheck {
    let pass = net.forward(batch).unwrap();
    let (_, d_logits) = loss.evaluate(&pass.logits, targets).unwrap();
    let analytic = net.backward(&pass, &d_logits).unwrap();

    let mut probe = net.clone();
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_at: (0, 0),
    };
    for t in 0..net.params().len() {
        for j in 0..net.params()[t].len() {
            let orig = net.params()[t].data()[j];
            let plus = orig + step;
            let minus = orig - step;
            probe.params_mut()[t].data_mut()[j] = plus;
            let lp = loss_at(&probe, batch, targets, loss);
            probe.params_mut()[t].data_mut()[j] = minus;
            let lm = loss_at(&probe, batch, targets, loss);
            probe.params_mut()[t].data_mut()[j] = orig;
            // Divide by the step actually taken after f32 rounding.
            let fd = (lp - lm) / (f64::from(plus) - f64::from(minus));
            let a = f64::from(analytic.params[t].data()[j]);
            let rel = (a - fd).abs() / fd.abs().max(floor);
            if rel > out.worst {
                out.worst = rel;
                out.worst_at = (t, j);
            }
            out.checked += 1;
        }
    }
    out
}

/// Small two-block network on an 8x8 input with random inputs and targets.
pub fn random_case(head: Head, seed: u64) -> (ConvNet, Tensor, Vec<f32>) {
    let cfg = NetConfig {
        in_channels: 3,
        input_height: 8,
        input_width: 8,
        blocks: vec![3, 4],
        head,
    };
    let net = ConvNet::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let n = 2;
    let batch = Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| normal.sample(&mut rng)).collect()).unwrap();
    let unit = Uniform::new(0.0f32, 1.0).unwrap();
    let targets = match head {
        Head::Regression => (0..n).map(|_| unit.sample(&mut rng)).collect(),
        Head::Segmentation => (0..n * 64).map(|_| if unit.sample(&mut rng) > 0.5 { 1.0 } else { 0.0 }).collect(),
    };
    (net, batch, targets)
}
