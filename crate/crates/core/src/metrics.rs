//! Agreement between predicted and reference vegetation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, BinaryMask};

/// Pixel confusion counts with vegetation as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        raster::require_same_dims(pred, truth, "confusion")?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Vegetation IoU; two empty masks agree perfectly.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

/// Per-image comparison. Mask-level fields are absent when only GVI
/// estimates were compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Confusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub gvi_true: f64,
    pub gvi_pred: f64,
    /// `gvi_pred - gvi_true`.
    pub delta: f64,
}

pub fn eval_pair(image_id: &str, pred: &BinaryMask, truth: &BinaryMask) -> Result<ImageEval> {
    let c = Confusion::of(pred, truth)?;
    let m = c.total() as f64;
    let pred_count = c.tp + c.fp;
    let true_count = c.tp + c.fn_;
    Ok(ImageEval {
        image_id: image_id.to_string(),
        counts: Some(c),
        iou: Some(c.iou()),
        gvi_true: true_count as f64 / m,
        gvi_pred: pred_count as f64 / m,
        // Integer difference first so the sign and zero are exact.
        delta: (pred_count as i64 - true_count as i64) as f64 / m,
    })
}

pub fn eval_gvi(image_id: &str, gvi_pred: f64, gvi_true: f64) -> Result<ImageEval> {
    for (name, v) in [("predicted", gvi_pred), ("reference", gvi_true)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::validation(format!("{name} GVI {v} for {image_id} is outside [0, 1]")));
        }
    }
    Ok(ImageEval {
        image_id: image_id.to_string(),
        counts: None,
        iou: None,
        gvi_true,
        gvi_pred,
        delta: gvi_pred - gvi_true,
    })
}

fn require_nonempty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::validation(format!("{what} needs at least one value")))
    } else {
        Ok(())
    }
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    require_nonempty(xs, "mean")?;
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn mean_iou(ious: &[f64]) -> Result<f64> {
    require_nonempty(ious, "mean IoU")?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn mean_abs_error(deltas: &[f64]) -> Result<f64> {
    require_nonempty(deltas, "mean absolute error")?;
    Ok(deltas.iter().map(|d| d.abs()).sum::<f64>() / deltas.len() as f64)
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::validation(format!("pearson_r: lengths differ ({} vs {})", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two pairs".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::UndefinedCorrelation("one of the series is constant".into()));
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Linear-interpolation quantile on the sorted sample, position
/// `q * (n - 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> Result<f64> {
    require_nonempty(sorted, "quantile")?;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::validation(format!("quantile {q} is outside [0, 1]")));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// 5th and 95th percentiles of the signed errors.
pub fn error_band(deltas: &[f64]) -> Result<(f64, f64)> {
    if deltas.len() < 2 {
        return Err(Error::validation("error band needs at least two images"));
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile(&sorted, 0.05)?, quantile(&sorted, 0.95)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    pub mean_abs_error: f64,
    /// Absent when undefined (fewer than two images or a constant series).
    pub pearson_r: Option<f64>,
    pub err_q05: Option<f64>,
    pub err_q95: Option<f64>,
    pub per_image: Vec<ImageEval>,
}

impl EvalReport {
    /// Aggregates per-image results; mean IoU is reported only when every
    /// image carries one.
    pub fn from_evals(mut per_image: Vec<ImageEval>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::validation("evaluation set is empty"));
        }
        per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let deltas: Vec<f64> = per_image.iter().map(|e| e.delta).collect();
        let ious: Option<Vec<f64>> = per_image.iter().map(|e| e.iou).collect();
        let pred: Vec<f64> = per_image.iter().map(|e| e.gvi_pred).collect();
        let truth: Vec<f64> = per_image.iter().map(|e| e.gvi_true).collect();
        let pearson = match pearson_r(&pred, &truth) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(why)) => {
                log::warn!("correlation undefined: {why}");
                None
            }
            Err(e) => return Err(e),
        };
        let band = error_band(&deltas).ok();
        Ok(Self {
            n: per_image.len(),
            mean_iou: ious.map(|v| mean_iou(&v)).transpose()?,
            mean_abs_error: mean_abs_error(&deltas)?,
            pearson_r: pearson,
            err_q05: band.map(|b| b.0),
            err_q95: band.map(|b| b.1),
            per_image,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Codec(format!("csv: {e}"));
        w.write_record(["image_id", "tp", "fp", "fn", "tn", "iou", "gvi_true", "gvi_pred", "delta"])
            .map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for e in &self.per_image {
            let c = e.counts;
            w.write_record([
                e.image_id.clone(),
                opt(c.map(|c| c.tp.to_string())),
                opt(c.map(|c| c.fp.to_string())),
                opt(c.map(|c| c.fn_.to_string())),
                opt(c.map(|c| c.tn.to_string())),
                opt(e.iou.map(|v| v.to_string())),
                e.gvi_true.to_string(),
                e.gvi_pred.to_string(),
                e.delta.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Codec(format!("csv: {e}")))?;
        Ok(())
    }
}
