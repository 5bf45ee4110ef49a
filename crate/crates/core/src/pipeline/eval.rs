use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{id_mismatch, read_mask, reference_gvi, resolve_result_mask, ImageResult};
use crate::error::{Error, Result};
use crate::imagery::{ImageRecord, Manifest};
use crate::metrics::{self, EvalReport, ImageEval};

/// Scores predictions against a labelled manifest. Masks are compared
/// pixelwise when every prediction and every reference has one; otherwise
/// only GVIs are compared and IoU is absent. `pred_base` is the directory
/// prediction mask paths are relative to.
pub fn run_eval(preds: &[ImageResult], pred_base: &Path, truth: &Manifest) -> Result<EvalReport> {
    if !truth.errors.is_empty() {
        let ids: Vec<String> = truth
            .errors
            .iter()
            .map(|e| e.image_id.clone().unwrap_or_else(|| format!("line {}", e.line.unwrap_or(0))))
            .collect();
        return Err(Error::validation(format!("reference manifest has bad records: {}", ids.join(", "))));
    }
    let by_id: BTreeMap<&str, &ImageRecord> = truth.records.iter().map(|r| (r.image_id(), r)).collect();
    let pred_ids: BTreeSet<&str> = preds.iter().map(|p| p.image_id.as_str()).collect();
    if pred_ids.len() != preds.len() {
        return Err(Error::validation("predictions contain duplicate image ids"));
    }
    let truth_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    let offenders = id_mismatch(&pred_ids, &truth_ids);
    if !offenders.is_empty() {
        return Err(Error::validation(format!(
            "prediction and reference ids differ: {}",
            offenders.join(", ")
        )));
    }

    let pixelwise = preds.iter().all(|p| p.mask_path.is_some()) && truth.records.iter().all(|r| r.mask_path.is_some());
    let evals = preds
        .iter()
        .map(|p| {
            let rec = by_id[p.image_id.as_str()];
            if pixelwise {
                let pred_mask = read_mask(&resolve_result_mask(pred_base, p).expect("checked above"))?;
                let true_mask = read_mask(rec.mask_path.as_ref().expect("checked above"))?;
                metrics::eval_pair(&p.image_id, &pred_mask, &true_mask)
            } else {
                metrics::eval_gvi(&p.image_id, p.gvi, reference_gvi(rec)?)
            }
        })
        .collect::<Result<Vec<ImageEval>>>()?;
    EvalReport::from_evals(evals)
}
