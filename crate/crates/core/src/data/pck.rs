//! PCK metrics.
//!
//! A predicted keypoint counts as correct when its distance to the ground
//! truth, measured in original-image pixels after inverting the crop
//! transform, is at most `alpha * max(bbox_w, bbox_h)`. Invisible keypoints
//! are excluded.

use crate::decode::KeypointPrediction;
use crate::error::{Error, Result};

use super::dataset::{CropTransform, Keypoint};

pub const PCK_ALPHAS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];

/// Ground-truth view of one sample for scoring.
pub struct SampleGt<'a> {
    pub names: &'a [String],
    pub keypoints: &'a [Keypoint],
    pub bbox: [f64; 4],
    pub crop: &'a CropTransform,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PckCounts {
    pub correct: u64,
    pub total: u64,
}

impl PckCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: PckCounts) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

pub fn keypoint_correct(
    pred: (f64, f64),
    gt: (f64, f64),
    crop: &CropTransform,
    bbox: [f64; 4],
    alpha: f64,
) -> bool {
    let (px, py) = crop.apply(pred.0, pred.1);
    let (gx, gy) = crop.apply(gt.0, gt.1);
    let dist = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
    dist <= alpha * bbox[2].max(bbox[3])
}

/// Score one sample's predictions at one threshold, weighted `weight` times
/// (pair-list evaluation counts repeated queries repeatedly). Every visible
/// ground-truth keypoint must have a prediction.
pub fn score_sample(
    predictions: &[KeypointPrediction],
    gt: &SampleGt,
    alpha: f64,
    weight: u64,
) -> Result<PckCounts> {
    let mut counts = PckCounts::default();
    for (name, k) in gt.names.iter().zip(gt.keypoints) {
        if !k.visible {
            continue;
        }
        let pred = predictions
            .iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| Error::MissingPrediction(name.clone()))?;
        counts.total += weight;
        if keypoint_correct((pred.x, pred.y), (k.x, k.y), gt.crop, gt.bbox, alpha) {
            counts.correct += weight;
        }
    }
    Ok(counts)
}

/// Mean of the five per-threshold PCK values.
pub fn mpck(per_alpha: &[f64]) -> f64 {
    debug_assert_eq!(per_alpha.len(), PCK_ALPHAS.len());
    per_alpha.iter().sum::<f64>() / per_alpha.len() as f64
}
