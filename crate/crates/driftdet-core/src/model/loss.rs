//! Detection loss: objectness BCE over all cells, class cross-entropy and
//! smooth-L1 box regression over positive cells.
//!
//! Reductions: objectness is averaged over every grid cell; classification
//! and box terms are averaged over positive cells (zero when a scene has no
//! objects). A cell is positive when a ground-truth box center falls in it;
//! if two boxes share a cell the larger one wins.

use serde::{Deserialize, Serialize};

use super::net::stable_softmax;
use super::postprocess::{encode_box, sigmoid};
use super::{PredGrads, RawPrediction};
use crate::types::Annotation;

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub objectness: f64,
    pub classification: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { objectness: 1.0, classification: 1.0, bbox: 1.0 }
    }
}

/// Unweighted loss terms; all non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub objectness: f64,
    pub classification: f64,
    pub bbox: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.objectness + self.classification + self.bbox
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.objectness * self.objectness + w.classification * self.classification + w.bbox * self.bbox
    }
}

/// How the classification term treats each annotation's label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassLossMode {
    /// One-hot cross-entropy for every annotation.
    Hard,
    /// Annotations carrying stored logits contribute a mixed target
    /// `alpha * one_hot + (1 - alpha) * softmax(logits / temperature)`;
    /// others fall back to hard.
    Mixed { temperature: f64, alpha: f64 },
}

/// One positive cell with its regression and classification targets.
#[derive(Debug, Clone)]
pub struct PositiveCell {
    pub cell: usize,
    pub class_id: usize,
    pub deltas: [f64; 4],
    pub annotation_index: usize,
}

/// Center-cell assignment; area breaks ties.
pub fn assign_targets(pred: &RawPrediction, annotations: &[Annotation]) -> Vec<PositiveCell> {
    let mut by_cell: Vec<Option<usize>> = vec![None; pred.cells()];
    for (ai, ann) in annotations.iter().enumerate() {
        let (cx, cy) = ann.bbox.center();
        let gx = ((cx / pred.stride as f64) as usize).min(pred.grid_w - 1);
        let gy = ((cy / pred.stride as f64) as usize).min(pred.grid_h - 1);
        let cell = gy * pred.grid_w + gx;
        match by_cell[cell] {
            Some(prev) if annotations[prev].bbox.area() >= ann.bbox.area() => {}
            _ => by_cell[cell] = Some(ai),
        }
    }
    by_cell
        .iter()
        .enumerate()
        .filter_map(|(cell, slot)| {
            slot.map(|ai| PositiveCell {
                cell,
                class_id: annotations[ai].class_id,
                deltas: encode_box(&annotations[ai].bbox, cell, pred.grid_w, pred.stride),
                annotation_index: ai,
            })
        })
        .collect()
}

#[inline]
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

#[inline]
fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[inline]
fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// The mixed target distribution an annotation contributes in a given mode.
fn class_target(ann: &Annotation, num_classes: usize, mode: ClassLossMode) -> Vec<f64> {
    let mut one_hot = vec![0.0; num_classes];
    one_hot[ann.class_id] = 1.0;
    match (mode, &ann.class_logits) {
        (ClassLossMode::Mixed { temperature, alpha }, Some(logits)) if alpha < 1.0 => {
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            let soft = stable_softmax(&scaled);
            one_hot
                .iter()
                .zip(&soft)
                .map(|(h, s)| alpha * h + (1.0 - alpha) * s)
                .collect()
        }
        _ => one_hot,
    }
}

/// Compute loss components only.
pub fn detection_loss(pred: &RawPrediction, annotations: &[Annotation]) -> LossComponents {
    detection_loss_impl(pred, annotations, ClassLossMode::Hard, None).0
}

/// Compute components and gradients of the weighted total w.r.t. head outputs.
pub fn detection_loss_grad(
    pred: &RawPrediction,
    annotations: &[Annotation],
    weights: &LossWeights,
    mode: ClassLossMode,
) -> (LossComponents, PredGrads) {
    let (c, g) = detection_loss_impl(pred, annotations, mode, Some(weights));
    (c, g.expect("gradients requested"))
}

fn detection_loss_impl(
    pred: &RawPrediction,
    annotations: &[Annotation],
    mode: ClassLossMode,
    weights: Option<&LossWeights>,
) -> (LossComponents, Option<PredGrads>) {
    let cells = pred.cells();
    let positives = assign_targets(pred, annotations);
    let mut grads = weights.map(|_| PredGrads::zeros(pred));

    let mut is_positive = vec![false; cells];
    for p in &positives {
        is_positive[p.cell] = true;
    }

    // Objectness BCE, averaged over every cell.
    let obj_scale = 1.0 / cells as f64;
    let mut obj_loss = 0.0;
    for cell in 0..cells {
        let y = if is_positive[cell] { 1.0 } else { 0.0 };
        let z = pred.objectness[cell];
        obj_loss += bce_with_logit(z, y);
        if let (Some(g), Some(w)) = (grads.as_mut(), weights) {
            g.dobj[cell] = w.objectness * obj_scale * (sigmoid(z) - y);
        }
    }
    obj_loss *= obj_scale;

    // Classification and box terms, averaged over positive cells.
    let mut cls_loss = 0.0;
    let mut box_loss = 0.0;
    if !positives.is_empty() {
        let pos_scale = 1.0 / positives.len() as f64;
        for p in &positives {
            let logits = pred.class_logits_at(p.cell);
            let q = stable_softmax(&logits);
            let target = class_target(&annotations[p.annotation_index], pred.num_classes, mode);
            let mut cell_loss = 0.0;
            for k in 0..pred.num_classes {
                if target[k] > 0.0 {
                    let qk = q[k];
                    if qk < LOG_CLAMP {
                        log::warn!("class probability clamped at {LOG_CLAMP} in loss");
                    }
                    cell_loss -= target[k] * qk.max(LOG_CLAMP).ln();
                }
            }
            cls_loss += cell_loss;
            if let (Some(g), Some(w)) = (grads.as_mut(), weights) {
                for k in 0..pred.num_classes {
                    g.dcls[k * cells + p.cell] =
                        w.classification * pos_scale * (q[k] - target[k]);
                }
            }

            for coord in 0..4 {
                let d = pred.delta(coord, p.cell) - p.deltas[coord];
                box_loss += smooth_l1(d);
                if let (Some(g), Some(w)) = (grads.as_mut(), weights) {
                    g.dbox[coord * cells + p.cell] = w.bbox * pos_scale * smooth_l1_grad(d);
                }
            }
        }
        cls_loss *= pos_scale;
        box_loss *= pos_scale;
    }

    (
        LossComponents { objectness: obj_loss, classification: cls_loss, bbox: box_loss },
        grads,
    )
}
