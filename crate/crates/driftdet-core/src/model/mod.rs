//! A minimal single-stage, anchor-free grid detector.
//!
//! Every feature-map cell predicts an objectness logit, class logits and a
//! 4-vector of box-edge offsets from the cell center (in stride units). The
//! network is small enough to train from random init on a CPU, and the whole
//! forward/backward pair is written out by hand so gradients can be checked
//! against finite differences.

mod checkpoint;
mod loss;
mod net;
mod postprocess;

pub use checkpoint::{config_hash, load_checkpoint, params_hash, save_checkpoint, Checkpoint};
pub use loss::{
    assign_targets, detection_loss, detection_loss_grad, ClassLossMode, LossComponents,
    LossWeights, PositiveCell,
};
pub use net::{
    backbone_backward, backbone_forward, stable_softmax, Conv, Conv1x1, DetectorParams,
    ForwardCache, ModelConfig, Tensor,
};
pub use postprocess::{decode, decode_box, encode_box, nms, sigmoid};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{BoundingBox, RgbImage};

/// Backbone output: a `C x H' x W'` grid of features.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn pooled(&self) -> Vec<f64> {
        self.values.global_avg_pool()
    }
}

/// Raw per-cell head outputs, before any nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub num_classes: usize,
    /// `grid_h * grid_w` objectness logits.
    pub objectness: Vec<f64>,
    /// `num_classes * grid_h * grid_w`, planar by class.
    pub class_logits: Vec<f64>,
    /// `4 * grid_h * grid_w`, planar by coordinate.
    pub box_deltas: Vec<f64>,
}

impl RawPrediction {
    #[inline]
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn class_logit(&self, class: usize, cell: usize) -> f64 {
        self.class_logits[class * self.cells() + cell]
    }

    pub fn class_logits_at(&self, cell: usize) -> Vec<f64> {
        (0..self.num_classes).map(|k| self.class_logit(k, cell)).collect()
    }

    #[inline]
    pub fn delta(&self, coord: usize, cell: usize) -> f64 {
        self.box_deltas[coord * self.cells() + cell]
    }
}

/// A decoded candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub objectness: f64,
    pub class_prob: f64,
    /// Ranking score: `objectness * class_prob`.
    pub score: f64,
    /// Originating feature-map cell, for logit lookups.
    pub cell: usize,
}

/// Gradients (or momentum buffers) shaped like [`DetectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGrads {
    /// `(dweight, dbias)` per backbone conv.
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub head_obj: (Vec<f64>, Vec<f64>),
    pub head_cls: (Vec<f64>, Vec<f64>),
    pub head_box: (Vec<f64>, Vec<f64>),
}

impl DetectorGrads {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        DetectorGrads {
            convs: params
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
                .collect(),
            head_obj: (
                vec![0.0; params.head_obj.weight.len()],
                vec![0.0; params.head_obj.bias.len()],
            ),
            head_cls: (
                vec![0.0; params.head_cls.weight.len()],
                vec![0.0; params.head_cls.bias.len()],
            ),
            head_box: (
                vec![0.0; params.head_box.weight.len()],
                vec![0.0; params.head_box.bias.len()],
            ),
        }
    }

    /// Tensors in the same fixed order as `DetectorParams::for_each_tensor`.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::new();
        for (w, b) in &self.convs {
            v.push(w);
            v.push(b);
        }
        for (w, b) in [&self.head_obj, &self.head_cls, &self.head_box] {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for (w, b) in &mut self.convs {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.head_obj.0);
        v.push(&mut self.head_obj.1);
        v.push(&mut self.head_cls.0);
        v.push(&mut self.head_cls.1);
        v.push(&mut self.head_box.0);
        v.push(&mut self.head_box.1);
        v
    }

    pub fn add_scaled(&mut self, other: &DetectorGrads, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

impl DetectorParams {
    /// Parameter tensors in the same fixed order as the gradient store.
    pub fn tensors_mut_vec(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for conv in &mut self.convs {
            v.push(&mut conv.weight);
            v.push(&mut conv.bias);
        }
        v.push(&mut self.head_obj.weight);
        v.push(&mut self.head_obj.bias);
        v.push(&mut self.head_cls.weight);
        v.push(&mut self.head_cls.bias);
        v.push(&mut self.head_box.weight);
        v.push(&mut self.head_box.bias);
        v
    }
}

/// Gradients on the raw head outputs.
#[derive(Debug, Clone)]
pub struct PredGrads {
    pub dobj: Vec<f64>,
    pub dcls: Vec<f64>,
    pub dbox: Vec<f64>,
}

impl PredGrads {
    pub fn zeros(pred: &RawPrediction) -> Self {
        PredGrads {
            dobj: vec![0.0; pred.objectness.len()],
            dcls: vec![0.0; pred.class_logits.len()],
            dbox: vec![0.0; pred.box_deltas.len()],
        }
    }
}

/// Forward pass keeping the activation cache for a later backward.
pub fn forward_cached(
    params: &DetectorParams,
    image: &RgbImage,
) -> Result<(ForwardCache, FeatureMap, RawPrediction)> {
    let cache = backbone_forward(params, image)?;
    let feat = cache.features();
    let stride = params.config.total_stride();
    let obj = params.head_obj.forward(feat);
    let cls = params.head_cls.forward(feat);
    let boxes = params.head_box.forward(feat);
    let pred = RawPrediction {
        grid_h: feat.height,
        grid_w: feat.width,
        stride,
        image_h: image.height,
        image_w: image.width,
        num_classes: params.config.num_classes,
        objectness: obj.data,
        class_logits: cls.data,
        box_deltas: boxes.data,
    };
    let feature_map = FeatureMap { values: feat.clone(), stride };
    Ok((cache, feature_map, pred))
}

/// Deterministic, differentiable forward pass.
pub fn forward(params: &DetectorParams, image: &RgbImage) -> Result<(FeatureMap, RawPrediction)> {
    let (_, feat, pred) = forward_cached(params, image)?;
    Ok((feat, pred))
}

/// Backward pass. `pred_grads` carries detection-loss gradients on the head
/// outputs; `extra_dfeat` is an additional gradient on the feature map (the
/// reversed domain-classifier gradient during teacher training). Heads only
/// receive gradients from `pred_grads`.
pub fn backward(
    params: &DetectorParams,
    cache: &ForwardCache,
    pred_grads: Option<&PredGrads>,
    extra_dfeat: Option<&Tensor>,
) -> DetectorGrads {
    let feat = cache.features();
    let mut grads = DetectorGrads::zeros_like(params);
    let mut dfeat = Tensor::zeros(feat.channels, feat.height, feat.width);

    if let Some(pg) = pred_grads {
        let mk = |data: &Vec<f64>, c: usize| Tensor {
            channels: c,
            height: feat.height,
            width: feat.width,
            data: data.clone(),
        };
        params.head_obj.backward(
            feat,
            &mk(&pg.dobj, 1),
            &mut grads.head_obj.0,
            &mut grads.head_obj.1,
            &mut dfeat,
        );
        params.head_cls.backward(
            feat,
            &mk(&pg.dcls, params.config.num_classes),
            &mut grads.head_cls.0,
            &mut grads.head_cls.1,
            &mut dfeat,
        );
        params.head_box.backward(
            feat,
            &mk(&pg.dbox, 4),
            &mut grads.head_box.0,
            &mut grads.head_box.1,
            &mut dfeat,
        );
    }
    if let Some(extra) = extra_dfeat {
        for (d, e) in dfeat.data.iter_mut().zip(&extra.data) {
            *d += e;
        }
    }
    backbone_backward(params, cache, &dfeat, &mut grads.convs);
    grads
}
