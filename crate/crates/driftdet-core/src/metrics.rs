//! Evaluation: IoU matching, AP@0.5 under two interpolation conventions,
//! baseline/oracle gap coverage, and Fréchet feature distance.
//!
//! Matching is per class, greedy by descending score (ties broken by
//! detection id), each ground truth matchable once, TP iff IoU >= threshold.
//! Classes without ground truth are reported as undefined and excluded from
//! the mean.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{context, AccessLog};
use crate::error::{Error, Result};
use crate::manifest::Dataset;
use crate::model::{decode, forward, nms, params_hash, DetectorParams};
use crate::types::BoundingBox;

/// Intersection-over-union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// One scored detection, evaluation-side.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    /// Global id; breaks score ties deterministically.
    pub det_id: u64,
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone)]
pub struct GroundTruthRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Mean interpolated precision at recalls {0.0, 0.1, ..., 1.0}.
    Voc11,
    /// Area under the monotone precision envelope.
    AllPoint,
}

/// Per-class AP plus the mean over classes that have ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` marks classes with zero ground-truth instances.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    pub classes_counted: usize,
}

/// Sort detections of one class by descending score, det id on ties.
fn sorted_class_dets<'a>(
    dets: &'a [DetectionRecord],
    class_id: usize,
) -> Vec<&'a DetectionRecord> {
    let mut v: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class_id == class_id).collect();
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.det_id.cmp(&b.det_id))
    });
    v
}

/// Greedy matching over pre-sorted detections: TP flags in detection order.
fn match_greedy(
    sorted: &[&DetectionRecord],
    gts: &[&GroundTruthRecord],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    sorted
        .iter()
        .map(|det| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if used[gi] || gt.image_id != det.image_id {
                    continue;
                }
                let v = det.bbox.iou(&gt.bbox);
                if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Cumulative precision/recall points, one per detection prefix.
fn pr_points(tp_flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    tp_flags
        .iter()
        .map(|&is_tp| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            (tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// AP of one class from its PR points (recalls non-decreasing).
pub fn ap_from_pr(points: &[(f64, f64)], mode: ApMode) -> f64 {
    match mode {
        ApMode::Voc11 => {
            let mut total = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p = points
                    .iter()
                    .filter(|(rec, _)| *rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0f64, f64::max);
                total += p;
            }
            total / 11.0
        }
        ApMode::AllPoint => {
            // Monotone envelope from the right, then integrate over recall.
            let mut env = vec![0.0; points.len()];
            let mut run = 0.0f64;
            for (i, (_, p)) in points.iter().enumerate().rev() {
                run = run.max(*p);
                env[i] = run;
            }
            let mut area = 0.0;
            let mut prev_r = 0.0;
            for (i, (r, _)) in points.iter().enumerate() {
                area += (r - prev_r) * env[i];
                prev_r = *r;
            }
            area
        }
    }
}

/// Per-class AP and mAP at one IoU threshold.
pub fn average_precision(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    iou_threshold: f64,
    mode: ApMode,
    num_classes: usize,
) -> ApResult {
    let mut per_class: Vec<Option<f64>> = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let class_gts: Vec<&GroundTruthRecord> =
            gts.iter().filter(|g| g.class_id == class_id).collect();
        if class_gts.is_empty() {
            per_class.push(None);
            continue;
        }
        let sorted = sorted_class_dets(dets, class_id);
        let tp_flags = match_greedy(&sorted, &class_gts, iou_threshold);
        let points = pr_points(&tp_flags, class_gts.len());
        per_class.push(Some(ap_from_pr(&points, mode)));
    }
    let counted: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    let map = if counted.is_empty() { 0.0 } else { counted.iter().sum::<f64>() / counted.len() as f64 };
    ApResult { per_class, map, classes_counted: counted.len() }
}

/// Fraction of the baseline-to-oracle mAP gap covered by the adapted model.
/// May exceed 1 or be negative.
pub fn coverage(map_baseline: f64, map_adapted: f64, map_oracle: f64) -> Result<f64> {
    if map_oracle == map_baseline {
        return Err(Error::UndefinedCoverage(map_oracle));
    }
    Ok((map_adapted - map_baseline) / (map_oracle - map_baseline))
}

/// Gaussian summary of pooled backbone features over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` unbiased covariance.
    pub covariance: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    /// Build from per-sample feature vectors (unbiased covariance).
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<FeatureStats> {
        let n = vectors.len();
        if n == 0 {
            return Err(Error::config("feature statistics need at least one sample"));
        }
        let dim = vectors[0].len();
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut covariance = vec![0.0; dim * dim];
        if n == 1 {
            log::warn!("single-sample feature statistics: covariance is zero");
        } else {
            for v in vectors {
                for i in 0..dim {
                    let di = v[i] - mean[i];
                    for j in 0..dim {
                        covariance[i * dim + j] += di * (v[j] - mean[j]);
                    }
                }
            }
            let denom = (n - 1) as f64;
            for c in &mut covariance {
                *c /= denom;
            }
        }
        Ok(FeatureStats { dim, mean, covariance, sample_count: n })
    }
}

/// Mean and covariance of globally average-pooled backbone features over all
/// images of a dataset. Labels are never read.
pub fn feature_stats(
    params: &DetectorParams,
    dataset: &Dataset,
    log: &AccessLog,
) -> Result<FeatureStats> {
    if dataset.is_empty() {
        return Err(Error::config("feature statistics over an empty manifest"));
    }
    let pooled: Result<Vec<Vec<f64>>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let sample = dataset.load_unlabeled(i, log, context::FEATURE_STATS)?;
            let (feat, _) = forward(params, &sample.image)?;
            Ok(feat.pooled())
        })
        .collect();
    FeatureStats::from_vectors(&pooled?)
}

fn matrix_sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| {
            if l < -1e-6 {
                log::warn!("matrix square root clamping eigenvalue {l}");
            }
            l.max(0.0).sqrt()
        }),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussian feature summaries:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::config(format!(
            "feature dimension mismatch: {} vs {}",
            a.dim, b.dim
        )));
    }
    let dim = a.dim;
    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = DMatrix::from_row_slice(dim, dim, &a.covariance);
    let sb = DMatrix::from_row_slice(dim, dim, &b.covariance);
    let tr_a: f64 = sa.trace();
    let tr_b: f64 = sb.trace();
    let sqrt_a = matrix_sqrt_psd(&sa);
    let inner = &sqrt_a * &sb * &sqrt_a;
    let sqrt_inner = matrix_sqrt_psd(&inner);
    let d2 = mean_sq + tr_a + tr_b - 2.0 * sqrt_inner.trace();
    Ok(d2.max(0.0))
}

/// Evaluation knobs; defaults follow the reporting conventions used
/// throughout the pipeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub nms_iou: f64,
    pub max_detections_per_image: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { iou_threshold: 0.5, nms_iou: 0.5, max_detections_per_image: 100 }
    }
}

/// Full evaluation output, serialized into reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class_ap_voc11: Vec<Option<f64>>,
    pub per_class_ap_allpoint: Vec<Option<f64>>,
    pub map_voc11: f64,
    pub map_allpoint: f64,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub metadata: BTreeMap<String, String>,
}

/// Run the detector over a labeled dataset and score it in both AP modes.
pub fn evaluate_detector(
    params: &DetectorParams,
    dataset: &Dataset,
    log: &AccessLog,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::config("evaluation over an empty manifest"));
    }
    let num_classes = dataset.manifest.categories.len();

    let per_image: Result<Vec<(u64, Vec<crate::model::Detection>, Vec<GroundTruthRecord>)>> =
        (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                let sample = dataset.load_labeled(i, log, context::EVAL)?;
                let image_id = dataset.image_record(i).id;
                let (_, pred) = forward(params, &sample.image)?;
                let mut dets = nms(&decode(&pred, 0.0), opts.nms_iou);
                dets.truncate(opts.max_detections_per_image);
                let gts = sample
                    .annotations
                    .iter()
                    .map(|a| GroundTruthRecord {
                        image_id,
                        class_id: a.class_id,
                        bbox: a.bbox,
                    })
                    .collect();
                Ok((image_id, dets, gts))
            })
            .collect();
    let per_image = per_image?;

    let mut det_records = Vec::new();
    let mut gt_records = Vec::new();
    let mut det_id = 0u64;
    for (image_id, dets, gts) in per_image {
        for d in dets {
            det_records.push(DetectionRecord {
                det_id,
                image_id,
                class_id: d.class_id,
                score: d.score,
                bbox: d.bbox,
            });
            det_id += 1;
        }
        gt_records.extend(gts);
    }

    let voc11 = average_precision(
        &det_records,
        &gt_records,
        opts.iou_threshold,
        ApMode::Voc11,
        num_classes,
    );
    let allpoint = average_precision(
        &det_records,
        &gt_records,
        opts.iou_threshold,
        ApMode::AllPoint,
        num_classes,
    );

    let mut metadata = BTreeMap::new();
    metadata.insert("params_hash".to_string(), params_hash(params));
    metadata.insert(
        "zero_gt_classes_excluded".to_string(),
        voc11.per_class.iter().filter(|a| a.is_none()).count().to_string(),
    );
    Ok(EvalReport {
        class_names: dataset.manifest.categories.iter().map(|c| c.name.clone()).collect(),
        per_class_ap_voc11: voc11.per_class,
        per_class_ap_allpoint: allpoint.per_class,
        map_voc11: voc11.map,
        map_allpoint: allpoint.map,
        num_images: dataset.len(),
        num_detections: det_records.len(),
        num_ground_truth: gt_records.len(),
        metadata,
    })
}
