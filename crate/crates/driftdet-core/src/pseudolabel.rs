//! Output-level adaptation: run the teacher over unlabeled target images,
//! keep confident detections as pseudo-labels, and assemble the joint
//! student dataset.
//!
//! Thresholding happens after NMS so the count sweep is duplicate-free; the
//! comparison is `>=` (a score exactly at the threshold is kept). By default
//! the thresholded quantity is the objectness probability alone; the
//! combined `objectness * class_prob` score is available as an option.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{context, AccessLog};
use crate::error::{Error, Result};
use crate::manifest::{file_sha256, Dataset, DatasetManifest, ManifestAnnotation, ManifestImage};
use crate::model::{decode, forward, nms, stable_softmax, ClassLossMode, DetectorParams};
use crate::types::Provenance;
use crate::util::relative_path;

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Hard,
    Soft,
}

/// Which per-detection quantity the threshold applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdOn {
    Objectness,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    /// Objectness threshold in [0,1].
    pub tau: f64,
    pub label_mode: LabelMode,
    /// Softmax temperature for soft labels.
    pub temperature: f64,
    /// Mixing weight between the hard one-hot and the soft distribution.
    pub alpha: f64,
    pub threshold_on: ThresholdOn,
    pub nms_iou: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            tau: 0.5,
            label_mode: LabelMode::Hard,
            temperature: 1.0,
            alpha: 1.0,
            threshold_on: ThresholdOn::Objectness,
            nms_iou: 0.5,
        }
    }
}

impl PseudoLabelConfig {
    pub fn soft(temperature: f64) -> Self {
        PseudoLabelConfig {
            label_mode: LabelMode::Soft,
            temperature,
            alpha: 0.5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau {} outside [0,1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("nms iou threshold outside [0,1]".to_string()));
        }
        if self.alpha == 0.0 {
            log::warn!("alpha = 0 drops the hard-label term entirely; training may be unstable");
        }
        Ok(())
    }

    /// The class-loss treatment student training should use.
    pub fn class_loss_mode(&self) -> ClassLossMode {
        match self.label_mode {
            LabelMode::Hard => ClassLossMode::Hard,
            LabelMode::Soft => {
                ClassLossMode::Mixed { temperature: self.temperature, alpha: self.alpha }
            }
        }
    }
}

/// Temperature-scaled softmax: `exp(z_i/T) / sum_j exp(z_j/T)`.
pub fn soft_distribution(class_logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    let scaled: Vec<f64> = class_logits.iter().map(|z| z / temperature).collect();
    Ok(stable_softmax(&scaled))
}

/// Negative mixed cross-entropy `-sum_i (alpha p_i + (1-alpha) p_hat_i) ln q_i`.
/// At `alpha = 1` this is exactly the hard cross-entropy `-ln q[true]`.
pub fn mixed_classification_loss(q: &[f64], p: &[f64], p_hat: &[f64], alpha: f64) -> f64 {
    debug_assert_eq!(q.len(), p.len());
    debug_assert_eq!(q.len(), p_hat.len());
    let clamped_ln = |v: f64| {
        if v < LOG_CLAMP {
            log::warn!("class probability clamped at {LOG_CLAMP} in mixed loss");
        }
        v.max(LOG_CLAMP).ln()
    };
    if alpha == 1.0 {
        let true_idx = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        return -clamped_ln(q[true_idx]);
    }
    let mut loss = 0.0;
    for i in 0..q.len() {
        let weight = alpha * p[i] + (1.0 - alpha) * p_hat[i];
        if weight > 0.0 {
            loss -= weight * clamped_ln(q[i]);
        }
    }
    loss
}

/// Provenance record written beside every pseudo manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoSidecar {
    pub tau: f64,
    pub label_mode: LabelMode,
    pub temperature: f64,
    pub alpha: f64,
    pub teacher_checkpoint_hash: String,
    pub kept_count: usize,
    pub total_count: usize,
}

/// Output of pseudo-label generation.
#[derive(Debug)]
pub struct PseudoDataset {
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub sidecar: PseudoSidecar,
}

/// Run the teacher over every target image: forward, decode, NMS, keep
/// detections clearing the threshold. Target annotations are never read.
pub fn generate_pseudo_labels(
    teacher: &DetectorParams,
    target: &Dataset,
    config: &PseudoLabelConfig,
    teacher_checkpoint: Option<&Path>,
    log: &AccessLog,
    out_dir: &Path,
) -> Result<PseudoDataset> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let out_abs = std::fs::canonicalize(out_dir)?;

    let per_image: Result<Vec<(Vec<ManifestAnnotation>, usize)>> = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let sample = target.load_unlabeled(i, log, context::PSEUDO_LABEL)?;
            let (_, pred) = forward(teacher, &sample.image)?;
            let candidates = nms(&decode(&pred, 0.0), config.nms_iou);
            let n_candidates = candidates.len();
            let mut anns = Vec::new();
            for det in candidates {
                let gate = match config.threshold_on {
                    ThresholdOn::Objectness => det.objectness,
                    ThresholdOn::Score => det.score,
                };
                if gate < config.tau {
                    continue;
                }
                let logits = (config.label_mode == LabelMode::Soft)
                    .then(|| pred.class_logits_at(det.cell));
                anns.push(ManifestAnnotation {
                    id: 0, // re-keyed below
                    image_id: target.image_record(i).id,
                    bbox: [
                        det.bbox.x_min,
                        det.bbox.y_min,
                        det.bbox.width(),
                        det.bbox.height(),
                    ],
                    category_id: det.class_id,
                    provenance: Provenance::Pseudo,
                    score: Some(gate),
                    logits,
                });
            }
            Ok((anns, n_candidates))
        })
        .collect();
    let per_image = per_image?;

    let mut manifest = DatasetManifest {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: target.manifest.categories.clone(),
    };
    let target_root = std::fs::canonicalize(&target.root)?;
    let mut total_count = 0usize;
    let mut ann_id = 0u64;
    for (i, (anns, n_candidates)) in per_image.into_iter().enumerate() {
        let rec = target.image_record(i);
        let file_abs = target_root.join(&rec.file);
        manifest.images.push(ManifestImage {
            id: rec.id,
            file: relative_path(&out_abs, &file_abs).to_string_lossy().into_owned(),
            width: rec.width,
            height: rec.height,
            domain: rec.domain,
            scene_seed: rec.scene_seed,
            source_image_id: rec.source_image_id,
        });
        total_count += n_candidates;
        for mut ann in anns {
            ann.id = ann_id;
            ann_id += 1;
            manifest.annotations.push(ann);
        }
    }

    let teacher_hash = match teacher_checkpoint {
        Some(p) => file_sha256(p)?,
        None => crate::model::params_hash(teacher),
    };
    let sidecar = PseudoSidecar {
        tau: config.tau,
        label_mode: config.label_mode,
        temperature: config.temperature,
        alpha: config.alpha,
        teacher_checkpoint_hash: teacher_hash,
        kept_count: manifest.annotations.len(),
        total_count,
    };

    let manifest_path = out_dir.join("pseudo.json");
    manifest.save(&manifest_path)?;
    let sidecar_path = out_dir.join("pseudo_meta.json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(PseudoDataset { manifest_path, sidecar_path, sidecar })
}

/// Concatenate the translated (or source) split with the pseudo-labeled
/// target split into one re-keyed manifest for student training.
pub fn build_student_dataset(
    labeled: &Dataset,
    pseudo: &Dataset,
    out_path: &Path,
) -> Result<Dataset> {
    if labeled.manifest.categories != pseudo.manifest.categories {
        return Err(Error::config("student dataset halves disagree on categories"));
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let out_dir = std::fs::canonicalize(out_path.parent().unwrap_or(Path::new(".")))?;

    let mut manifest = DatasetManifest {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: labeled.manifest.categories.clone(),
    };
    let mut img_id = 0u64;
    let mut ann_id = 0u64;
    for ds in [labeled, pseudo] {
        let root = std::fs::canonicalize(&ds.root)?;
        let mut id_map = std::collections::BTreeMap::new();
        for img in &ds.manifest.images {
            let file_abs = root.join(&img.file);
            id_map.insert(img.id, img_id);
            manifest.images.push(ManifestImage {
                id: img_id,
                file: relative_path(&out_dir, &file_abs).to_string_lossy().into_owned(),
                width: img.width,
                height: img.height,
                domain: img.domain,
                scene_seed: img.scene_seed,
                source_image_id: None,
            });
            img_id += 1;
        }
        for ann in &ds.manifest.annotations {
            let image_id = *id_map.get(&ann.image_id).ok_or_else(|| {
                Error::internal(format!("annotation {} orphaned during merge", ann.id))
            })?;
            manifest.annotations.push(ManifestAnnotation {
                id: ann_id,
                image_id,
                ..ann.clone()
            });
            ann_id += 1;
        }
    }

    let mut seen = std::collections::HashSet::new();
    for img in &manifest.images {
        if !seen.insert(img.id) {
            return Err(Error::internal(format!("image id {} collides after re-keying", img.id)));
        }
    }
    manifest.save(out_path)?;
    Dataset::load(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::AccessLog;
    use crate::model::{
        backward, detection_loss_grad, forward_cached, DetectorGrads, LossWeights, ModelConfig,
    };
    use crate::optim::{sgd_step, SgdHyper};
    use crate::scenegen::{adverse_weather, generate_dataset, GenOptions, SplitSizes};

    #[test]
    fn soft_distribution_analytic_cases() {
        let p = soft_distribution(&[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let p = soft_distribution(&[4.0f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.2).abs() < 1e-12);

        let p = soft_distribution(&[4.0f64.ln(), 0.0], 2.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);

        let p = soft_distribution(&[4.0f64.ln(), 0.0], 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-5);
        assert!((p[1] - 0.5).abs() < 1e-5);

        assert!(soft_distribution(&[0.0], 0.0).is_err());
        assert!(soft_distribution(&[0.0], -1.0).is_err());
    }

    #[test]
    fn soft_distribution_sums_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 40.0 - 20.0).collect();
            let t = 0.1 + rng.gen::<f64>() * 10.0;
            let p = soft_distribution(&z, t).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn mixed_loss_alpha_one_is_hard_cross_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let q = stable_softmax(&z);
            let true_idx = rng.gen_range(0..3);
            let mut p = vec![0.0; 3];
            p[true_idx] = 1.0;
            let p_hat = soft_distribution(&z, 2.0).unwrap();
            let mixed = mixed_classification_loss(&q, &p, &p_hat, 1.0);
            let hard = -q[true_idx].max(1e-12).ln();
            assert_eq!(mixed.to_bits(), hard.to_bits(), "bit-exact at alpha=1");
        }
    }

    #[test]
    fn mixed_loss_reference_value() {
        // 0.5 * (-ln 0.8) + 0.5 * (-0.8 ln 0.8 - 0.2 ln 0.2) = 0.36177...
        let q = [0.8, 0.2];
        let p = [1.0, 0.0];
        let p_hat = [0.8, 0.2];
        let got = mixed_classification_loss(&q, &p, &p_hat, 0.5);
        let want = 0.5 * (-(0.8f64.ln())) + 0.5 * (-(0.8 * 0.8f64.ln()) - 0.2 * 0.2f64.ln());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.36177).abs() < 1e-4);
    }

    #[test]
    fn mixed_loss_alpha_free_when_soft_equals_hard() {
        let q = [0.6, 0.3, 0.1];
        let p = [0.0, 1.0, 0.0];
        for alpha in [0.0, 0.3, 0.7, 1.0] {
            let l = mixed_classification_loss(&q, &p, &p, alpha);
            assert!((l - -(0.3f64.ln())).abs() < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(PseudoLabelConfig { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(PseudoLabelConfig { temperature: 0.0, label_mode: LabelMode::Soft, ..Default::default() }
            .validate()
            .is_err());
        assert!(PseudoLabelConfig::default().validate().is_ok());
        assert!(PseudoLabelConfig { alpha: 0.0, ..Default::default() }.validate().is_ok());
    }

    fn train_tiny_teacher(src: &Dataset, log: &AccessLog) -> DetectorParams {
        let config = ModelConfig { num_classes: 3, channels: [6, 6, 8, 8], strides: [2, 2, 2, 1] };
        let mut params = DetectorParams::init(&config, 9);
        let mut bufs = DetectorGrads::zeros_like(&params);
        let weights = LossWeights::default();
        let hyper = SgdHyper { momentum: 0.9, weight_decay: 0.0 };
        for step in 0..200 {
            let sample = src.load_labeled(step % src.len(), log, "test-train").unwrap();
            let (cache, _, pred) = forward_cached(&params, &sample.image).unwrap();
            let (_, pg) = detection_loss_grad(
                &pred,
                &sample.annotations,
                &weights,
                crate::model::ClassLossMode::Hard,
            );
            let grads = backward(&params, &cache, Some(&pg), None);
            sgd_step(&mut params, &grads, &mut bufs, 0.03, &hyper);
        }
        params
    }

    #[test]
    fn threshold_sweep_is_monotone_and_exhaustive_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes { source_train: 6, target_train: 18, target_val: 2 };
        let opts = GenOptions { image_size: 32, object_range: (1, 2) };
        let out = generate_dataset(&adverse_weather(), sizes, 11, &opts, dir.path()).unwrap();
        let src = Dataset::load(&out.source_train).unwrap();
        let tgt = Dataset::load(&out.target_train).unwrap();
        let log = AccessLog::new();
        let teacher = train_tiny_teacher(&src, &log);

        let mut counts = Vec::new();
        let mut totals = Vec::new();
        for i in 0..10 {
            let tau = i as f64 / 10.0;
            let cfg = PseudoLabelConfig { tau, ..Default::default() };
            let out_dir = dir.path().join(format!("pl_{i}"));
            let res =
                generate_pseudo_labels(&teacher, &tgt, &cfg, None, &log, &out_dir).unwrap();
            counts.push(res.sidecar.kept_count);
            totals.push(res.sidecar.total_count);
        }
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "kept counts must be non-increasing: {counts:?}");
        }
        // tau = 0 keeps every post-NMS candidate.
        assert_eq!(counts[0], totals[0]);
        assert!(counts[0] > 0);
        // No target ground-truth labels were touched.
        crate::audit::verify_no_target_label_leak(&log.events()).unwrap();
    }

    #[test]
    fn pseudo_manifest_is_loadable_and_scored_above_tau() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes { source_train: 4, target_train: 12, target_val: 2 };
        let opts = GenOptions { image_size: 32, object_range: (1, 2) };
        let out = generate_dataset(&adverse_weather(), sizes, 13, &opts, dir.path()).unwrap();
        let src = Dataset::load(&out.source_train).unwrap();
        let tgt = Dataset::load(&out.target_train).unwrap();
        let log = AccessLog::new();
        let teacher = train_tiny_teacher(&src, &log);

        let cfg = PseudoLabelConfig { tau: 0.3, label_mode: LabelMode::Soft, alpha: 0.5, ..Default::default() };
        let res = generate_pseudo_labels(&teacher, &tgt, &cfg, None, &log, &dir.path().join("pl"))
            .unwrap();
        let ds = Dataset::load(&res.manifest_path).unwrap();
        assert_eq!(ds.len(), tgt.len());
        for ann in &ds.manifest.annotations {
            assert_eq!(ann.provenance, Provenance::Pseudo);
            assert!(ann.score.unwrap() >= 0.3);
            assert!(ann.logits.is_some(), "soft mode stores logits");
        }
        // Images resolve through the relative paths.
        let sample = ds.load_labeled(0, &log, "test").unwrap();
        assert_eq!(sample.image.width, 32);
    }

    #[test]
    fn student_dataset_concatenates_and_rekeys() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes { source_train: 5, target_train: 15, target_val: 2 };
        let opts = GenOptions { image_size: 32, object_range: (1, 2) };
        let out = generate_dataset(&adverse_weather(), sizes, 17, &opts, dir.path()).unwrap();
        let src = Dataset::load(&out.source_train).unwrap();
        let tgt = Dataset::load(&out.target_train).unwrap();
        let log = AccessLog::new();
        let teacher = train_tiny_teacher(&src, &log);
        let cfg = PseudoLabelConfig { tau: 0.2, ..Default::default() };
        let pl = generate_pseudo_labels(&teacher, &tgt, &cfg, None, &log, &dir.path().join("pl"))
            .unwrap();
        let pseudo = Dataset::load(&pl.manifest_path).unwrap();

        let joint =
            build_student_dataset(&src, &pseudo, &dir.path().join("joint/student.json")).unwrap();
        assert_eq!(joint.len(), src.len() + pseudo.len());

        // Provenance histogram adds up.
        let gt_count = joint
            .manifest
            .annotations
            .iter()
            .filter(|a| a.provenance == Provenance::GroundTruth)
            .count();
        let pseudo_count = joint
            .manifest
            .annotations
            .iter()
            .filter(|a| a.provenance == Provenance::Pseudo)
            .count();
        assert_eq!(gt_count, src.manifest.annotations.len());
        assert_eq!(pseudo_count, pseudo.manifest.annotations.len());

        // Ids unique, images loadable from the merged manifest.
        let mut ids: Vec<u64> = joint.manifest.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), joint.len());
        joint.load_labeled(joint.len() - 1, &log, "test").unwrap();
    }

    #[test]
    fn empty_pseudo_set_degenerates_to_labeled_half() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes { source_train: 3, target_train: 9, target_val: 2 };
        let opts = GenOptions { image_size: 32, object_range: (1, 1) };
        let out = generate_dataset(&adverse_weather(), sizes, 19, &opts, dir.path()).unwrap();
        let src = Dataset::load(&out.source_train).unwrap();
        let tgt = Dataset::load(&out.target_train).unwrap();
        let log = AccessLog::new();
        // An untrained detector with tau = 1.0 keeps nothing.
        let config = ModelConfig { num_classes: 3, channels: [6, 6, 8, 8], strides: [2, 2, 2, 1] };
        let teacher = DetectorParams::init(&config, 1);
        let cfg = PseudoLabelConfig { tau: 1.0, ..Default::default() };
        let pl = generate_pseudo_labels(&teacher, &tgt, &cfg, None, &log, &dir.path().join("pl"))
            .unwrap();
        assert_eq!(pl.sidecar.kept_count, 0);
        let pseudo = Dataset::load(&pl.manifest_path).unwrap();
        let joint =
            build_student_dataset(&src, &pseudo, &dir.path().join("joint/student.json")).unwrap();
        let gt_anns = joint
            .manifest
            .annotations
            .iter()
            .filter(|a| a.provenance == Provenance::GroundTruth)
            .count();
        assert_eq!(gt_anns, src.manifest.annotations.len());
        assert_eq!(
            joint.manifest.annotations.len(),
            src.manifest.annotations.len(),
            "no pseudo annotations in the joint set"
        );
    }
}
