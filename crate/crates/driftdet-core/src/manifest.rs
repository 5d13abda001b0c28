//! COCO-style dataset manifests and image storage.
//!
//! A manifest is a JSON file with `images`, `annotations` (bbox as
//! `[x_min, y_min, width, height]`), and `categories`. Image payloads live
//! next to it as 8-bit PNGs; pixel values are quantized on write and
//! dequantized to `[0,1]` reals on read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::AccessLog;
use crate::error::{Error, Result};
use crate::types::{Annotation, BoundingBox, Domain, Provenance, RgbImage, Sample};

pub const CATEGORY_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub domain: Domain,
    pub scene_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// `[x_min, y_min, width, height]`.
    pub bbox: [f64; 4],
    pub category_id: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

impl ManifestAnnotation {
    pub fn to_annotation(&self) -> Result<Annotation> {
        let [x, y, w, h] = self.bbox;
        Ok(Annotation {
            bbox: BoundingBox::new(x, y, x + w, y + h)?,
            class_id: self.category_id,
            provenance: self.provenance,
            score: self.score,
            class_logits: self.logits.clone(),
        })
    }

    pub fn from_annotation(id: u64, image_id: u64, a: &Annotation) -> Self {
        ManifestAnnotation {
            id,
            image_id,
            bbox: [a.bbox.x_min, a.bbox.y_min, a.bbox.width(), a.bbox.height()],
            category_id: a.class_id,
            provenance: a.provenance,
            score: a.score,
            logits: a.class_logits.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

pub fn default_categories() -> Vec<Category> {
    CATEGORY_NAMES
        .iter()
        .enumerate()
        .map(|(id, name)| Category { id, name: (*name).to_string() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ManifestImage>,
    pub annotations: Vec<ManifestAnnotation>,
    pub categories: Vec<Category>,
}

impl DatasetManifest {
    pub fn empty() -> Self {
        DatasetManifest {
            images: Vec::new(),
            annotations: Vec::new(),
            categories: default_categories(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id) {
                return Err(Error::internal(format!("duplicate image id {}", img.id)));
            }
        }
        let mut ann_seen = std::collections::HashSet::new();
        for ann in &self.annotations {
            if !ann_seen.insert(ann.id) {
                return Err(Error::internal(format!("duplicate annotation id {}", ann.id)));
            }
            if !seen.contains(&ann.image_id) {
                return Err(Error::data(format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                )));
            }
            ann.to_annotation()?.validate(self.categories.len())?;
        }
        Ok(())
    }
}

/// A manifest bound to its directory, with audited sample loading.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    anns_by_image: BTreeMap<u64, Vec<usize>>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::UnreadableFile {
            path: manifest_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        Self::from_manifest(manifest, manifest_path)
    }

    pub fn from_manifest(manifest: DatasetManifest, manifest_path: &Path) -> Result<Self> {
        manifest.validate()?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut anns_by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, ann) in manifest.annotations.iter().enumerate() {
            anns_by_image.entry(ann.image_id).or_default().push(i);
        }
        Ok(Dataset {
            manifest,
            root,
            manifest_path: manifest_path.to_path_buf(),
            anns_by_image,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn image_record(&self, idx: usize) -> &ManifestImage {
        &self.manifest.images[idx]
    }

    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.manifest.images[idx].file)
    }

    fn annotations_for(&self, image_id: u64) -> Result<Vec<Annotation>> {
        self.anns_by_image
            .get(&image_id)
            .map(|ids| {
                ids.iter()
                    .map(|&i| self.manifest.annotations[i].to_annotation())
                    .collect()
            })
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    /// Load image plus annotations; records whether ground-truth labels were served.
    pub fn load_labeled(&self, idx: usize, log: &AccessLog, ctx: &str) -> Result<Sample> {
        let rec = self.image_record(idx);
        let annotations = self.annotations_for(rec.id)?;
        let gt_read = annotations
            .iter()
            .any(|a| a.provenance == Provenance::GroundTruth);
        let path = self.image_path(idx);
        log.record(ctx, &path, rec.domain, gt_read);
        let image = load_png(&path)?;
        Ok(Sample {
            image,
            annotations,
            domain: rec.domain,
            scene_seed: rec.scene_seed,
        })
    }

    /// Load image only; annotations on disk are never touched.
    pub fn load_unlabeled(&self, idx: usize, log: &AccessLog, ctx: &str) -> Result<Sample> {
        let rec = self.image_record(idx);
        let path = self.image_path(idx);
        log.record(ctx, &path, rec.domain, false);
        let image = load_png(&path)?;
        Ok(Sample {
            image,
            annotations: Vec::new(),
            domain: rec.domain,
            scene_seed: rec.scene_seed,
        })
    }

    /// Total ground-truth instances per class, for evaluation denominators.
    pub fn class_instance_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.manifest.categories.len()];
        for ann in &self.manifest.annotations {
            if ann.category_id < counts.len() {
                counts[ann.category_id] += 1;
            }
        }
        counts
    }
}

/// Write an image as 8-bit RGB PNG, quantizing `[0,1]` reals to bytes.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::internal("png buffer size mismatch".to_string()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Read an 8-bit RGB PNG back into `[0,1]` reals.
pub fn load_png(path: &Path) -> Result<RgbImage> {
    let dynimg = image::open(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(RgbImage { width: w, height: h, data })
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::context;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(8, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let path = dir.path().join("x.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.width, 8);
        assert_eq!(back.height, 5);
        // Values are already exactly on the 1/255 grid, so the trip is lossless.
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn labeled_load_records_gt_access() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::filled(16, 16, [0.5, 0.5, 0.5]);
        save_png(&img, &dir.path().join("im0.png")).unwrap();
        let manifest = DatasetManifest {
            images: vec![ManifestImage {
                id: 0,
                file: "im0.png".into(),
                width: 16,
                height: 16,
                domain: Domain::Target,
                scene_seed: 1,
                source_image_id: None,
            }],
            annotations: vec![ManifestAnnotation {
                id: 0,
                image_id: 0,
                bbox: [1.0, 1.0, 4.0, 4.0],
                category_id: 0,
                provenance: Provenance::GroundTruth,
                score: None,
                logits: None,
            }],
            categories: default_categories(),
        };
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let ds = Dataset::load(&mpath).unwrap();
        let log = AccessLog::new();
        let s = ds.load_labeled(0, &log, context::EVAL).unwrap();
        assert_eq!(s.annotations.len(), 1);
        let ev = log.events();
        assert_eq!(ev.len(), 1);
        assert!(ev[0].gt_labels_read);
        let s2 = ds.load_unlabeled(0, &log, context::TRAIN_TEACHER).unwrap();
        assert!(s2.annotations.is_empty());
        assert!(!log.events()[1].gt_labels_read);
    }
}
