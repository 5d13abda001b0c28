//! Shared domain types: boxes, annotations, images, samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, `min < max` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        if !(x_min < x_max && y_min < y_max) || !b.is_finite() {
            return Err(Error::data(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(b)
    }

    pub fn is_finite(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
    }

    /// Valid for an image of the given size: inside `[0,w] x [0,h]` and non-degenerate.
    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.is_finite()
            && 0.0 <= self.x_min
            && self.x_min < self.x_max
            && self.x_max <= width as f64
            && 0.0 <= self.y_min
            && self.y_min < self.y_max
            && self.y_max <= height as f64
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Intersection-over-union. Zero for disjoint boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        inter / union
    }
}

/// Where an annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

/// Which distribution an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Translated,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Translated => write!(f, "translated"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// One labeled object: a box plus class identity, optionally scored when the
/// label was produced by a model rather than the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_logits: Option<Vec<f64>>,
}

impl Annotation {
    pub fn ground_truth(bbox: BoundingBox, class_id: usize) -> Self {
        Annotation {
            bbox,
            class_id,
            provenance: Provenance::GroundTruth,
            score: None,
            class_logits: None,
        }
    }

    /// Ground-truth annotations must not carry scores or logits.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(Error::data(format!(
                "class_id {} out of range (num_classes={num_classes})",
                self.class_id
            )));
        }
        if self.provenance == Provenance::GroundTruth
            && (self.score.is_some() || self.class_logits.is_some())
        {
            return Err(Error::data(
                "ground-truth annotation carries a score or logits".to_string(),
            ));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::data(format!("annotation score {s} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// RGB image with interleaved `f64` channel values in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` values, pixel-interleaved `[r,g,b]`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = RgbImage::new(width, height);
        for p in img.data.chunks_exact_mut(3) {
            p.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for p in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += p[c];
            }
        }
        let n = (self.width * self.height) as f64;
        sums.map(|s| s / n)
    }

    /// Per-channel population standard deviation.
    pub fn channel_stds(&self) -> [f64; 3] {
        let means = self.channel_means();
        let mut sq = [0.0; 3];
        for p in self.data.chunks_exact(3) {
            for c in 0..3 {
                let d = p[c] - means[c];
                sq[c] += d * d;
            }
        }
        let n = (self.width * self.height) as f64;
        sq.map(|s| (s / n).sqrt())
    }
}

/// One dataset element: image, labels, domain tag, and the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
    pub domain: Domain,
    pub scene_seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_boxes_is_one() {
        let b = BoundingBox::new(1.0, 2.0, 5.0, 8.0).unwrap();
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // [0,0,2,2] vs [1,1,3,3]: intersection 1, union 7.
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn ground_truth_with_score_rejected() {
        let mut a = Annotation::ground_truth(BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0);
        a.score = Some(0.5);
        assert!(a.validate(3).is_err());
    }
}
