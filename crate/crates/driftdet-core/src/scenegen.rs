//! Procedural scene generation with controllable domain shift.
//!
//! Scenes are flat-shaded shapes (circle, square, triangle) on a solid
//! background, rendered with 2x supersampling so ground-truth boxes are tight
//! to sub-pixel accuracy. A [`DomainSpec`] controls appearance only — palette,
//! texture noise, blur, white balance, gamma, and synthetic fog — so two specs
//! can share scene geometry while looking like different domains.
//!
//! Fog model: `I' = I*t + A*(1-t)` with transmittance `t = exp(-beta * d)`.
//! The depth proxy `d` is the normalized row index counted from the bottom of
//! the image: the bottom row is closest (`d = 0`, clear) and the top row is
//! farthest (`d = 1`, haziest), like a horizon.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{
    save_png, DatasetManifest, ManifestAnnotation, ManifestImage,
};
use crate::types::{Annotation, BoundingBox, Domain, RgbImage, Sample};

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_OBJECT_RANGE: (usize, usize) = (2, 5);

/// Appearance parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// `palette[0]` is the background; objects draw from the rest.
    pub palette: Vec<[f64; 3]>,
    pub texture_noise_sigma: f64,
    /// Fog density `beta`; zero disables fog.
    pub fog_density: f64,
    pub gamma: f64,
    pub white_balance: [f64; 3],
    pub blur_radius: f64,
    /// Fog color `A`.
    pub atmospheric_light: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(Error::config("palette must not be empty"));
        }
        if self.texture_noise_sigma < 0.0 || self.fog_density < 0.0 || self.blur_radius < 0.0 {
            return Err(Error::config("noise, fog and blur parameters must be >= 0"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::config("gamma must be > 0"));
        }
        if self.white_balance.iter().any(|&g| g <= 0.0) {
            return Err(Error::config("white balance gains must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.atmospheric_light) {
            return Err(Error::config("atmospheric light must lie in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    Sim2real,
    AdverseWeather,
    CrossCamera,
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioName::Sim2real => write!(f, "sim2real"),
            ScenarioName::AdverseWeather => write!(f, "adverse-weather"),
            ScenarioName::CrossCamera => write!(f, "cross-camera"),
        }
    }
}

/// A source/target domain pair plus pairing semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// When true, target scenes are fogged copies of the source scenes.
    pub paired: bool,
    /// Fog densities used by the paired scenario, one target image per level.
    pub fog_levels: Vec<f64>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.paired && self.fog_levels.is_empty() {
            return Err(Error::config("paired scenario requires fog levels"));
        }
        if self.fog_levels.iter().any(|&b| b < 0.0) {
            return Err(Error::config("fog levels must be >= 0"));
        }
        Ok(())
    }

    pub fn by_name(name: &str) -> Result<ScenarioSpec> {
        match name {
            "sim2real" => Ok(sim2real()),
            "adverse-weather" => Ok(adverse_weather()),
            "cross-camera" => Ok(cross_camera()),
            other => Err(Error::config(format!(
                "unknown scenario `{other}` (expected sim2real, adverse-weather or cross-camera)"
            ))),
        }
    }
}

/// Vivid synthetic palette against a muted, noisy, slightly blurred real-world look.
pub fn sim2real() -> ScenarioSpec {
    ScenarioSpec {
        name: ScenarioName::Sim2real,
        source: DomainSpec {
            palette: vec![
                [0.16, 0.55, 0.85],
                [0.95, 0.20, 0.15],
                [0.15, 0.85, 0.20],
                [0.98, 0.85, 0.10],
                [0.90, 0.30, 0.85],
            ],
            texture_noise_sigma: 0.0,
            fog_density: 0.0,
            gamma: 1.0,
            white_balance: [1.0, 1.0, 1.0],
            blur_radius: 0.0,
            atmospheric_light: 0.8,
        },
        target: DomainSpec {
            palette: vec![
                [0.45, 0.44, 0.42],
                [0.55, 0.35, 0.30],
                [0.40, 0.45, 0.35],
                [0.55, 0.50, 0.35],
                [0.45, 0.40, 0.50],
            ],
            texture_noise_sigma: 0.05,
            fog_density: 0.0,
            gamma: 1.15,
            white_balance: [1.03, 1.0, 0.95],
            blur_radius: 0.7,
            atmospheric_light: 0.8,
        },
        paired: false,
        fog_levels: Vec::new(),
    }
}

/// Shared palette; the target is the source world seen through fog.
pub fn adverse_weather() -> ScenarioSpec {
    let base = DomainSpec {
        palette: vec![
            [0.35, 0.45, 0.55],
            [0.80, 0.25, 0.20],
            [0.25, 0.60, 0.80],
            [0.85, 0.75, 0.25],
        ],
        texture_noise_sigma: 0.02,
        fog_density: 0.0,
        gamma: 1.0,
        white_balance: [1.0, 1.0, 1.0],
        blur_radius: 0.0,
        atmospheric_light: 0.8,
    };
    let mut target = base.clone();
    target.fog_density = 1.6;
    ScenarioSpec {
        name: ScenarioName::AdverseWeather,
        source: base,
        target,
        paired: true,
        fog_levels: vec![0.8, 1.6, 3.2],
    }
}

/// Same world, different camera: gamma, white balance, blur and noise shift.
pub fn cross_camera() -> ScenarioSpec {
    let source = DomainSpec {
        palette: vec![
            [0.40, 0.42, 0.45],
            [0.75, 0.30, 0.25],
            [0.30, 0.55, 0.75],
            [0.80, 0.70, 0.30],
        ],
        texture_noise_sigma: 0.015,
        fog_density: 0.0,
        gamma: 1.0,
        white_balance: [1.0, 1.0, 1.0],
        blur_radius: 0.0,
        atmospheric_light: 0.8,
    };
    let mut target = source.clone();
    target.texture_noise_sigma = 0.03;
    target.gamma = 1.45;
    target.white_balance = [1.18, 1.0, 0.82];
    target.blur_radius = 0.9;
    ScenarioSpec {
        name: ScenarioName::CrossCamera,
        source,
        target,
        paired: false,
        fog_levels: Vec::new(),
    }
}

/// Shape class ids match the category list: circle 0, square 1, triangle 2.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SceneObject {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.cx - self.half,
            y_min: self.cy - self.half,
            x_max: self.cx + self.half,
            y_max: self.cy + self.half,
        }
    }

    /// Membership test at a continuous image point.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let h = self.half;
        match self.class_id {
            0 => dx * dx + dy * dy <= h * h,
            1 => dx.abs() <= h && dy.abs() <= h,
            _ => {
                // Isoceles triangle, apex at the top of the box.
                if dy < -h || dy > h {
                    return false;
                }
                // Width grows linearly from 0 at the apex to `h` at the base.
                let level = (dy + h) / (2.0 * h);
                dx.abs() <= h * level
            }
        }
    }
}

fn draw_index(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    // Fixed single-draw consumption keeps RNG streams aligned across specs.
    let f: f64 = rng.gen();
    let span = hi - lo + 1;
    lo + ((f * span as f64) as usize).min(span - 1)
}

pub(crate) fn plan_scene(
    seed: u64,
    spec: &DomainSpec,
    size: (usize, usize),
    object_count_range: (usize, usize),
) -> Vec<SceneObject> {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = draw_index(&mut rng, object_count_range.0, object_count_range.1);
    let min_half = 4.0;
    let max_half = (h.min(w) as f64 / 6.0).max(min_half + 1.0);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for attempt in 0..20 {
            let class_id = draw_index(&mut rng, 0, 2);
            let half = min_half + rng.gen::<f64>() * (max_half - min_half);
            let cx = half + 1.0 + rng.gen::<f64>() * (w as f64 - 2.0 * (half + 1.0));
            let cy = half + 1.0 + rng.gen::<f64>() * (h as f64 - 2.0 * (half + 1.0));
            let color_idx = if spec.palette.len() > 1 {
                draw_index(&mut rng, 1, spec.palette.len() - 1)
            } else {
                0
            };
            let mut color = spec.palette[color_idx];
            for c in &mut color {
                *c = (*c + (rng.gen::<f64>() - 0.5) * 0.06).clamp(0.0, 1.0);
            }
            let candidate = SceneObject { class_id, cx, cy, half, color };
            let crowded = objects
                .iter()
                .any(|o| o.bbox().iou(&candidate.bbox()) > 0.25);
            if !crowded || attempt == 19 {
                placed = Some(candidate);
                break;
            }
        }
        objects.push(placed.expect("placement loop always yields an object"));
    }
    objects
}

/// Rasterize objects over the background with 2x supersampling.
pub(crate) fn rasterize(objects: &[SceneObject], spec: &DomainSpec, size: (usize, usize)) -> RgbImage {
    let (h, w) = size;
    let bg = spec.palette[0];
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let px = x as f64 + (sx as f64 + 0.5) * 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) * 0.5;
                    // Later objects draw on top.
                    let mut c = bg;
                    for o in objects {
                        if o.contains(px, py) {
                            c = o.color;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            img.set(x, y, [acc[0] * 0.25, acc[1] * 0.25, acc[2] * 0.25]);
        }
    }
    img
}

fn gaussian_blur(img: &RgbImage, radius: f64) -> RgbImage {
    if radius <= 0.0 {
        return img.clone();
    }
    let sigma = radius;
    let half = (2.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / ksum).collect();

    let (w, h) = (img.width, img.height);
    let mut tmp = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + ki as i64 - half).clamp(0, w as i64 - 1) as usize;
                let p = img.get(sx, y);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + ki as i64 - half).clamp(0, h as i64 - 1) as usize;
                let p = tmp.get(x, sy);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Depth proxy for a given array row: 0 at the bottom row (closest), 1 at the
/// top row (farthest).
#[inline]
pub fn depth_at_row(row: usize, height: usize) -> f64 {
    if height <= 1 {
        return 0.0;
    }
    (height - 1 - row) as f64 / (height - 1) as f64
}

#[inline]
pub(crate) fn fog_pixel(value: f64, atmospheric_light: f64, transmittance: f64) -> f64 {
    value * transmittance + atmospheric_light * (1.0 - transmittance)
}

/// Blend the image toward atmospheric light along the depth proxy;
/// annotations pass through untouched.
pub fn apply_fog(sample: &Sample, beta: f64, atmospheric_light: f64) -> Result<Sample> {
    if beta < 0.0 {
        return Err(Error::config(format!("fog density must be >= 0, got {beta}")));
    }
    if !(0.0..=1.0).contains(&atmospheric_light) {
        return Err(Error::config("atmospheric light must lie in [0,1]"));
    }
    let mut out = sample.clone();
    let (w, h) = (out.image.width, out.image.height);
    for y in 0..h {
        let t = (-beta * depth_at_row(y, h)).exp();
        for x in 0..w {
            let p = out.image.get(x, y);
            out.image.set(
                x,
                y,
                [
                    fog_pixel(p[0], atmospheric_light, t),
                    fog_pixel(p[1], atmospheric_light, t),
                    fog_pixel(p[2], atmospheric_light, t),
                ],
            );
        }
    }
    Ok(out)
}

fn apply_photometry(mut img: RgbImage, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> RgbImage {
    if spec.texture_noise_sigma > 0.0 {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, spec.texture_noise_sigma).unwrap();
        for v in &mut img.data {
            *v += normal.sample(rng);
        }
    }
    if spec.blur_radius > 0.0 {
        img = gaussian_blur(&img, spec.blur_radius);
    }
    for p in img.data.chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = (p[c] * spec.white_balance[c]).clamp(0.0, 1.0).powf(spec.gamma);
        }
    }
    img
}

/// Deterministically generate one scene: geometry from the seed, appearance
/// from the spec. Boxes are tight to the rendered shapes within one pixel.
pub fn generate_scene(
    seed: u64,
    spec: &DomainSpec,
    size: (usize, usize),
    object_count_range: (usize, usize),
) -> Result<Sample> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::config(format!("image size {h}x{w} below 32x32 minimum")));
    }
    if object_count_range.0 > object_count_range.1 {
        return Err(Error::config(format!(
            "invalid object count range {object_count_range:?}"
        )));
    }
    spec.validate()?;

    let objects = plan_scene(seed, spec, size, object_count_range);
    let img = rasterize(&objects, spec, size);

    // Photometric stages draw from a stream decoupled from geometry.
    let mut photo_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut img = apply_photometry(img, spec, &mut photo_rng);

    let annotations: Vec<Annotation> = objects
        .iter()
        .map(|o| Annotation::ground_truth(o.bbox(), o.class_id))
        .collect();

    let mut sample = Sample {
        image: {
            img.clamp_unit();
            img
        },
        annotations,
        domain: Domain::Source,
        scene_seed: seed,
    };
    if spec.fog_density > 0.0 {
        sample = apply_fog(&sample, spec.fog_density, spec.atmospheric_light)?;
    }
    Ok(sample)
}

/// Requested split sizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

/// Extra generation knobs; defaults match the bundled scenarios.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenOptions {
    pub image_size: usize,
    pub object_range: (usize, usize),
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            image_size: DEFAULT_IMAGE_SIZE,
            object_range: DEFAULT_OBJECT_RANGE,
        }
    }
}

/// Manifest paths produced by [`generate_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    pub target_val: PathBuf,
}

const SPLIT_STRIDE: u64 = 1_000_000;

/// Generate source-train / target-train / target-val splits under `out_dir`.
///
/// Splits draw from disjoint scene-seed ranges. In paired scenarios the
/// target-train split contains one fogged copy of every source scene per fog
/// level, with annotations equal to the source scene's. Target-train
/// annotations are written to disk (oracle training and diagnostics read
/// them) but training consumers load that split unlabeled.
pub fn generate_dataset(
    scenario: &ScenarioSpec,
    sizes: SplitSizes,
    seed: u64,
    opts: &GenOptions,
    out_dir: &Path,
) -> Result<GeneratedDataset> {
    scenario.validate()?;
    if sizes.source_train == 0 || sizes.target_train == 0 || sizes.target_val == 0 {
        return Err(Error::config("all split sizes must be >= 1"));
    }
    let max_size = sizes.source_train.max(sizes.target_train).max(sizes.target_val) as u64;
    if max_size >= SPLIT_STRIDE {
        return Err(Error::internal("split seed ranges would overlap".to_string()));
    }
    let size = (opts.image_size, opts.image_size);

    std::fs::create_dir_all(out_dir)?;
    let src_seed = seed;
    let tgt_seed = seed + SPLIT_STRIDE;
    let val_seed = seed + 2 * SPLIT_STRIDE;

    // Source train.
    let mut src_manifest = DatasetManifest::empty();
    let mut src_samples: Vec<Sample> = Vec::with_capacity(sizes.source_train);
    let mut ann_id = 0u64;
    for i in 0..sizes.source_train {
        let s = generate_scene(src_seed + i as u64, &scenario.source, size, opts.object_range)?;
        let file = format!("src_{i:05}.png");
        save_png(&s.image, &out_dir.join(&file))?;
        src_manifest.images.push(ManifestImage {
            id: i as u64,
            file,
            width: size.1,
            height: size.0,
            domain: Domain::Source,
            scene_seed: s.scene_seed,
            source_image_id: None,
        });
        for a in &s.annotations {
            src_manifest
                .annotations
                .push(ManifestAnnotation::from_annotation(ann_id, i as u64, a));
            ann_id += 1;
        }
        src_samples.push(s);
    }
    let src_path = out_dir.join("source_train.json");
    src_manifest.save(&src_path)?;

    // Target train.
    let mut tgt_manifest = DatasetManifest::empty();
    let mut ann_id = 0u64;
    if scenario.paired {
        let mut img_id = 0u64;
        for (i, src) in src_samples.iter().enumerate() {
            for (li, &beta) in scenario.fog_levels.iter().enumerate() {
                let mut fogged = apply_fog(src, beta, scenario.target.atmospheric_light)?;
                fogged.domain = Domain::Target;
                let file = format!("tgt_{i:05}_l{li}.png");
                save_png(&fogged.image, &out_dir.join(&file))?;
                tgt_manifest.images.push(ManifestImage {
                    id: img_id,
                    file,
                    width: size.1,
                    height: size.0,
                    domain: Domain::Target,
                    scene_seed: fogged.scene_seed,
                    source_image_id: Some(i as u64),
                });
                for a in &fogged.annotations {
                    tgt_manifest
                        .annotations
                        .push(ManifestAnnotation::from_annotation(ann_id, img_id, a));
                    ann_id += 1;
                }
                img_id += 1;
            }
        }
    } else {
        for i in 0..sizes.target_train {
            let mut s =
                generate_scene(tgt_seed + i as u64, &scenario.target, size, opts.object_range)?;
            s.domain = Domain::Target;
            let file = format!("tgt_{i:05}.png");
            save_png(&s.image, &out_dir.join(&file))?;
            tgt_manifest.images.push(ManifestImage {
                id: i as u64,
                file,
                width: size.1,
                height: size.0,
                domain: Domain::Target,
                scene_seed: s.scene_seed,
                source_image_id: None,
            });
            for a in &s.annotations {
                tgt_manifest
                    .annotations
                    .push(ManifestAnnotation::from_annotation(ann_id, i as u64, a));
                ann_id += 1;
            }
        }
    }
    let tgt_path = out_dir.join("target_train.json");
    tgt_manifest.save(&tgt_path)?;

    // Target val: fresh scenes; in paired mode these are source-world scenes
    // fogged at cycling levels, mirroring how the target train split looks.
    let mut val_manifest = DatasetManifest::empty();
    let mut ann_id = 0u64;
    for i in 0..sizes.target_val {
        let mut s = if scenario.paired {
            let base =
                generate_scene(val_seed + i as u64, &scenario.source, size, opts.object_range)?;
            let beta = scenario.fog_levels[i % scenario.fog_levels.len()];
            apply_fog(&base, beta, scenario.target.atmospheric_light)?
        } else {
            generate_scene(val_seed + i as u64, &scenario.target, size, opts.object_range)?
        };
        s.domain = Domain::Target;
        let file = format!("val_{i:05}.png");
        save_png(&s.image, &out_dir.join(&file))?;
        val_manifest.images.push(ManifestImage {
            id: i as u64,
            file,
            width: size.1,
            height: size.0,
            domain: Domain::Target,
            scene_seed: s.scene_seed,
            source_image_id: None,
        });
        for a in &s.annotations {
            val_manifest
                .annotations
                .push(ManifestAnnotation::from_annotation(ann_id, i as u64, a));
            ann_id += 1;
        }
    }
    let val_path = out_dir.join("target_val.json");
    val_manifest.save(&val_path)?;

    Ok(GeneratedDataset {
        source_train: src_path,
        target_train: tgt_path,
        target_val: val_path,
    })
}
