//! Image-level adaptation: a label-preserving, optionally multi-modal
//! statistical style transfer.
//!
//! The translator summarizes the target domain by an 8-dimensional per-image
//! statistic vector and a fitted Gaussian over it, then restyles source
//! images toward sampled statistics. Geometry is untouched, so source labels
//! carry over unchanged.
//!
//! Per-image statistics (fixed layout, indices 0..8):
//! - `0..3` channel means (r, g, b)
//! - `3..6` channel standard deviations
//! - `6` fog proxy: mean luminance of the top quarter of rows (the haziest
//!   region under the fog model)
//! - `7` gamma proxy: log of the geometric mean luminance, i.e. the log
//!   response of canonical mid-gray under the image's implied tone curve

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::{context, AccessLog};
use crate::error::{Error, Result};
use crate::manifest::{Dataset, DatasetManifest, ManifestAnnotation, ManifestImage};
use crate::metrics::FeatureStats;
use crate::scenegen::apply_fog;
use crate::types::{Domain, RgbImage, Sample};

pub const STAT_DIM: usize = 8;

/// Fog color used when restyling; matches the bundled scenarios.
pub const TRANSLATOR_ATMOSPHERIC_LIGHT: f64 = 0.8;

/// Mean depth over the top quarter of rows under the fog depth proxy.
const TOP_REGION_MEAN_DEPTH: f64 = 0.875;

const MAX_FOG_BETA: f64 = 8.0;
const GAMMA_RANGE: (f64, f64) = (0.25, 4.0);
const STD_RANGE: (f64, f64) = (1e-3, 0.5);
const LUM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslationMode {
    /// Pass-through; the control arm.
    Identity,
    /// Always restyle to the fitted mean statistics (one-to-one mapping).
    Deterministic,
    /// Sample styles from the fitted Gaussian (one-to-many mapping).
    Multimodal,
}

impl TranslationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TranslationMode::Identity),
            "deterministic" => Ok(TranslationMode::Deterministic),
            "multimodal" => Ok(TranslationMode::Multimodal),
            other => Err(Error::config(format!("unknown translator mode `{other}`"))),
        }
    }
}

/// One sampled appearance realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
    pub fog_beta: f64,
    pub gamma: f64,
}

impl StyleCode {
    pub fn neutral() -> Self {
        StyleCode {
            channel_means: [0.5; 3],
            channel_stds: [0.25; 3],
            fog_beta: 0.0,
            gamma: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.channel_means.iter().all(|m| (0.0..=1.0).contains(m))
            && self.channel_stds.iter().all(|s| *s > 0.0)
            && self.fog_beta >= 0.0
            && self.gamma > 0.0
    }
}

/// The fitted image-level mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslatorModel {
    pub mode: TranslationMode,
    /// Mean of the 8-dim per-image statistics over target images.
    pub target_stat_mean: Vec<f64>,
    /// Row-major 8x8 covariance of the same statistics.
    pub target_stat_cov: Vec<f64>,
    pub target_count: usize,
}

impl TranslatorModel {
    pub fn validate(&self) -> Result<()> {
        if self.target_stat_mean.len() != STAT_DIM
            || self.target_stat_cov.len() != STAT_DIM * STAT_DIM
        {
            return Err(Error::internal("translator statistics have wrong dimension"));
        }
        for i in 0..STAT_DIM {
            for j in 0..STAT_DIM {
                let a = self.target_stat_cov[i * STAT_DIM + j];
                let b = self.target_stat_cov[j * STAT_DIM + i];
                if (a - b).abs() > 1e-8 {
                    return Err(Error::internal("translator covariance not symmetric"));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let model: TranslatorModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

fn luminance(p: [f64; 3]) -> f64 {
    (p[0] + p[1] + p[2]) / 3.0
}

/// The 8-dim statistic vector of one image.
pub fn image_stats(img: &RgbImage) -> [f64; STAT_DIM] {
    let means = img.channel_means();
    let stds = img.channel_stds();
    let top_rows = (img.height / 4).max(1);
    let mut top_sum = 0.0;
    for y in 0..top_rows {
        for x in 0..img.width {
            top_sum += luminance(img.get(x, y));
        }
    }
    let fog_proxy = top_sum / (top_rows * img.width) as f64;
    let mut log_sum = 0.0;
    for p in img.data.chunks_exact(3) {
        log_sum += luminance([p[0], p[1], p[2]]).max(LUM_FLOOR).ln();
    }
    let gamma_proxy = log_sum / (img.width * img.height) as f64;
    [
        means[0], means[1], means[2], stds[0], stds[1], stds[2], fog_proxy, gamma_proxy,
    ]
}

/// Fit target statistics; labels are never read.
pub fn fit_translator(
    source: &Dataset,
    target: &Dataset,
    mode: TranslationMode,
    log: &AccessLog,
) -> Result<TranslatorModel> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::config("translator fit requires nonempty source and target manifests"));
    }
    let mut stats = Vec::with_capacity(target.len());
    for i in 0..target.len() {
        let s = target.load_unlabeled(i, log, context::TRANSLATE_FIT)?;
        stats.push(image_stats(&s.image).to_vec());
    }
    let summary = FeatureStats::from_vectors(&stats)?;
    let model = TranslatorModel {
        mode,
        target_stat_mean: summary.mean,
        target_stat_cov: summary.covariance,
        target_count: target.len(),
    };
    model.validate()?;
    Ok(model)
}

/// Map a raw statistic vector onto a valid style.
pub fn style_from_stats(stats: &[f64]) -> StyleCode {
    let mean_lum = (stats[0] + stats[1] + stats[2]) / 3.0;
    let a = TRANSLATOR_ATMOSPHERIC_LIGHT;
    let fog_beta = if (a - mean_lum).abs() < 0.05 {
        0.0
    } else {
        let t_top = ((stats[6] - a) / (mean_lum - a)).clamp(1e-3, 1.0);
        (-t_top.ln() / TOP_REGION_MEAN_DEPTH).clamp(0.0, MAX_FOG_BETA)
    };
    let gamma = (stats[7] / 0.5f64.ln()).clamp(GAMMA_RANGE.0, GAMMA_RANGE.1);
    StyleCode {
        channel_means: [
            stats[0].clamp(0.0, 1.0),
            stats[1].clamp(0.0, 1.0),
            stats[2].clamp(0.0, 1.0),
        ],
        channel_stds: [
            stats[3].clamp(STD_RANGE.0, STD_RANGE.1),
            stats[4].clamp(STD_RANGE.0, STD_RANGE.1),
            stats[5].clamp(STD_RANGE.0, STD_RANGE.1),
        ],
        fog_beta,
        gamma,
    }
}

fn stat_vector_in_range(stats: &[f64]) -> bool {
    stats[0..3].iter().all(|m| (0.0..=1.0).contains(m))
        && stats[3..6].iter().all(|s| (STD_RANGE.0..=STD_RANGE.1).contains(s))
        && (0.0..=1.0).contains(&stats[6])
        && (LUM_FLOOR.ln()..=0.0).contains(&stats[7])
}

/// Draw a raw statistic vector from the fitted Gaussian: rejection sampling
/// against the valid ranges, clipping after 100 rejects.
pub fn sample_stat_vector(model: &TranslatorModel, seed: u64) -> Vec<f64> {
    let dim = STAT_DIM;
    let cov = nalgebra::DMatrix::from_row_slice(dim, dim, &model.target_stat_cov);
    let sym = (&cov + cov.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let scales: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        (0..dim)
            .map(|i| {
                let mut v = model.target_stat_mean[i];
                for k in 0..dim {
                    v += eig.eigenvectors[(i, k)] * scales[k] * eps[k];
                }
                v
            })
            .collect()
    };
    for _ in 0..100 {
        let candidate = draw(&mut rng);
        if stat_vector_in_range(&candidate) {
            return candidate;
        }
    }
    let mut fallback = draw(&mut rng);
    for (i, v) in fallback.iter_mut().enumerate() {
        *v = match i {
            0..=2 | 6 => v.clamp(0.0, 1.0),
            3..=5 => v.clamp(STD_RANGE.0, STD_RANGE.1),
            _ => v.clamp(LUM_FLOOR.ln(), 0.0),
        };
    }
    fallback
}

/// Sample one appearance realization. Deterministic mode always returns the
/// fitted mean style; identity mode returns a neutral style.
pub fn sample_style(model: &TranslatorModel, seed: u64) -> StyleCode {
    match model.mode {
        TranslationMode::Identity => StyleCode::neutral(),
        TranslationMode::Deterministic => style_from_stats(&model.target_stat_mean),
        TranslationMode::Multimodal => style_from_stats(&sample_stat_vector(model, seed)),
    }
}

/// Restyle one source sample: per-channel renormalization to the style's
/// mean/std, gamma correction, fog, clipped to [0,1]. Annotations are
/// structurally equal to the input's and the output domain is `translated`.
pub fn translate(model: &TranslatorModel, sample: &Sample, style: &StyleCode) -> Result<Sample> {
    if sample.domain != Domain::Source {
        return Err(Error::config(format!(
            "translate expects a source-domain sample, got {}",
            sample.domain
        )));
    }
    let mut out = sample.clone();
    out.domain = Domain::Translated;
    if model.mode == TranslationMode::Identity {
        return Ok(out);
    }
    if !style.is_valid() {
        return Err(Error::config("invalid style code".to_string()));
    }

    let src_means = sample.image.channel_means();
    let src_stds = sample.image.channel_stds();
    for p in out.image.data.chunks_exact_mut(3) {
        for c in 0..3 {
            let z = (p[c] - src_means[c]) / src_stds[c].max(1e-6);
            let renormed = z * style.channel_stds[c] + style.channel_means[c];
            p[c] = renormed.clamp(0.0, 1.0).powf(style.gamma);
        }
    }
    if style.fog_beta > 0.0 {
        out = apply_fog(&out, style.fog_beta, TRANSLATOR_ATMOSPHERIC_LIGHT)?;
    }
    out.image.clamp_unit();
    Ok(out)
}

use crate::util::mix64 as mix_seed;

/// Translate a whole split: `styles_per_image` restyled copies per source
/// image, each carrying its source image id and the source annotation set.
pub fn translate_dataset(
    model: &TranslatorModel,
    source: &Dataset,
    styles_per_image: usize,
    seed: u64,
    log: &AccessLog,
    out_dir: &Path,
) -> Result<PathBuf> {
    if styles_per_image == 0 {
        return Err(Error::config("styles_per_image must be >= 1"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = DatasetManifest {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: source.manifest.categories.clone(),
    };
    let mut img_id = 0u64;
    let mut ann_id = 0u64;
    for i in 0..source.len() {
        let sample = source.load_labeled(i, log, context::TRANSLATE_APPLY)?;
        let src_rec = source.image_record(i);
        for s in 0..styles_per_image {
            let style = sample_style(model, mix_seed(seed, i as u64, s as u64));
            let translated = translate(model, &sample, &style)?;
            let file = format!("tr_{i:05}_{s}.png");
            crate::manifest::save_png(&translated.image, &out_dir.join(&file))?;
            manifest.images.push(ManifestImage {
                id: img_id,
                file,
                width: translated.image.width,
                height: translated.image.height,
                domain: Domain::Translated,
                scene_seed: src_rec.scene_seed,
                source_image_id: Some(src_rec.id),
            });
            for a in &translated.annotations {
                manifest
                    .annotations
                    .push(ManifestAnnotation::from_annotation(ann_id, img_id, a));
                ann_id += 1;
            }
            img_id += 1;
        }
    }
    let path = out_dir.join("translated.json");
    manifest.save(&path)?;
    Ok(path)
}
