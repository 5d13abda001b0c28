//! Feature-level adaptation: a shallow domain classifier coupled to the
//! feature extractor through a gradient reversal layer.
//!
//! The classifier sees globally average-pooled backbone features and predicts
//! 1 for target-domain inputs, 0 for translated-source inputs. It minimizes
//! binary cross-entropy; the feature extractor receives the same gradient
//! scaled by `-lambda`, driving it to maximize the classifier's error. The
//! two objectives share stationary points with the printed adversarial form
//! and are numerically stable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward, detection_loss_grad, forward_cached, sigmoid, ClassLossMode, DetectorGrads,
    DetectorParams, FeatureMap, ForwardCache, LossComponents, LossWeights, Tensor,
};
use crate::optim::{sgd_step, sgd_step_slice, SgdHyper};
use crate::types::{Domain, Sample};

/// Reversal coefficient and its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    pub lambda: f64,
    pub schedule: GrlSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GrlSchedule {
    Constant,
    /// Linear ramp from `start` to `end` over `steps` iterations.
    Ramp { start: f64, end: f64, steps: u64 },
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig { lambda: 1.0, schedule: GrlSchedule::Constant }
    }
}

impl GrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config("grl lambda must be finite and >= 0"));
        }
        if let GrlSchedule::Ramp { start, end, steps } = self.schedule {
            if start < 0.0 || end < 0.0 || steps == 0 {
                return Err(Error::config("grl ramp endpoints must be >= 0 and steps >= 1"));
            }
        }
        Ok(())
    }

    pub fn lambda_at(&self, iteration: u64) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.lambda,
            GrlSchedule::Ramp { start, end, steps } => {
                let p = (iteration as f64 / steps as f64).min(1.0);
                start + (end - start) * p
            }
        }
    }
}

/// Gradient reversal: identity forward, `-lambda * g` backward.
pub fn grl_backward(upstream_gradient: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert!(lambda >= 0.0);
    upstream_gradient.iter().map(|g| -lambda * g).collect()
}

/// Pooled features -> 64-unit tanh hidden layer -> one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    pub in_dim: usize,
    pub hidden: usize,
    /// `[hidden][in_dim]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

pub const DOMAIN_CLASSIFIER_HIDDEN: usize = 64;

impl DomainClassifier {
    pub fn init(in_dim: usize, seed: u64) -> Self {
        let hidden = DOMAIN_CLASSIFIER_HIDDEN;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        DomainClassifier {
            in_dim,
            hidden,
            w1: draw(hidden * in_dim),
            b1: vec![0.0; hidden],
            w2: draw(hidden),
            b2: 0.0,
        }
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                let row = h * self.in_dim;
                let mut s = self.b1[h];
                for i in 0..self.in_dim {
                    s += self.w1[row + i] * x[i];
                }
                s
            })
            .collect()
    }

    /// Raw logit for one pooled feature vector.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let pre = self.hidden_pre(x);
        let mut z = self.b2;
        for h in 0..self.hidden {
            z += self.w2[h] * pre[h].tanh();
        }
        z
    }

    /// Accumulate parameter gradients for `dlogit` at input `x`; returns `dx`.
    pub fn backward(&self, x: &[f64], dlogit: f64, grads: &mut DomainClassifierGrads) -> Vec<f64> {
        let pre = self.hidden_pre(x);
        grads.db2 += dlogit;
        let mut dx = vec![0.0; self.in_dim];
        for h in 0..self.hidden {
            let t = pre[h].tanh();
            grads.dw2[h] += dlogit * t;
            let dpre = dlogit * self.w2[h] * (1.0 - t * t);
            grads.db1[h] += dpre;
            let row = h * self.in_dim;
            for i in 0..self.in_dim {
                grads.dw1[row + i] += dpre * x[i];
                dx[i] += dpre * self.w1[row + i];
            }
        }
        dx
    }

    pub fn param_slices_mut(&mut self) -> [(&mut [f64], usize); 3] {
        [
            (&mut self.w1[..], 0),
            (&mut self.b1[..], 1),
            (&mut self.w2[..], 2),
        ]
    }
}

/// Gradients / momentum buffers for [`DomainClassifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifierGrads {
    pub dw1: Vec<f64>,
    pub db1: Vec<f64>,
    pub dw2: Vec<f64>,
    pub db2: f64,
}

impl DomainClassifierGrads {
    pub fn zeros_like(d: &DomainClassifier) -> Self {
        DomainClassifierGrads {
            dw1: vec![0.0; d.w1.len()],
            db1: vec![0.0; d.b1.len()],
            dw2: vec![0.0; d.w2.len()],
            db2: 0.0,
        }
    }
}

fn sgd_step_domain(
    d: &mut DomainClassifier,
    grads: &DomainClassifierGrads,
    buf: &mut DomainClassifierGrads,
    lr: f64,
    hyper: &SgdHyper,
) {
    sgd_step_slice(&mut d.w1, &grads.dw1, &mut buf.dw1, lr, hyper);
    sgd_step_slice(&mut d.b1, &grads.db1, &mut buf.db1, lr, hyper);
    sgd_step_slice(&mut d.w2, &grads.dw2, &mut buf.dw2, lr, hyper);
    let mut b2 = [d.b2];
    let mut vb2 = [buf.db2];
    sgd_step_slice(&mut b2, &[grads.db2], &mut vb2, lr, hyper);
    d.b2 = b2[0];
    buf.db2 = vb2[0];
}

#[inline]
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

/// Mean binary cross-entropy of the classifier over two feature batches:
/// translated-source features carry label 0, target features label 1.
pub fn domain_loss(
    d: &DomainClassifier,
    features_translated: &[FeatureMap],
    features_target: &[FeatureMap],
) -> Result<f64> {
    if features_translated.is_empty() || features_target.is_empty() {
        return Err(Error::config("domain loss requires nonempty batches from both domains"));
    }
    let mut total = 0.0;
    for f in features_translated {
        total += bce_with_logit(d.logit(&f.pooled()), 0.0);
    }
    for f in features_target {
        total += bce_with_logit(d.logit(&f.pooled()), 1.0);
    }
    Ok(total / (features_translated.len() + features_target.len()) as f64)
}

/// Loss plus gradients for one pooled vector per domain.
/// Returns `(loss, d_grads, dpooled_translated, dpooled_target)`.
pub fn domain_loss_grad_pair(
    d: &DomainClassifier,
    pooled_translated: &[f64],
    pooled_target: &[f64],
) -> (f64, DomainClassifierGrads, Vec<f64>, Vec<f64>) {
    let mut grads = DomainClassifierGrads::zeros_like(d);
    let z_t = d.logit(pooled_translated);
    let z_u = d.logit(pooled_target);
    let loss = 0.5 * (bce_with_logit(z_t, 0.0) + bce_with_logit(z_u, 1.0));
    // d(mean BCE)/dz = (sigmoid(z) - y) / 2.
    let dz_t = 0.5 * sigmoid(z_t);
    let dz_u = 0.5 * (sigmoid(z_u) - 1.0);
    let dx_t = d.backward(pooled_translated, dz_t, &mut grads);
    let dx_u = d.backward(pooled_target, dz_u, &mut grads);
    (loss, grads, dx_t, dx_u)
}

/// Spread a pooled-feature gradient uniformly back over the feature grid.
pub fn broadcast_pooled_grad(dpooled: &[f64], like: &Tensor) -> Tensor {
    let mut t = Tensor::zeros(like.channels, like.height, like.width);
    let scale = 1.0 / (like.height * like.width) as f64;
    for c in 0..like.channels {
        let v = dpooled[c] * scale;
        let base = c * like.height * like.width;
        for k in 0..like.height * like.width {
            t.data[base + k] = v;
        }
    }
    t
}

/// The un-reversed gradient of the pair domain loss w.r.t. detector
/// parameters (heads receive nothing). Tests compare `-lambda` times this
/// against finite differences.
pub fn domain_phi_grads(
    params: &DetectorParams,
    d: &DomainClassifier,
    cache_labeled: &ForwardCache,
    cache_target: &ForwardCache,
) -> (f64, DomainClassifierGrads, DetectorGrads) {
    let pooled_t = cache_labeled.features().global_avg_pool();
    let pooled_u = cache_target.features().global_avg_pool();
    let (loss, d_grads, dx_t, dx_u) = domain_loss_grad_pair(d, &pooled_t, &pooled_u);
    let mut phi = backward(
        params,
        cache_labeled,
        None,
        Some(&broadcast_pooled_grad(&dx_t, cache_labeled.features())),
    );
    let phi_u = backward(
        params,
        cache_target,
        None,
        Some(&broadcast_pooled_grad(&dx_u, cache_target.features())),
    );
    phi.add_scaled(&phi_u, 1.0);
    (loss, d_grads, phi)
}

/// Optimizer state for teacher training.
#[derive(Debug, Clone)]
pub struct TeacherOptState {
    pub detector: DetectorGrads,
    pub domain: DomainClassifierGrads,
}

impl TeacherOptState {
    pub fn new(params: &DetectorParams, d: &DomainClassifier) -> Self {
        TeacherOptState {
            detector: DetectorGrads::zeros_like(params),
            domain: DomainClassifierGrads::zeros_like(d),
        }
    }
}

/// Per-step loss report.
#[derive(Debug, Clone, Copy)]
pub struct TeacherStepReport {
    pub det: LossComponents,
    pub domain: f64,
    pub lambda: f64,
}

/// One teacher optimization step on exactly one labeled and one unlabeled
/// sample. The classifier descends its own loss; the feature extractor
/// receives the detection gradient plus the reversed (`-lambda`) domain
/// gradient; the prediction heads receive the detection gradient only.
#[allow(clippy::too_many_arguments)]
pub fn teacher_step(
    teacher: &mut DetectorParams,
    d: &mut DomainClassifier,
    labeled: &Sample,
    unlabeled: &Sample,
    lambda: f64,
    weights: &LossWeights,
    class_mode: ClassLossMode,
    lr: f64,
    hyper: &SgdHyper,
    state: &mut TeacherOptState,
) -> Result<TeacherStepReport> {
    if labeled.annotations.is_empty() {
        return Err(Error::data("teacher step requires an annotated labeled sample"));
    }
    if labeled.domain == Domain::Target {
        return Err(Error::config("teacher labeled sample must not come from the target domain"));
    }
    if unlabeled.domain != Domain::Target {
        return Err(Error::config("teacher unlabeled sample must come from the target domain"));
    }

    let (cache_lab, _, pred) = forward_cached(teacher, &labeled.image)?;
    let (det_components, pred_grads) =
        detection_loss_grad(&pred, &labeled.annotations, weights, class_mode);

    let (cache_unlab, _, _) = forward_cached(teacher, &unlabeled.image)?;
    let pooled_lab = cache_lab.features().global_avg_pool();
    let pooled_unlab = cache_unlab.features().global_avg_pool();
    let (domain_value, d_grads, dx_lab, dx_unlab) =
        domain_loss_grad_pair(d, &pooled_lab, &pooled_unlab);

    let mut detector_grads = if lambda > 0.0 {
        // Reverse at the pooling junction, then continue into the backbone.
        let rev_lab = grl_backward(&dx_lab, lambda);
        let rev_unlab = grl_backward(&dx_unlab, lambda);
        let mut g = backward(
            teacher,
            &cache_lab,
            Some(&pred_grads),
            Some(&broadcast_pooled_grad(&rev_lab, cache_lab.features())),
        );
        let g_unlab = backward(
            teacher,
            &cache_unlab,
            None,
            Some(&broadcast_pooled_grad(&rev_unlab, cache_unlab.features())),
        );
        g.add_scaled(&g_unlab, 1.0);
        g
    } else {
        // Alignment disabled: bit-identical to a plain supervised step.
        backward(teacher, &cache_lab, Some(&pred_grads), None)
    };
    // Heads must never see domain gradients; the domain path stops at the
    // feature map by construction. `detector_grads` heads hold detection terms.
    let _ = &mut detector_grads;

    sgd_step(teacher, &detector_grads, &mut state.detector, lr, hyper);
    sgd_step_domain(d, &d_grads, &mut state.domain, lr, hyper);

    Ok(TeacherStepReport { det: det_components, domain: domain_value, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::types::RgbImage;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> ModelConfig {
        ModelConfig { num_classes: 3, channels: [6, 6, 8, 8], strides: [2, 2, 2, 1] }
    }

    fn random_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(32, 32);
        for v in &mut img.data {
            *v = rng.gen();
        }
        img
    }

    fn sample(seed: u64, domain: Domain, with_ann: bool) -> Sample {
        let annotations = if with_ann {
            vec![crate::types::Annotation::ground_truth(
                crate::types::BoundingBox::new(4.0, 5.0, 16.0, 18.0).unwrap(),
                1,
            )]
        } else {
            vec![]
        };
        Sample { image: random_image(seed), annotations, domain, scene_seed: seed }
    }

    #[test]
    fn grl_backward_cases() {
        let g = vec![1.0, -2.0, 3.5];
        assert_eq!(grl_backward(&g, 1.0), vec![-1.0, 2.0, -3.5]);
        assert!(grl_backward(&g, 0.0).iter().all(|v| *v == 0.0));
        let r = grl_backward(&[0.5, -2.0], 0.3);
        assert!((r[0] + 0.15).abs() < 1e-12);
        assert!((r[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn grl_schedule_ramps() {
        let cfg = GrlConfig {
            lambda: 1.0,
            schedule: GrlSchedule::Ramp { start: 0.0, end: 1.0, steps: 100 },
        };
        assert_eq!(cfg.lambda_at(0), 0.0);
        assert!((cfg.lambda_at(50) - 0.5).abs() < 1e-12);
        assert_eq!(cfg.lambda_at(100), 1.0);
        assert_eq!(cfg.lambda_at(10_000), 1.0);
        let c = GrlConfig::default();
        assert_eq!(c.lambda_at(0), 1.0);
        assert_eq!(c.lambda_at(99), 1.0);
    }

    fn feature_map_with_channel0(v: f64, channels: usize) -> FeatureMap {
        let mut t = Tensor::zeros(channels, 2, 2);
        for k in 0..4 {
            t.data[k] = v;
        }
        FeatureMap { values: t, stride: 8 }
    }

    /// Rig the classifier to output an exact probability on each batch and
    /// compare the loss with hand-computed cross-entropies.
    #[test]
    fn domain_loss_analytic_cases() {
        let channels = 4;
        let mut d = DomainClassifier::init(channels, 0);
        for w in &mut d.w1 {
            *w = 0.0;
        }
        for w in &mut d.w2 {
            *w = 0.0;
        }
        d.b1 = vec![0.0; d.hidden];
        d.b2 = 0.0;

        // Zero network: probability 0.5 everywhere -> ln 2.
        let ft = vec![feature_map_with_channel0(-1.0, channels)];
        let fu = vec![feature_map_with_channel0(1.0, channels)];
        let loss = domain_loss(&d, &ft, &fu).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // One hidden unit routes feature channel 0; scale it so that
        // sigma(k * tanh(1)) = 0.99. Translated feature is -1, target +1, so
        // the classifier is 0.99-confident and correct on both.
        let p_target: f64 = 0.99;
        let want_logit = (p_target / (1.0 - p_target)).ln();
        let k = want_logit / 1.0f64.tanh();
        d.w1[0] = 1.0; // hidden unit 0 reads channel 0
        d.w2[0] = k;
        let loss_correct = domain_loss(&d, &ft, &fu).unwrap();
        assert!((loss_correct - -(0.99f64.ln())).abs() < 1e-9, "{loss_correct}");

        // Swap the batches: perfectly wrong at 0.99 -> -ln(0.01).
        let loss_wrong = domain_loss(&d, &fu, &ft).unwrap();
        assert!((loss_wrong - -(0.01f64.ln())).abs() < 1e-6, "{loss_wrong}");
    }

    #[test]
    fn empty_batch_rejected() {
        let d = DomainClassifier::init(4, 0);
        assert!(domain_loss(&d, &[], &[feature_map_with_channel0(0.0, 4)]).is_err());
    }

    /// Delivered feature-extractor gradient equals `-lambda` times the
    /// finite-difference gradient of the domain loss computed without GRL.
    #[test]
    fn grl_contract_on_sampled_parameters() {
        let config = tiny_config();
        let params = DetectorParams::init(&config, 3);
        let d = DomainClassifier::init(config.feature_channels(), 5);
        let lab = sample(1, Domain::Translated, true);
        let unlab = sample(2, Domain::Target, false);

        let loss_of = |p: &DetectorParams| {
            let (cl, _, _) = forward_cached(p, &lab.image).unwrap();
            let (cu, _, _) = forward_cached(p, &unlab.image).unwrap();
            let ft = FeatureMap { values: cl.features().clone(), stride: 8 };
            let fu = FeatureMap { values: cu.features().clone(), stride: 8 };
            domain_loss(&d, &[ft], &[fu]).unwrap()
        };

        let (cl, _, _) = forward_cached(&params, &lab.image).unwrap();
        let (cu, _, _) = forward_cached(&params, &unlab.image).unwrap();
        let (_, _, phi) = domain_phi_grads(&params, &d, &cl, &cu);
        let phi_tensors = phi.tensors();

        let lambda = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            // Backbone tensors are the first 8 in the fixed order.
            let t = rng.gen_range(0..8);
            if phi_tensors[t].is_empty() {
                continue;
            }
            let e = rng.gen_range(0..phi_tensors[t].len());
            let delivered = -lambda * phi_tensors[t][e];
            let step = 1e-5;
            let mut plus = params.clone();
            plus.tensors_mut_vec()[t][e] += step;
            let mut minus = params.clone();
            minus.tensors_mut_vec()[t][e] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let want = -lambda * fd;
            let tol = 1e-4 * delivered.abs().max(want.abs()) + 1e-6;
            assert!(
                (delivered - want).abs() <= tol,
                "tensor {t} elem {e}: delivered {delivered} vs -lambda*fd {want}"
            );
        }
    }

    /// With lambda = 0 the detector update is bit-identical to a plain
    /// supervised step, and the unlabeled sample leaves no trace on the
    /// prediction heads; the classifier still updates.
    #[test]
    fn lambda_zero_decouples() {
        let config = tiny_config();
        let lab = sample(4, Domain::Translated, true);
        let unlab = sample(5, Domain::Target, false);
        let weights = LossWeights::default();
        let hyper = SgdHyper { momentum: 0.9, weight_decay: 5e-4 };

        // Teacher path with lambda = 0.
        let mut teacher = DetectorParams::init(&config, 7);
        let mut d = DomainClassifier::init(config.feature_channels(), 8);
        let d_before = d.clone();
        let mut state = TeacherOptState::new(&teacher, &d);
        teacher_step(
            &mut teacher, &mut d, &lab, &unlab, 0.0, &weights, ClassLossMode::Hard, 0.01, &hyper,
            &mut state,
        )
        .unwrap();

        // Plain supervised step.
        let mut plain = DetectorParams::init(&config, 7);
        let mut bufs = DetectorGrads::zeros_like(&plain);
        let (cache, _, pred) = forward_cached(&plain, &lab.image).unwrap();
        let (_, pg) = detection_loss_grad(&pred, &lab.annotations, &weights, ClassLossMode::Hard);
        let grads = backward(&plain, &cache, Some(&pg), None);
        sgd_step(&mut plain, &grads, &mut bufs, 0.01, &hyper);

        assert_eq!(teacher, plain, "lambda=0 updates must be bit-identical");
        assert_ne!(d, d_before, "domain classifier still learns at lambda=0");
    }

    /// One step decreases the classifier's loss in its own parameters while
    /// the reversed update pushes the features in the ascent direction.
    #[test]
    fn adversarial_directions_oppose() {
        let config = tiny_config();
        let lab = sample(14, Domain::Translated, true);
        let unlab = sample(15, Domain::Target, false);
        // Zero detection weights isolate the adversarial part; no decay.
        let weights = LossWeights { objectness: 0.0, classification: 0.0, bbox: 0.0 };
        let hyper = SgdHyper { momentum: 0.0, weight_decay: 0.0 };

        let mut teacher = DetectorParams::init(&config, 20);
        let mut d = DomainClassifier::init(config.feature_channels(), 21);
        let teacher_before = teacher.clone();
        let d_before = d.clone();

        let eval = |p: &DetectorParams, dc: &DomainClassifier| {
            let (cl, _, _) = forward_cached(p, &lab.image).unwrap();
            let (cu, _, _) = forward_cached(p, &unlab.image).unwrap();
            let pooled_t = cl.features().global_avg_pool();
            let pooled_u = cu.features().global_avg_pool();
            0.5 * (bce_with_logit(dc.logit(&pooled_t), 0.0)
                + bce_with_logit(dc.logit(&pooled_u), 1.0))
        };
        let before = eval(&teacher_before, &d_before);

        let mut state = TeacherOptState::new(&teacher, &d);
        teacher_step(
            &mut teacher, &mut d, &lab, &unlab, 1.0, &weights, ClassLossMode::Hard, 1e-4, &hyper,
            &mut state,
        )
        .unwrap();

        let after_d_only = eval(&teacher_before, &d);
        assert!(after_d_only < before, "classifier step must descend: {after_d_only} vs {before}");

        let after_phi_only = eval(&teacher, &d_before);
        assert!(after_phi_only > before, "reversed feature step must ascend: {after_phi_only} vs {before}");
    }

    #[test]
    fn teacher_step_validates_inputs() {
        let config = tiny_config();
        let mut teacher = DetectorParams::init(&config, 1);
        let mut d = DomainClassifier::init(config.feature_channels(), 2);
        let mut state = TeacherOptState::new(&teacher, &d);
        let weights = LossWeights::default();
        let hyper = SgdHyper { momentum: 0.9, weight_decay: 0.0 };

        // Missing annotations.
        let bad_lab = sample(1, Domain::Translated, false);
        let unlab = sample(2, Domain::Target, false);
        let err = teacher_step(
            &mut teacher, &mut d, &bad_lab, &unlab, 1.0, &weights, ClassLossMode::Hard, 0.01,
            &hyper, &mut state,
        );
        assert!(matches!(err, Err(Error::Data(_))));

        // Unlabeled sample from the wrong domain.
        let lab = sample(1, Domain::Translated, true);
        let bad_unlab = sample(2, Domain::Source, false);
        assert!(teacher_step(
            &mut teacher, &mut d, &lab, &bad_unlab, 1.0, &weights, ClassLossMode::Hard, 0.01,
            &hyper, &mut state,
        )
        .is_err());
    }
}
