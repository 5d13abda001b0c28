//! SGD with momentum and L2 weight decay, the single update rule shared by
//! every training role.
//!
//! Update: `v <- momentum * v + g + wd * p; p <- p - lr * v`.

use crate::model::{DetectorGrads, DetectorParams};

#[derive(Debug, Clone, Copy)]
pub struct SgdHyper {
    pub momentum: f64,
    pub weight_decay: f64,
}

pub fn sgd_step_slice(
    params: &mut [f64],
    grads: &[f64],
    buf: &mut [f64],
    lr: f64,
    hyper: &SgdHyper,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), buf.len());
    for i in 0..params.len() {
        let v = hyper.momentum * buf[i] + grads[i] + hyper.weight_decay * params[i];
        buf[i] = v;
        params[i] -= lr * v;
    }
}

/// One optimizer step over the whole detector.
pub fn sgd_step(
    params: &mut DetectorParams,
    grads: &DetectorGrads,
    buf: &mut DetectorGrads,
    lr: f64,
    hyper: &SgdHyper,
) {
    let p = params.tensors_mut_vec();
    let g = grads.tensors();
    let b = buf.tensors_mut();
    debug_assert_eq!(p.len(), g.len());
    for ((pt, gt), bt) in p.into_iter().zip(g).zip(b) {
        sgd_step_slice(pt, gt, bt, lr, hyper);
    }
}
