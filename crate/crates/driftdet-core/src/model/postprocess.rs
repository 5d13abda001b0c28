//! Box encoding/decoding and greedy non-maximum suppression.

use super::{Detection, RawPrediction};
use crate::types::BoundingBox;

const MIN_BOX_SIZE: f64 = 1e-3;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn cell_center(cell: usize, grid_w: usize, stride: usize) -> (f64, f64) {
    let gy = cell / grid_w;
    let gx = cell % grid_w;
    (
        (gx as f64 + 0.5) * stride as f64,
        (gy as f64 + 0.5) * stride as f64,
    )
}

/// Box edges as offsets from the cell center in stride units.
pub fn encode_box(bbox: &BoundingBox, cell: usize, grid_w: usize, stride: usize) -> [f64; 4] {
    let (cx, cy) = cell_center(cell, grid_w, stride);
    let s = stride as f64;
    [
        (bbox.x_min - cx) / s,
        (bbox.y_min - cy) / s,
        (bbox.x_max - cx) / s,
        (bbox.y_max - cy) / s,
    ]
}

/// Inverse of [`encode_box`]; the result is clipped to the image and kept
/// non-degenerate.
pub fn decode_box(
    deltas: [f64; 4],
    cell: usize,
    grid_w: usize,
    stride: usize,
    image_w: usize,
    image_h: usize,
) -> BoundingBox {
    let (cx, cy) = cell_center(cell, grid_w, stride);
    let s = stride as f64;
    let mut x0 = cx + deltas[0] * s;
    let mut y0 = cy + deltas[1] * s;
    let mut x1 = cx + deltas[2] * s;
    let mut y1 = cy + deltas[3] * s;
    if x1 < x0 {
        std::mem::swap(&mut x0, &mut x1);
    }
    if y1 < y0 {
        std::mem::swap(&mut y0, &mut y1);
    }
    let (w, h) = (image_w as f64, image_h as f64);
    x0 = x0.clamp(0.0, w - MIN_BOX_SIZE);
    y0 = y0.clamp(0.0, h - MIN_BOX_SIZE);
    x1 = x1.clamp(x0 + MIN_BOX_SIZE, w);
    y1 = y1.clamp(y0 + MIN_BOX_SIZE, h);
    BoundingBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 }
}

/// One candidate per cell whose objectness probability clears the floor.
pub fn decode(pred: &RawPrediction, objectness_floor: f64) -> Vec<Detection> {
    let cells = pred.cells();
    let mut out = Vec::new();
    for cell in 0..cells {
        let p_obj = sigmoid(pred.objectness[cell]);
        if p_obj < objectness_floor {
            continue;
        }
        let logits = pred.class_logits_at(cell);
        let probs = super::stable_softmax(&logits);
        let (class_id, &class_prob) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .expect("at least one class");
        let deltas = [
            pred.delta(0, cell),
            pred.delta(1, cell),
            pred.delta(2, cell),
            pred.delta(3, cell),
        ];
        let bbox = decode_box(deltas, cell, pred.grid_w, pred.stride, pred.image_w, pred.image_h);
        out.push(Detection {
            bbox,
            class_id,
            objectness: p_obj,
            class_prob,
            score: p_obj * class_prob,
            cell,
        });
    }
    out
}

/// Greedy class-agnostic suppression: walk candidates by descending score and
/// drop any that overlap an already-kept box by more than the threshold.
/// Score ties keep input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= iou_threshold) {
            kept.push(cand.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection {
            bbox: BoundingBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 },
            class_id: 0,
            objectness: score,
            class_prob: 1.0,
            score,
            cell: 0,
        }
    }

    #[test]
    fn nms_drops_duplicate() {
        let d = vec![det(0.0, 0.0, 4.0, 4.0, 0.9), det(0.0, 0.0, 4.0, 4.0, 0.8)];
        let kept = nms(&d, 0.5);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let d = vec![det(0.0, 0.0, 2.0, 2.0, 0.9), det(10.0, 10.0, 12.0, 12.0, 0.3)];
        assert_eq!(nms(&d, 0.5).len(), 2);
    }

    /// Independent re-implementation of the greedy rule for cross-checking.
    fn greedy_oracle(dets: &[Detection], tau: f64) -> Vec<f64> {
        let mut pool: Vec<&Detection> = dets.iter().collect();
        pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut kept: Vec<&Detection> = Vec::new();
        'outer: for d in pool {
            for k in &kept {
                if k.bbox.iou(&d.bbox) > tau {
                    continue 'outer;
                }
            }
            kept.push(d);
        }
        kept.iter().map(|d| d.score).collect()
    }

    /// A suppresses B; C survives because its only strong overlap (B) is gone.
    #[test]
    fn nms_chain_keeps_ends() {
        // Width-10 strips offset by 2.5: IoU of neighbours is (10-d)/(10+d) = 0.6;
        // the ends overlap by 5/15 = 1/3, below the 0.5 threshold.
        let a = det(0.0, 0.0, 10.0, 1.0, 0.9);
        let b = det(2.5, 0.0, 12.5, 1.0, 0.8);
        let c = det(5.0, 0.0, 15.0, 1.0, 0.7);
        assert!((a.bbox.iou(&b.bbox) - 0.6).abs() < 1e-9);
        assert!((b.bbox.iou(&c.bbox) - 0.6).abs() < 1e-9);
        assert!((a.bbox.iou(&c.bbox) - 1.0 / 3.0).abs() < 1e-9);
        let dets = [a, b, c];
        let kept = nms(&dets, 0.5);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7]);
        assert_eq!(scores, greedy_oracle(&dets, 0.5));
    }

    #[test]
    fn nms_matches_greedy_oracle_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let dets: Vec<Detection> = (0..rng.gen_range(0..12))
                .map(|_| {
                    let x0 = rng.gen::<f64>() * 30.0;
                    let y0 = rng.gen::<f64>() * 30.0;
                    det(
                        x0,
                        y0,
                        x0 + 2.0 + rng.gen::<f64>() * 10.0,
                        y0 + 2.0 + rng.gen::<f64>() * 10.0,
                        rng.gen(),
                    )
                })
                .collect();
            let tau = rng.gen::<f64>();
            let got: Vec<f64> = nms(&dets, tau).iter().map(|d| d.score).collect();
            assert_eq!(got, greedy_oracle(&dets, tau));
        }
    }

    #[test]
    fn nms_is_idempotent_and_ordered() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..10)
                .map(|_| {
                    let x0 = rng.gen::<f64>() * 20.0;
                    let y0 = rng.gen::<f64>() * 20.0;
                    det(x0, y0, x0 + 1.0 + rng.gen::<f64>() * 8.0, y0 + 1.0 + rng.gen::<f64>() * 8.0, rng.gen())
                })
                .collect();
            let once = nms(&dets, 0.4);
            let twice = nms(&once, 0.4);
            assert_eq!(once, twice);
            for w in once.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
            for i in 0..once.len() {
                for j in i + 1..once.len() {
                    assert!(once[i].bbox.iou(&once[j].bbox) <= 0.4 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let bbox = BoundingBox { x_min: 3.25, y_min: 10.5, x_max: 27.75, y_max: 41.0 };
        let (grid_w, stride, img) = (8, 8, 64);
        for cell in [0usize, 9, 35, 63] {
            let deltas = encode_box(&bbox, cell, grid_w, stride);
            let back = decode_box(deltas, cell, grid_w, stride, img, img);
            assert!((back.x_min - bbox.x_min).abs() < 1e-3);
            assert!((back.y_min - bbox.y_min).abs() < 1e-3);
            assert!((back.x_max - bbox.x_max).abs() < 1e-3);
            assert!((back.y_max - bbox.y_max).abs() < 1e-3);
        }
    }
}
