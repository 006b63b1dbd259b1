use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::HeadOutput;
use crate::error::Result;
use crate::geometry::BoxXyxy;

/// Confidence threshold used during evaluation.
pub const DEFAULT_EVAL_CONF: f64 = 0.001;
/// Confidence threshold used for prediction output.
pub const DEFAULT_PREDICT_CONF: f64 = 0.25;
pub const DEFAULT_IOU: f64 = 0.60;
/// Cap on detections kept per image after suppression.
pub const MAX_DETECTIONS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// Input-pixel corners.
    pub bbox: BoxXyxy,
}

/// Expected bin index of a softmax distribution over `logits`.
pub(crate) fn expected_bin(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (j, l) in logits.iter().enumerate() {
        let e = (l - max).exp();
        z += e;
        acc += e * j as f64;
    }
    acc / z
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns raw head outputs into per-image detection lists.
///
/// Each side distance is `stride * E[bin]` under the softmax of its bin
/// logits; the class score is the sigmoid of the best class logit. Anchors
/// scoring below `conf` or yielding an empty box are dropped.
pub fn decode(head: &HeadOutput, conf: f64) -> Result<Vec<Vec<Detection>>> {
    let (cls, dist) = head.flatten()?;
    let (b, a, c) = cls.dims3()?;
    let r = head.reg_max;
    let cls = cls.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let dist = dist.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let anchors = head.anchors()?;

    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut dets = Vec::new();
        for (ai, anchor) in anchors.iter().enumerate() {
            let row = &cls[(bi * a + ai) * c..(bi * a + ai + 1) * c];
            let (class_id, logit) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
            let score = sigmoid(logit);
            if score < conf {
                continue;
            }
            let base = (bi * a + ai) * 4 * r;
            let s = anchor.stride as f64;
            let side = |k: usize| expected_bin(&dist[base + k * r..base + (k + 1) * r]) * s;
            let bbox = BoxXyxy::new(
                anchor.x - side(0),
                anchor.y - side(1),
                anchor.x + side(2),
                anchor.y + side(3),
            );
            if bbox.x2 > bbox.x1 && bbox.y2 > bbox.y1 {
                dets.push(Detection {
                    class_id,
                    score,
                    bbox,
                });
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Class-wise greedy suppression. Detections are visited by descending
/// score (stable for ties) and a detection is dropped when it overlaps an
/// already kept same-class detection with IoU above `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
            if keep.len() == MAX_DETECTIONS {
                break;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::HeadLevel;
    use candle_core::{Device, Tensor};

    fn det(class_id: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id,
            score,
            bbox: BoxXyxy::new(b[0], b[1], b[2], b[3]),
        }
    }

    /// Single-level head at stride 8 over a 10×10 grid; anchor (4, 4) sits at
    /// pixel (36, 36).
    fn head_with(dist_row: &[f64], cls_logit: f64, reg_max: usize) -> HeadOutput {
        let (h, w) = (10, 10);
        let mut cls = vec![-50.0; h * w];
        cls[4 * w + 4] = cls_logit;
        let mut dist = vec![0.0; 4 * reg_max * h * w];
        for side in 0..4 {
            for j in 0..reg_max {
                dist[(side * reg_max + j) * h * w + 4 * w + 4] = dist_row[j];
            }
        }
        HeadOutput {
            levels: vec![HeadLevel {
                stride: 8,
                cls: Tensor::from_vec(cls, (1, 1, h, w), &Device::Cpu).unwrap(),
                dist: Tensor::from_vec(dist, (1, 4 * reg_max, h, w), &Device::Cpu).unwrap(),
            }],
            reg_max,
        }
    }

    #[test]
    fn point_mass_decodes_to_bin_times_stride() {
        let mut row = vec![-1e4; 16];
        row[4] = 1e4;
        let dets = decode(&head_with(&row, 5.0, 16), 0.5).unwrap();
        assert_eq!(dets[0].len(), 1);
        let b = dets[0][0].bbox;
        assert!((b.x1 - (36.0 - 32.0)).abs() < 1e-9);
        assert!((b.x2 - (36.0 + 32.0)).abs() < 1e-9);
        assert!((b.width() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_distribution_decodes_to_mean_bin() {
        let row = vec![0.0; 16];
        let dets = decode(&head_with(&row, 5.0, 16), 0.5).unwrap();
        let b = dets[0][0].bbox;
        assert!((36.0 - b.x1 - 8.0 * 7.5).abs() < 1e-9);
    }

    #[test]
    fn large_negative_logits_give_no_detections() {
        let row = vec![0.0; 16];
        let dets = decode(&head_with(&row, -1e3, 16), 0.001).unwrap();
        assert!(dets[0].is_empty());
    }

    #[test]
    fn nms_keeps_higher_of_identical_boxes() {
        let kept = nms(vec![det(0, 0.8, [0., 0., 10., 10.]), det(0, 0.9, [0., 0., 10., 10.])], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_and_cross_class() {
        let kept = nms(
            vec![
                det(0, 0.8, [0., 0., 10., 10.]),
                det(0, 0.7, [20., 20., 30., 30.]),
                det(1, 0.6, [0., 0., 10., 10.]),
            ],
            0.5,
        );
        assert_eq!(kept.len(), 3);
    }
}
