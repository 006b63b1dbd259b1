use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgbt_core::detector::{decode, nms, Detection, HeadLevel, HeadOutput};
use rgbt_core::fusion::merge_scores;
use rgbt_core::geometry::BoxXyxy;

fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

/// Keeps detection `i` iff no higher-scoring, same-class, kept detection
/// overlaps it above the threshold. Scores are distinct so the order is
/// total.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut kept = vec![false; n];
    for (rank, &i) in order.iter().enumerate() {
        kept[i] = order[..rank]
            .iter()
            .all(|&j| !kept[j] || dets[j].class_id != dets[i].class_id || iou(&dets[j].bbox, &dets[i].bbox) <= thr);
    }
    order.into_iter().filter(|&i| kept[i]).map(|i| dets[i]).collect()
}

fn random_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|k| {
            let x = rng.random_range(0.0..40.0);
            let y = rng.random_range(0.0..40.0);
            let w = rng.random_range(5.0..30.0);
            let h = rng.random_range(5.0..30.0);
            Detection {
                class_id: rng.random_range(0..classes),
                // Distinct scores.
                score: rng.random_range(0.0..0.9) + k as f64 * 1e-6,
                bbox: BoxXyxy::new(x, y, x + w, y + h),
            }
        })
        .collect()
}

#[test]
fn nms_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..500 {
        let dets = random_dets(&mut rng, 5, 2);
        let thr = rng.random_range(0.1..0.9);
        assert_eq!(nms(dets.clone(), thr), nms_oracle(&dets, thr));
    }
}

#[test]
fn nms_keeps_everything_at_threshold_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dets = random_dets(&mut rng, 20, 3);
    assert_eq!(nms(dets.clone(), 1.0).len(), 20);
}

fn det(c: usize, s: f64, b: [f64; 4]) -> Detection {
    Detection {
        class_id: c,
        score: s,
        bbox: BoxXyxy::new(b[0], b[1], b[2], b[3]),
    }
}

#[test]
fn merge_scores_pairs_overlapping_detections() {
    let rgb = [det(0, 0.6, [0., 0., 10., 10.])];
    let ir = [det(0, 0.9, [0., 0., 10., 12.])];
    let out = merge_scores(&rgb, &ir, 0.65, 0.6);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].score, 0.9);
    // Score-weighted mean of y2: (0.6·10 + 0.9·12) / 1.5 = 11.2.
    assert!((out[0].bbox.y2 - 11.2).abs() < 1e-12);
}

#[test]
fn merge_scores_keeps_different_classes_apart() {
    let rgb = [det(0, 0.6, [0., 0., 10., 10.])];
    let ir = [det(1, 0.9, [0., 0., 10., 10.])];
    let out = merge_scores(&rgb, &ir, 0.65, 0.6);
    assert_eq!(out.len(), 2);
}

fn far_apart(a: &[Detection], b: &[Detection]) -> bool {
    a.iter().all(|x| b.iter().all(|y| iou(&x.bbox, &y.bbox) == 0.0))
}

#[test]
fn merge_scores_without_cross_pairs_is_nms_of_union() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checked = 0;
    for _ in 0..200 {
        let rgb = random_dets(&mut rng, 5, 2);
        let mut ir = random_dets(&mut rng, 5, 2);
        for d in &mut ir {
            d.bbox = BoxXyxy::new(d.bbox.x1 + 200.0, d.bbox.y1, d.bbox.x2 + 200.0, d.bbox.y2);
        }
        if !far_apart(&rgb, &ir) {
            continue;
        }
        checked += 1;
        let union: Vec<Detection> = rgb.iter().chain(&ir).copied().collect();
        let mut a = merge_scores(&rgb, &ir, 0.65, 0.5);
        let mut b = nms_oracle(&union, 0.5);
        a.sort_by(|x, y| y.score.total_cmp(&x.score));
        b.sort_by(|x, y| y.score.total_cmp(&x.score));
        assert_eq!(a, b);
    }
    assert!(checked > 0);
}

#[test]
fn merge_scores_with_itself_keeps_boxes_and_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..50 {
        let d = random_dets(&mut rng, 10, 2);
        let merged = merge_scores(&d, &d, 0.65, 0.5);
        let alone = nms(d.clone(), 0.5);
        assert_eq!(merged.len(), alone.len());
        for (m, a) in merged.iter().zip(&alone) {
            assert_eq!(m.score, a.score);
            assert_eq!(m.class_id, a.class_id);
            for (u, v) in m.bbox.as_array().iter().zip(a.bbox.as_array()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }
}

/// One stride-8 level over a 10×10 grid with a single live anchor at cell
/// (4, 4), centered on pixel (36, 36).
fn single_anchor_head(side_logits: &[f64], cls_logit: f64) -> HeadOutput {
    let r = side_logits.len();
    let (g, cell) = (10, 4 * 10 + 4);
    let mut cls = vec![-60.0; g * g];
    cls[cell] = cls_logit;
    let mut dist = vec![0.0; 4 * r * g * g];
    for side in 0..4 {
        for (j, v) in side_logits.iter().enumerate() {
            dist[(side * r + j) * g * g + cell] = *v;
        }
    }
    HeadOutput {
        levels: vec![HeadLevel {
            stride: 8,
            cls: Tensor::from_vec(cls, (1, 1, g, g), &Device::Cpu).unwrap(),
            dist: Tensor::from_vec(dist, (1, 4 * r, g, g), &Device::Cpu).unwrap(),
        }],
        reg_max: r,
    }
}

#[test]
fn decode_one_hot_bin() {
    let mut logits = vec![-1e4; 16];
    logits[4] = 0.0;
    let d = decode(&single_anchor_head(&logits, 5.0), 0.5).unwrap();
    assert_eq!(d[0].len(), 1);
    let b = d[0][0].bbox;
    assert!((b.x1 - 4.0).abs() < 1e-9 && (b.x2 - 68.0).abs() < 1e-9);
    assert!((b.width() - 64.0).abs() < 1e-9);
}

#[test]
fn decode_uniform_distribution() {
    let d = decode(&single_anchor_head(&[0.0; 16], 5.0), 0.5).unwrap();
    // Mean bin 7.5 → 60 px per side at stride 8.
    let b = d[0][0].bbox;
    assert!((b.x1 - (36.0 - 60.0)).abs() < 1e-9);
    assert!((b.y2 - (36.0 + 60.0)).abs() < 1e-9);
}

#[test]
fn decode_drops_low_scores() {
    let d = decode(&single_anchor_head(&[0.0; 16], -60.0), 0.001).unwrap();
    assert!(d[0].is_empty());
}

proptest! {
    #[test]
    fn decode_side_grows_with_mass_on_far_bin(base in prop::collection::vec(-2.0..2.0f64, 8), bump in 0.1..3.0f64) {
        let a = decode(&single_anchor_head(&base, 5.0), 0.5).unwrap()[0][0].bbox;
        let mut bumped = base.clone();
        bumped[7] += bump;
        let b = decode(&single_anchor_head(&bumped, 5.0), 0.5).unwrap()[0][0].bbox;
        prop_assert!(b.width() > a.width());
        prop_assert!(b.height() > a.height());
    }

    #[test]
    fn decode_recovers_encoded_distances(t in 0.0..14.99f64) {
        // Two-bin encoding of t: mass (i+1-t) on bin i and (t-i) on bin i+1.
        let i = t.floor() as usize;
        let mut probs = vec![1e-300; 16];
        probs[i] += i as f64 + 1.0 - t;
        probs[i + 1] += t - i as f64;
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let b = decode(&single_anchor_head(&logits, 5.0), 0.5).unwrap()[0][0].bbox;
        prop_assert!((36.0 - b.x1 - 8.0 * t).abs() < 1e-6);
        prop_assert!((b.y2 - 36.0 - 8.0 * t).abs() < 1e-6);
    }
}
