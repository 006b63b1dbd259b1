//! Precision, recall and average precision with greedy IoU matching.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geometry::BoxXyxy;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Matches detections (already in descending score order) to ground truth.
/// Each detection takes the unmatched same-class box with the highest IoU
/// at or above `iou_thresh`; earlier boxes win IoU ties. Returns one TP
/// flag per detection.
pub fn match_detections(dets: &[Detection], gts: &[(usize, BoxXyxy)], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (gi, (c, g)) in gts.iter().enumerate() {
                if used[gi] || *c != d.class_id {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            match best {
                Some((_, gi)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Cumulative precision and recall. `None` when the class has no ground
/// truth.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut p = Vec::with_capacity(flags.len());
    let mut r = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        p.push(tp as f64 / (k + 1) as f64);
        r.push(tp as f64 / n_gt as f64);
    }
    Some((p, r))
}

/// Area under the precision envelope (running maximum from the right),
/// summed over recall steps.
pub fn average_precision(p: &[f64], r: &[f64]) -> f64 {
    let mut env = p.to_vec();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (pe, &rk) in env.iter().zip(r) {
        ap += pe * (rk - prev);
        prev = rk;
    }
    ap
}

/// Mean over classes that have an AP. `None` when no class does.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = aps.iter().flatten().copied().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub instances: usize,
    /// Precision and recall at the maximum-F1 operating point (IoU 0.5).
    pub precision: f64,
    pub recall: f64,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub classes: Vec<ClassMetrics>,
    pub map50: Option<f64>,
    pub map: Option<f64>,
}

struct ClassFlags {
    scored: Vec<(f64, bool)>,
    n_gt: usize,
}

fn class_flags(
    preds: &[Vec<Detection>],
    gts: &[Vec<(usize, BoxXyxy)>],
    num_classes: usize,
    iou_thresh: f64,
) -> Vec<ClassFlags> {
    let mut out: Vec<ClassFlags> = (0..num_classes)
        .map(|_| ClassFlags {
            scored: Vec::new(),
            n_gt: 0,
        })
        .collect();
    for (dets, g) in preds.iter().zip(gts) {
        for (c, _) in g {
            if let Some(cf) = out.get_mut(*c) {
                cf.n_gt += 1;
            }
        }
        let mut sorted = dets.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        let flags = match_detections(&sorted, g, iou_thresh);
        for (d, f) in sorted.iter().zip(flags) {
            if let Some(cf) = out.get_mut(d.class_id) {
                cf.scored.push((d.score, f));
            }
        }
    }
    for cf in &mut out {
        cf.scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    }
    out
}

/// Evaluates per-image detections against per-image ground truth.
pub fn evaluate(preds: &[Vec<Detection>], gts: &[Vec<(usize, BoxXyxy)>], num_classes: usize) -> MetricsReport {
    let thresholds = coco_thresholds();
    let per_thresh: Vec<Vec<ClassFlags>> = thresholds
        .iter()
        .map(|&t| class_flags(preds, gts, num_classes, t))
        .collect();

    let classes: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let n_gt = per_thresh[0][c].n_gt;
            let aps: Vec<Option<f64>> = per_thresh
                .iter()
                .map(|cf| {
                    let flags: Vec<bool> = cf[c].scored.iter().map(|s| s.1).collect();
                    pr_curve(&flags, n_gt).map(|(p, r)| average_precision(&p, &r))
                })
                .collect();
            let flags50: Vec<bool> = per_thresh[0][c].scored.iter().map(|s| s.1).collect();
            let (precision, recall) = match pr_curve(&flags50, n_gt) {
                Some((p, r)) => {
                    let mut best = (0.0, 0.0, -1.0);
                    for (pk, rk) in p.iter().zip(&r) {
                        let f1 = if pk + rk > 0.0 { 2.0 * pk * rk / (pk + rk) } else { 0.0 };
                        if f1 > best.2 {
                            best = (*pk, *rk, f1);
                        }
                    }
                    (best.0, best.1)
                }
                None => (0.0, 0.0),
            };
            let ap = if n_gt == 0 {
                None
            } else {
                Some(aps.iter().map(|a| a.unwrap_or(0.0)).sum::<f64>() / aps.len() as f64)
            };
            ClassMetrics {
                class_id: c,
                instances: n_gt,
                precision,
                recall,
                ap50: aps[0],
                ap,
            }
        })
        .collect();

    let map50 = mean_ap(&classes.iter().map(|c| c.ap50).collect::<Vec<_>>());
    let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>());
    MetricsReport {
        images: preds.len(),
        classes,
        map50,
        map,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Fixed-width table: one row per class and an "all" row.
    pub fn to_text(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>7} {:>9} {:>7} {:>7} {:>7} {:>7}", "class", "images", "instances", "P", "R", "AP50", "AP");
        let with_gt: Vec<&ClassMetrics> = self.classes.iter().filter(|c| c.instances > 0).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if with_gt.is_empty() {
                0.0
            } else {
                with_gt.iter().map(|c| f(c)).sum::<f64>() / with_gt.len() as f64
            }
        };
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>9} {:>7.4} {:>7.4} {:>7} {:>7}",
            "all",
            self.images,
            self.classes.iter().map(|c| c.instances).sum::<usize>(),
            mean(|c| c.precision),
            mean(|c| c.recall),
            fmt_opt(self.map50),
            fmt_opt(self.map)
        );
        for c in &self.classes {
            let name = names.get(c.class_id).cloned().unwrap_or_else(|| c.class_id.to_string());
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>9} {:>7.4} {:>7.4} {:>7} {:>7}",
                name,
                self.images,
                c.instances,
                c.precision,
                c.recall,
                fmt_opt(c.ap50),
                fmt_opt(c.ap)
            );
        }
        s
    }
}
