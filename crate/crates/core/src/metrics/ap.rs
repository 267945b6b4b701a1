//! Mask AP/AR over IoU thresholds with all-point interpolation.
//!
//! Predictions of one category are ranked by score (emission order breaks
//! ties). Walking the ranking, each prediction is admitted into a one-to-one
//! matching against that category's GT instances of its scene; the matching is
//! kept maximum by augmenting paths, so the true-positive count after `k`
//! predictions is the largest achievable by any one-to-one assignment of the
//! first `k`. When every prediction overlaps at most one GT above threshold this
//! is the usual greedy score-then-IoU matcher.

use serde::{Deserialize, Serialize};

use super::matching::augment;
use super::{iou, Prediction};
use crate::scene::{Category, SceneGroundTruth};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Area cutoffs in pixels: small `< small_max`, medium `< medium_max`, large otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBuckets {
    pub small_max: usize,
    pub medium_max: usize,
}

impl Default for AreaBuckets {
    /// 32² and 96² scaled from 640-pixel images to 64-pixel images.
    fn default() -> Self {
        Self {
            small_max: 10,
            medium_max: 92,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApArPair {
    pub ap: f64,
    pub ar: f64,
}

/// Per-bucket values; `None` when no GT instance falls in the bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketValues {
    pub s: Option<ApArPair>,
    pub m: Option<ApArPair>,
    pub l: Option<ApArPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApAr {
    pub ap: f64,
    pub ar: f64,
    pub buckets: Option<BucketValues>,
}

/// All-point interpolated AP from cumulative TP counts after each ranked prediction.
pub fn interpolated_ap(tp_cumulative: &[usize], n_gt: usize) -> f64 {
    if n_gt == 0 || tp_cumulative.is_empty() {
        return 0.0;
    }
    let precision: Vec<f64> = tp_cumulative
        .iter()
        .enumerate()
        .map(|(k, &tp)| tp as f64 / (k + 1) as f64)
        .collect();
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0;
    for (k, &tp) in tp_cumulative.iter().enumerate() {
        if tp > prev {
            ap += (tp - prev) as f64 / n_gt as f64 * envelope[k];
            prev = tp;
        }
    }
    ap
}

struct Ranked<'a> {
    scene: usize,
    mask: Option<&'a crate::imaging::Mask>,
}

fn evaluate_set(
    predictions: &[Prediction],
    gts: &[SceneGroundTruth],
    thresholds: &[f64],
    gt_keep: &dyn Fn(usize) -> bool,
    pred_keep: &dyn Fn(usize) -> bool,
) -> Option<ApArPair> {
    let scene_pos: std::collections::HashMap<u64, usize> = gts.iter().enumerate().map(|(i, g)| (g.id, i)).collect();
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut n_cat = 0usize;
    for cat in Category::ALL {
        let gt_lists: Vec<Vec<&crate::imaging::Mask>> = gts
            .iter()
            .map(|g| {
                g.instances
                    .iter()
                    .filter(|i| i.category == cat && gt_keep(i.area))
                    .map(|i| &i.mask)
                    .collect()
            })
            .collect();
        let n_gt: usize = gt_lists.iter().map(|l| l.len()).sum();
        if n_gt == 0 {
            continue;
        }
        n_cat += 1;
        let mut ranked: Vec<(f64, usize, Ranked)> = Vec::new();
        for p in predictions {
            let Some(&scene) = scene_pos.get(&p.scene_id) else { continue };
            for item in &p.items {
                if item.category != Some(cat) {
                    continue;
                }
                if !pred_keep(item.mask().map_or(0, |m| m.area())) {
                    continue;
                }
                let order = ranked.len();
                ranked.push((item.score, order, Ranked { scene, mask: item.mask() }));
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let ious: Vec<Vec<f64>> = ranked
            .iter()
            .map(|(_, _, r)| {
                gt_lists[r.scene]
                    .iter()
                    .map(|g| r.mask.and_then(|m| iou(g, m).ok()).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let (mut cat_ap, mut cat_ar) = (0.0, 0.0);
        for &t in thresholds {
            // per scene: adjacency of each admitted prediction and the GT owners
            let mut adj: Vec<Vec<Vec<usize>>> = vec![Vec::new(); gts.len()];
            let mut owners: Vec<Vec<Option<usize>>> = gt_lists.iter().map(|l| vec![None; l.len()]).collect();
            let mut tp = 0usize;
            let mut cumulative = Vec::with_capacity(ranked.len());
            for (k, (_, _, r)) in ranked.iter().enumerate() {
                let s = r.scene;
                let row: Vec<usize> = (0..ious[k].len()).filter(|&g| ious[k][g] >= t).collect();
                adj[s].push(row);
                let idx = adj[s].len() - 1;
                let mut seen = vec![false; owners[s].len()];
                if augment(idx, &adj[s], &mut seen, &mut owners[s]) {
                    tp += 1;
                }
                cumulative.push(tp);
            }
            cat_ap += interpolated_ap(&cumulative, n_gt);
            cat_ar += tp as f64 / n_gt as f64;
        }
        ap_sum += cat_ap / thresholds.len() as f64;
        ar_sum += cat_ar / thresholds.len() as f64;
    }
    (n_cat > 0).then(|| ApArPair {
        ap: ap_sum / n_cat as f64,
        ar: ar_sum / n_cat as f64,
    })
}

/// Category-averaged AP and AR over `thresholds`, optionally split by GT area.
/// Within a bucket only GT instances and predicted masks whose area falls in
/// that bucket take part.
pub fn mask_ap_ar(
    predictions: &[Prediction],
    gts: &[SceneGroundTruth],
    thresholds: &[f64],
    buckets: Option<&AreaBuckets>,
) -> ApAr {
    let all = evaluate_set(predictions, gts, thresholds, &|_| true, &|_| true).unwrap_or(ApArPair { ap: 0.0, ar: 0.0 });
    let buckets = buckets.map(|b| {
        let (s, m) = (b.small_max, b.medium_max);
        let run = |lo: usize, hi: usize| {
            evaluate_set(predictions, gts, thresholds, &|a| a >= lo && a < hi, &|a| a >= lo && a < hi)
        };
        BucketValues {
            s: run(0, s),
            m: run(s, m),
            l: run(m, usize::MAX),
        }
    });
    ApAr {
        ap: all.ap,
        ar: all.ar,
        buckets,
    }
}
