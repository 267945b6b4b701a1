//! Randomized small evaluation instances and an exhaustive AP/AR reference.

use super::oracles::{ap_oracle, best_assignment};
use egl_core::imaging::{Image, Mask};
use egl_core::metrics::{
    grounding_mask_recall, mask_ap_ar, mean_iou, AreaBuckets, PredictedMask, Prediction, DEFAULT_IOU_THRESHOLDS,
};
use egl_core::numerics::Sampler;
use egl_core::scene::{Category, Color, Instance, SceneGroundTruth};

const N: usize = 6;

fn random_mask(rng: &mut Sampler) -> Mask {
    let (y0, x0) = (rng.below(N), rng.below(N));
    let (y1, x1) = (y0 + 1 + rng.below(N - y0), x0 + 1 + rng.below(N - x0));
    let mut m = Mask::empty(N, N);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(y, x, true);
        }
    }
    m
}

fn overlap(a: &Mask, b: &Mask) -> f64 {
    let (mut i, mut u) = (0, 0);
    for (p, q) in a.bits().iter().zip(b.bits()) {
        i += (*p && *q) as usize;
        u += (*p || *q) as usize;
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

pub fn instance(rng: &mut Sampler) -> (SceneGroundTruth, Prediction) {
    let id = rng.next_seed();
    let cat = |rng: &mut Sampler| Category::ALL[rng.below(2)];
    let instances: Vec<Instance> = (0..1 + rng.below(5))
        .map(|_| {
            let mask = random_mask(rng);
            Instance {
                category: cat(rng),
                color: Color::Red,
                area: mask.area(),
                mask,
            }
        })
        .collect();
    let items = (0..rng.below(6))
        .map(|_| {
            // predictions reuse a GT mask often so that high-IoU matches occur
            let mask = match rng.below(4) {
                0 => None,
                1 | 2 => Some(instances[rng.below(instances.len())].mask.clone()),
                _ => Some(random_mask(rng)),
            };
            PredictedMask {
                phrase: String::new(),
                category: Some(cat(rng)),
                mask,
                point: (0, 0),
                score: rng.below(3) as f64,
            }
        })
        .collect();
    (
        SceneGroundTruth {
            id,
            image: Image::filled(N, N, [0.0; 3]),
            instances,
            caption: vec![],
        },
        Prediction { scene_id: id, items },
    )
}

pub fn iou_matrix(gt: &SceneGroundTruth, p: &Prediction) -> Vec<Vec<f64>> {
    gt.instances
        .iter()
        .map(|g| {
            p.items
                .iter()
                .map(|it| match (&it.mask, it.category == Some(g.category)) {
                    (Some(m), true) => overlap(&g.mask, m),
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Per-category AP and AR over thresholds from exhaustive prefix matchings.
pub fn apar_oracle(set: &[(SceneGroundTruth, Prediction)], keep: &dyn Fn(usize) -> bool) -> Option<(f64, f64)> {
    let (mut ap, mut ar, mut n_cat) = (0.0, 0.0, 0);
    for cat in Category::ALL {
        let n_gt: usize = set
            .iter()
            .map(|(g, _)| g.instances.iter().filter(|i| i.category == cat && keep(i.area)).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        n_cat += 1;
        let mut ranked: Vec<(f64, usize, usize, usize)> = Vec::new();
        for (s, (_, p)) in set.iter().enumerate() {
            for (j, it) in p.items.iter().enumerate() {
                if it.category == Some(cat) && keep(it.mask.as_ref().map_or(0, |m| m.area())) {
                    ranked.push((it.score, ranked.len(), s, j));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let (mut cap, mut car) = (0.0, 0.0);
        for &t in &DEFAULT_IOU_THRESHOLDS {
            let mut tp_after = Vec::new();
            for k in 0..ranked.len() {
                let mut tp = 0;
                for (s, (g, p)) in set.iter().enumerate() {
                    let gts: Vec<usize> = (0..g.instances.len()).filter(|&i| g.instances[i].category == cat && keep(g.instances[i].area)).collect();
                    let preds: Vec<usize> = ranked[..=k].iter().filter(|r| r.2 == s).map(|r| r.3).collect();
                    let w = iou_matrix(g, p);
                    let sub: Vec<Vec<f64>> = gts.iter().map(|&i| preds.iter().map(|&j| w[i][j]).collect()).collect();
                    tp += best_assignment(&sub, preds.len(), &|a, b| sub[a][b] >= t).1;
                }
                tp_after.push(tp);
            }
            cap += ap_oracle(&tp_after, n_gt);
            car += tp_after.last().copied().unwrap_or(0) as f64 / n_gt as f64;
        }
        ap += cap / DEFAULT_IOU_THRESHOLDS.len() as f64;
        ar += car / DEFAULT_IOU_THRESHOLDS.len() as f64;
    }
    (n_cat > 0).then(|| (ap / n_cat as f64, ar / n_cat as f64))
}


/// Runs `rounds` random instances against the exhaustive reference; the first mismatch is returned.
pub fn check_rounds(rounds: usize, seed: u64) -> Result<(), String> {
    let mut rng = Sampler::new(seed);
    let buckets = AreaBuckets { small_max: 4, medium_max: 12 };
    for round in 0..rounds {
        let set: Vec<(SceneGroundTruth, Prediction)> = (0..1 + rng.below(2)).map(|_| instance(&mut rng)).collect();
        let gts: Vec<SceneGroundTruth> = set.iter().map(|s| s.0.clone()).collect();
        let preds: Vec<Prediction> = set.iter().map(|s| s.1.clone()).collect();

        let n: usize = gts.iter().map(|g| g.instances.len()).sum();
        let (mut iou_sum, mut hits, mut hits_low) = (0.0, 0, 0);
        for (g, p) in &set {
            let w = iou_matrix(g, p);
            iou_sum += best_assignment(&w, p.items.len(), &|_, _| true).0;
            hits += best_assignment(&w, p.items.len(), &|a, b| w[a][b] >= 0.5).1;
            hits_low += best_assignment(&w, p.items.len(), &|a, b| w[a][b] >= 0.25).1;
        }
        let miou = mean_iou(&preds, &gts);
        if (miou - iou_sum / n as f64).abs() >= 1e-12 {
            return Err(format!("round {round}: miou {miou}"));
        }
        let recall = grounding_mask_recall(&preds, &gts, 0.5);
        if recall != hits as f64 / n as f64 {
            return Err(format!("round {round}: recall {recall}"));
        }
        let low = grounding_mask_recall(&preds, &gts, 0.25);
        if low < recall || low != hits_low as f64 / n as f64 {
            return Err(format!("round {round}: recall at 0.25 {low}"));
        }

        let got = mask_ap_ar(&preds, &gts, &DEFAULT_IOU_THRESHOLDS, Some(&buckets));
        let (ap, ar) = apar_oracle(&set, &|_| true).unwrap();
        if (got.ap - ap).abs() >= 1e-12 || (got.ar - ar).abs() >= 1e-12 {
            return Err(format!("round {round}: {got:?} vs {ap} {ar}"));
        }
        let b = got.buckets.unwrap();
        for (lo, hi, v) in [(0, 4, b.s), (4, 12, b.m), (12, usize::MAX, b.l)] {
            let want = apar_oracle(&set, &|a| a >= lo && a < hi);
            match (v, want) {
                (None, None) => {}
                (Some(v), Some((ap, ar))) if (v.ap - ap).abs() < 1e-12 && (v.ar - ar).abs() < 1e-12 => {}
                other => return Err(format!("round {round}: bucket differs {other:?}")),
            }
        }
    }
    Ok(())
}
