//! Grounding and instance-segmentation metrics.

mod ap;
pub mod matching;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::numerics::Sampler;
use crate::scene::{Category, SceneGroundTruth};
use crate::segmenter::segment_point;

pub use ap::{mask_ap_ar, ApAr, AreaBuckets, BucketValues, DEFAULT_IOU_THRESHOLDS};
use matching::{max_cardinality_matching, max_weight_assignment};

/// One phrase-mask pair emitted for a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedMask {
    pub phrase: String,
    pub category: Option<Category>,
    #[serde(skip)]
    pub mask: Option<Mask>,
    pub point: (usize, usize),
    pub score: f64,
}

impl PredictedMask {
    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scene_id: u64,
    pub items: Vec<PredictedMask>,
}

/// Per-GT-instance match: prediction index and IoU.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Option<(usize, f64)>>,
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension {
            op: "iou",
            left: vec![a.height(), a.width()],
            right: vec![b.height(), b.width()],
        });
    }
    let u = a.union_area(b);
    if u == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_area(b) as f64 / u as f64)
}

fn iou_or_zero(a: &Mask, b: Option<&Mask>) -> f64 {
    b.and_then(|b| iou(a, b).ok()).unwrap_or(0.0)
}

/// Noun and synonym lookup into categories.
#[derive(Clone, Debug)]
pub struct SynonymTable {
    map: HashMap<String, Category>,
}

impl Default for SynonymTable {
    fn default() -> Self {
        let mut map: HashMap<String, Category> = Category::ALL.iter().map(|c| (c.noun().to_string(), *c)).collect();
        map.insert("disk".into(), Category::Circle);
        map.insert("box".into(), Category::Square);
        map.insert("wedge".into(), Category::Triangle);
        Self { map }
    }
}

impl SynonymTable {
    pub fn resolve(&self, word: &str) -> Option<Category> {
        self.map.get(word).copied()
    }
}

/// Resolves the phrase's central noun (its last resolvable word) and applies the in-image filter.
pub fn match_phrase_to_category(phrase: &str, scene_categories: &[Category], table: &SynonymTable) -> Option<Category> {
    let cat = phrase.split_whitespace().rev().find_map(|w| table.resolve(w))?;
    scene_categories.contains(&cat).then_some(cat)
}

fn scene_index(gts: &[SceneGroundTruth]) -> HashMap<u64, &SceneGroundTruth> {
    gts.iter().map(|g| (g.id, g)).collect()
}

/// Fraction of retained predictions whose point lies in a GT mask of the same category.
pub fn point_accuracy(predictions: &[Prediction], gts: &[SceneGroundTruth]) -> Option<f64> {
    let index = scene_index(gts);
    let (mut hit, mut total) = (0usize, 0usize);
    for p in predictions {
        let Some(gt) = index.get(&p.scene_id) else { continue };
        for item in &p.items {
            let Some(cat) = item.category else { continue };
            total += 1;
            let (y, x) = item.point;
            if gt
                .instances
                .iter()
                .any(|i| i.category == cat && y < i.mask.height() && x < i.mask.width() && i.mask.get(y, x))
            {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// One uniformly sampled point per GT category per scene, segmented and scored as that category.
pub fn random_point_baseline(scenes: &[SceneGroundTruth], seed: u64, color_tol: f64) -> Result<Vec<Prediction>> {
    let mut rng = Sampler::new(seed);
    scenes
        .iter()
        .map(|s| {
            let (h, w) = (s.image.height(), s.image.width());
            let items = s
                .categories()
                .into_iter()
                .map(|cat| {
                    let point = (rng.below(h), rng.below(w));
                    Ok(PredictedMask {
                        phrase: format!("a {}", cat.noun()),
                        category: Some(cat),
                        mask: Some(segment_point(&s.image, point, color_tol)?),
                        point,
                        score: 1.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Prediction { scene_id: s.id, items })
        })
        .collect()
}

/// Optimal same-category assignment maximizing total IoU within one scene.
pub fn match_scene(pred: &[PredictedMask], gt: &SceneGroundTruth) -> MatchResult {
    let weights: Vec<Vec<f64>> = gt
        .instances
        .iter()
        .map(|g| {
            pred.iter()
                .map(|p| if p.category == Some(g.category) { iou_or_zero(&g.mask, p.mask()) } else { 0.0 })
                .collect()
        })
        .collect();
    if pred.is_empty() {
        return MatchResult {
            matches: vec![None; gt.instances.len()],
        };
    }
    let a = max_weight_assignment(&weights);
    MatchResult {
        matches: a
            .into_iter()
            .enumerate()
            .map(|(g, j)| j.map(|j| (j, weights[g][j])))
            .collect(),
    }
}

fn predictions_for(predictions: &[Prediction], id: u64) -> Vec<&PredictedMask> {
    predictions.iter().filter(|p| p.scene_id == id).flat_map(|p| &p.items).collect()
}

/// Mean over all GT instances of the matched IoU (unmatched instances count 0).
pub fn mean_iou(predictions: &[Prediction], gts: &[SceneGroundTruth]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for gt in gts {
        let items: Vec<PredictedMask> = predictions_for(predictions, gt.id).into_iter().cloned().collect();
        let m = match_scene(&items, gt);
        sum += m.matches.iter().map(|m| m.map_or(0.0, |(_, v)| v)).sum::<f64>();
        n += gt.instances.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of GT instances recovered by a one-to-one matching of same-category
/// predictions with IoU at least `iou_thresh`; the matching has maximum cardinality.
pub fn grounding_mask_recall(predictions: &[Prediction], gts: &[SceneGroundTruth], iou_thresh: f64) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for gt in gts {
        let items = predictions_for(predictions, gt.id);
        let adj: Vec<Vec<usize>> = gt
            .instances
            .iter()
            .map(|g| {
                (0..items.len())
                    .filter(|&j| items[j].category == Some(g.category) && iou_or_zero(&g.mask, items[j].mask()) >= iou_thresh)
                    .collect()
            })
            .collect();
        hit += max_cardinality_matching(&adj, items.len()).iter().flatten().count();
        n += gt.instances.len();
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Unigram F1 between two word sequences (multiset overlap).
pub fn caption_f1(generated: &[&str], reference: &[&str]) -> f64 {
    if generated.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for w in reference {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in generated {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / generated.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pacc: Option<f64>,
    pub miou: f64,
    pub recall: f64,
    pub ap: f64,
    pub ar: f64,
    pub per_bucket: BucketValues,
    pub n_scenes: usize,
}

/// Every metric over one prediction set.
pub fn evaluate(predictions: &[Prediction], gts: &[SceneGroundTruth], iou_thresh: f64, buckets: &AreaBuckets) -> MetricReport {
    let apar = mask_ap_ar(predictions, gts, &DEFAULT_IOU_THRESHOLDS, Some(buckets));
    MetricReport {
        pacc: point_accuracy(predictions, gts),
        miou: mean_iou(predictions, gts),
        recall: grounding_mask_recall(predictions, gts, iou_thresh),
        ap: apar.ap,
        ar: apar.ar,
        per_bucket: apar.buckets.unwrap_or_default(),
        n_scenes: gts.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig, Vocabulary};

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
        m
    }

    fn perfect(gt: &SceneGroundTruth) -> Prediction {
        Prediction {
            scene_id: gt.id,
            items: gt
                .instances
                .iter()
                .map(|i| PredictedMask {
                    phrase: format!("a {}", i.category.noun()),
                    category: Some(i.category),
                    mask: Some(i.mask.clone()),
                    point: i.mask.pixels().next().unwrap(),
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn iou_examples() {
        let a = rect(4, 1, 0, 2, 0, 1);
        let b = Mask::full(4, 1);
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
        assert_eq!(iou(&rect(4, 1, 0, 2, 0, 1), &rect(4, 1, 2, 4, 0, 1)).unwrap(), 0.0);
        assert_eq!(iou(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 1.0);
        assert!(iou(&Mask::empty(2, 2), &Mask::empty(3, 2)).is_err());
    }

    #[test]
    fn phrase_matching_and_filter() {
        let t = SynonymTable::default();
        assert_eq!(match_phrase_to_category("a red circle", &[Category::Circle], &t), Some(Category::Circle));
        assert_eq!(match_phrase_to_category("the blue square", &[Category::Circle], &t), None);
        assert_eq!(match_phrase_to_category("a disk", &[Category::Circle], &t), Some(Category::Circle));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let vocab = Vocabulary::standard();
        let gts: Vec<_> = (0..10).map(|s| generate_scene(s, &SceneConfig::default(), &vocab).unwrap()).collect();
        let preds: Vec<_> = gts.iter().map(perfect).collect();
        let r = evaluate(&preds, &gts, 0.5, &AreaBuckets::default());
        assert_eq!((r.pacc, r.miou, r.recall, r.ap, r.ar), (Some(1.0), 1.0, 1.0, 1.0, 1.0));
        let r = evaluate(&[], &gts, 0.5, &AreaBuckets::default());
        assert_eq!((r.pacc, r.miou, r.recall, r.ap, r.ar), (None, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn recall_counts_threshold_and_category() {
        let vocab = Vocabulary::standard();
        let mut gt = generate_scene(0, &SceneConfig::default(), &vocab).unwrap();
        gt.instances.truncate(1);
        let target = gt.instances[0].mask.clone();
        let other = Mask::empty(64, 64);
        gt.instances.push(crate::scene::Instance {
            category: gt.instances[0].category,
            color: gt.instances[0].color,
            mask: other.clone(),
            area: 0,
        });
        // grow the prediction so IoU with the first instance lands near 0.7 or 0.4
        let make = |extra: usize| {
            let mut m = target.clone();
            let mut added = 0;
            for y in 0..64 {
                for x in 0..64 {
                    if added < extra && !m.get(y, x) {
                        m.set(y, x, true);
                        added += 1;
                    }
                }
            }
            m
        };
        let a = target.area();
        let m07 = make((a as f64 / 0.7 - a as f64).ceil() as usize);
        let m04 = make((a as f64 / 0.4 - a as f64).ceil() as usize);
        let pred = |m: Mask| Prediction {
            scene_id: gt.id,
            items: vec![PredictedMask {
                phrase: String::new(),
                category: Some(gt.instances[0].category),
                mask: Some(m),
                point: (0, 0),
                score: 1.0,
            }],
        };
        let gts = vec![gt.clone()];
        assert_eq!(grounding_mask_recall(&[pred(m07)], &gts, 0.5), 0.5);
        assert_eq!(grounding_mask_recall(&[pred(m04.clone())], &gts, 0.5), 0.0);
        assert_eq!(grounding_mask_recall(&[pred(m04)], &gts, 0.25), 0.5);
    }

    #[test]
    fn duplicates_never_raise_recall() {
        let vocab = Vocabulary::standard();
        let gts: Vec<_> = (0..10).map(|s| generate_scene(s, &SceneConfig::default(), &vocab).unwrap()).collect();
        let single: Vec<_> = gts
            .iter()
            .map(|g| {
                let mut p = perfect(g);
                p.items.truncate(1);
                p
            })
            .collect();
        let dup: Vec<_> = single
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.items.push(p.items[0].clone());
                q
            })
            .collect();
        assert_eq!(grounding_mask_recall(&single, &gts, 0.5), grounding_mask_recall(&dup, &gts, 0.5));
        let r1 = mask_ap_ar(&single, &gts, &DEFAULT_IOU_THRESHOLDS, None);
        let r2 = mask_ap_ar(&dup, &gts, &DEFAULT_IOU_THRESHOLDS, None);
        assert_eq!(r1.ar, r2.ar);
        assert!(r2.ap <= r1.ap);
    }

    #[test]
    fn point_accuracy_two_of_three() {
        let vocab = Vocabulary::standard();
        let gt = generate_scene(4, &SceneConfig::default(), &vocab).unwrap();
        let inst = &gt.instances[0];
        let inside = inst.mask.pixels().next().unwrap();
        let outside = (0..64 * 64)
            .map(|i| (i / 64, i % 64))
            .find(|&(y, x)| gt.instances.iter().all(|i| !i.mask.get(y, x)))
            .unwrap();
        let item = |p| PredictedMask {
            phrase: String::new(),
            category: Some(inst.category),
            mask: None,
            point: p,
            score: 1.0,
        };
        let mut filtered = item(outside);
        filtered.category = None;
        let preds = vec![Prediction {
            scene_id: gt.id,
            items: vec![item(inside), item(inside), item(outside), filtered],
        }];
        assert!((point_accuracy(&preds, &[gt]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fully_covered_scene_gives_unit_baseline() {
        let vocab = Vocabulary::standard();
        let mut gt = generate_scene(0, &SceneConfig::default(), &vocab).unwrap();
        gt.instances.truncate(1);
        gt.instances[0].mask = Mask::full(64, 64);
        gt.instances[0].area = 64 * 64;
        gt.image = crate::imaging::Image::filled(64, 64, gt.instances[0].color.rgb());
        let preds = random_point_baseline(std::slice::from_ref(&gt), 1, 0.05).unwrap();
        assert_eq!(point_accuracy(&preds, &[gt]), Some(1.0));
    }

    #[test]
    fn caption_f1_examples() {
        assert_eq!(caption_f1(&["a", "red", "circle"], &["a", "red", "circle"]), 1.0);
        assert_eq!(caption_f1(&["a"], &["b"]), 0.0);
        assert!((caption_f1(&["a", "red"], &["a", "red", "circle", "."]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
