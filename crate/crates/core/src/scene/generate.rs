use serde::{Deserialize, Serialize};

use super::raster::{extent, rasterize_mask, Position};
use super::vocab::{Category, Color, Vocabulary};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::numerics::Sampler;

/// Constraints the scene sampler must satisfy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub background: [f64; 3],
    /// Minimum Chebyshev gap, in pixels, between any two instances.
    pub gap: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_instances: 1,
            max_instances: 4,
            background: [0.0, 0.0, 0.0],
            gap: 2,
            max_attempts: 1000,
        }
    }
}

/// One instance to draw: shape, fill, bounding-box corner, and scale.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub category: Category,
    pub color: Color,
    pub position: Position,
    pub scale: f64,
}

/// Fully explicit scene description.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub image_size: usize,
    pub instances: Vec<InstanceSpec>,
    pub background: [f64; 3],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub category: Category,
    pub color: Color,
    pub mask: Mask,
    pub area: usize,
}

/// A rendered scene together with its instance annotations and reference caption.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGroundTruth {
    pub id: u64,
    pub image: Image,
    pub instances: Vec<Instance>,
    pub caption: Vec<usize>,
}

impl SceneGroundTruth {
    pub fn categories(&self) -> Vec<Category> {
        let mut c: Vec<Category> = self.instances.iter().map(|i| i.category).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn image_size(&self) -> usize {
        self.image.height()
    }
}

fn scale_choices(category: Category) -> (f64, f64, f64) {
    // (min, max, step)
    match category {
        Category::Circle => (4.5, 9.0, 0.5),
        Category::Square => (8.0, 16.0, 1.0),
        Category::Triangle => (10.0, 20.0, 1.0),
    }
}

fn sample_scale(category: Category, rng: &mut Sampler) -> f64 {
    let (lo, hi, step) = scale_choices(category);
    let n = ((hi - lo) / step).round() as usize + 1;
    lo + step * rng.below(n) as f64
}

/// Tokens of the reference caption: instances left to right by centroid,
/// each as "a <color> <shape>", joined by commas and a final "and".
pub fn caption_words(instances: &[Instance]) -> Vec<&'static str> {
    let mut order: Vec<(f64, f64, usize)> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let (cy, cx) = inst.mask.centroid().unwrap_or((0.0, 0.0));
            (cx, cy, i)
        })
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut words = Vec::new();
    for (k, &(_, _, i)) in order.iter().enumerate() {
        if k > 0 {
            words.push(if k + 1 == order.len() { "and" } else { "," });
        }
        words.push("a");
        words.push(instances[i].color.word());
        words.push(instances[i].category.noun());
    }
    words.push(".");
    words
}

/// Instances sorted into caption order.
pub fn caption_order(instances: &[Instance]) -> Vec<usize> {
    let mut order: Vec<(f64, f64, usize)> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let (cy, cx) = inst.mask.centroid().unwrap_or((0.0, 0.0));
            (cx, cy, i)
        })
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    order.into_iter().map(|(_, _, i)| i).collect()
}

/// Draws an explicit scene; fails if instances overlap, touch within the gap, or fall outside.
pub fn render_scene(spec: &SceneSpec, gap: usize, vocab: &Vocabulary) -> Result<SceneGroundTruth> {
    let mut image = Image::filled(spec.image_size, spec.image_size, spec.background);
    let mut blocked = Mask::empty(spec.image_size, spec.image_size);
    let mut instances = Vec::with_capacity(spec.instances.len());
    for inst in &spec.instances {
        let mask = rasterize_mask(inst.category, inst.position, inst.scale, spec.image_size)?;
        if mask.intersection_area(&blocked) > 0 {
            return Err(Error::Placement("instances overlap or violate the gap".into()));
        }
        blocked = union(&blocked, &mask.dilate(gap));
        image.paint(&mask, inst.color.rgb());
        instances.push(Instance {
            category: inst.category,
            color: inst.color,
            area: mask.area(),
            mask,
        });
    }
    let caption = vocab.tokenize(&caption_words(&instances).join(" "))?;
    Ok(SceneGroundTruth {
        id: spec.seed,
        image,
        instances,
        caption,
    })
}

fn union(a: &Mask, b: &Mask) -> Mask {
    let bits = a.bits().iter().zip(b.bits()).map(|(x, y)| *x || *y).collect();
    Mask::from_bits(a.height(), a.width(), bits).expect("same shape")
}

/// Samples a scene spec for `seed` by rejection, bounded by `config.max_attempts`.
pub fn sample_spec(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    if config.min_instances == 0 || config.min_instances > config.max_instances {
        return Err(Error::Placement("instance count bounds are empty".into()));
    }
    let mut rng = Sampler::new(seed);
    let n = config.min_instances + rng.below(config.max_instances - config.min_instances + 1);
    let size = config.image_size;
    let mut blocked = Mask::empty(size, size);
    let mut instances = Vec::with_capacity(n);
    let mut attempts = 0;
    while instances.len() < n {
        if attempts >= config.max_attempts {
            return Err(Error::Placement(format!(
                "could not place {n} instances in {} attempts",
                config.max_attempts
            )));
        }
        attempts += 1;
        let category = Category::ALL[rng.below(3)];
        let color = Color::ALL[rng.below(4)];
        let scale = sample_scale(category, &mut rng);
        let ext = extent(category, scale);
        let span = size as f64 - ext;
        if span < 0.0 {
            continue;
        }
        let position = Position {
            y: rng.below(span.floor() as usize + 1) as f64,
            x: rng.below(span.floor() as usize + 1) as f64,
        };
        let Ok(mask) = rasterize_mask(category, position, scale, size) else {
            continue;
        };
        if mask.intersection_area(&blocked) > 0 {
            continue;
        }
        blocked = union(&blocked, &mask.dilate(config.gap));
        instances.push(InstanceSpec {
            category,
            color,
            position,
            scale,
        });
    }
    Ok(SceneSpec {
        image_size: size,
        instances,
        background: config.background,
        seed,
    })
}

/// Deterministic scene for a seed.
pub fn generate_scene(seed: u64, config: &SceneConfig, vocab: &Vocabulary) -> Result<SceneGroundTruth> {
    let spec = sample_spec(seed, config)?;
    render_scene(&spec, config.gap, vocab)
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SceneGroundTruth>,
    pub val: Vec<SceneGroundTruth>,
    pub test: Vec<SceneGroundTruth>,
}

/// Seed ranges for the three splits: consecutive blocks starting at `base_seed`.
pub fn split_seeds(n_train: usize, n_val: usize, n_test: usize, base_seed: u64) -> [std::ops::Range<u64>; 3] {
    let a = base_seed;
    let b = a + n_train as u64;
    let c = b + n_val as u64;
    let d = c + n_test as u64;
    [a..b, b..c, c..d]
}

pub fn make_splits(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base_seed: u64,
    config: &SceneConfig,
    vocab: &Vocabulary,
) -> Result<Splits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Argument("split sizes must be positive".into()));
    }
    let [tr, va, te] = split_seeds(n_train, n_val, n_test, base_seed);
    let gen = |r: std::ops::Range<u64>| -> Result<Vec<SceneGroundTruth>> {
        let seeds: Vec<u64> = r.collect();
        crate::parallel::map(&seeds, |&s| generate_scene(s, config, vocab))
            .into_iter()
            .collect()
    };
    Ok(Splits {
        train: gen(tr)?,
        val: gen(va)?,
        test: gen(te)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_pixel_count(cy: f64, cx: f64, r: f64, size: usize) -> usize {
        // row-wise chord lengths: pixel centres x + 0.5 with |x + 0.5 - cx| <= half
        let mut n = 0usize;
        for y in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let h2 = r * r - dy * dy;
            if h2 < 0.0 {
                continue;
            }
            let half = h2.sqrt();
            let lo = (cx - half - 0.5).ceil().max(0.0) as i64;
            let hi = (cx + half - 0.5).floor().min(size as f64 - 1.0) as i64;
            if hi >= lo {
                n += (hi - lo + 1) as usize;
            }
        }
        n
    }

    #[test]
    fn forced_single_red_circle() {
        let vocab = Vocabulary::standard();
        let spec = SceneSpec {
            image_size: 64,
            instances: vec![InstanceSpec {
                category: Category::Circle,
                color: Color::Red,
                position: Position { y: 22.0, x: 22.0 },
                scale: 10.0,
            }],
            background: [0.0; 3],
            seed: 0,
        };
        let scene = render_scene(&spec, 2, &vocab).unwrap();
        assert_eq!(vocab.detokenize(&scene.caption), "a red circle .");
        assert_eq!(scene.instances[0].area, disk_pixel_count(32.0, 32.0, 10.0, 64));
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        let vocab = Vocabulary::standard();
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg, &vocab).unwrap();
            assert!((1..=4).contains(&s.instances.len()));
            let mut union_area = 0;
            for (i, a) in s.instances.iter().enumerate() {
                assert!(a.area >= 16);
                assert_eq!(a.area, a.mask.area());
                union_area += a.area;
                for b in &s.instances[i + 1..] {
                    assert_eq!(a.mask.intersection_area(&b.mask), 0);
                }
            }
            let covered = (0..64 * 64)
                .filter(|&p| s.instances.iter().any(|i| i.mask.bits()[p]))
                .count();
            assert_eq!(covered, union_area);
            let text = vocab.detokenize(&s.caption);
            assert_eq!(vocab.tokenize(&text).unwrap(), s.caption);
            let nouns = s.caption.iter().filter(|&&t| Category::from_noun(vocab.word(t)).is_some()).count();
            assert_eq!(nouns, s.instances.len());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let vocab = Vocabulary::standard();
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(17, &cfg, &vocab).unwrap(), generate_scene(17, &cfg, &vocab).unwrap());
        assert_ne!(generate_scene(17, &cfg, &vocab).unwrap(), generate_scene(18, &cfg, &vocab).unwrap());
    }

    #[test]
    fn split_seed_offsets() {
        let [a, b, c] = split_seeds(100, 20, 20, 0);
        assert_eq!((a.start, a.end, b.start, b.end, c.start, c.end), (0, 100, 100, 120, 120, 140));
        let vocab = Vocabulary::standard();
        let s = make_splits(3, 2, 2, 0, &SceneConfig::default(), &vocab).unwrap();
        assert_ne!(s.train[0], s.val[0]);
        assert_eq!(s.val[0].id, 3);
        let again = make_splits(3, 2, 2, 0, &SceneConfig::default(), &vocab).unwrap();
        assert_eq!(again.test, s.test);
    }

    #[test]
    fn unsatisfiable_config_reports_placement_error() {
        let vocab = Vocabulary::standard();
        let cfg = SceneConfig {
            image_size: 16,
            min_instances: 4,
            max_instances: 4,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(0, &cfg, &vocab), Err(Error::Placement(_))));
    }

    #[test]
    fn category_and_color_marginals_are_uniform() {
        let vocab = Vocabulary::standard();
        let cfg = SceneConfig::default();
        let mut cat = [0usize; 3];
        let mut col = [0usize; 4];
        let mut n = 0;
        for seed in 0..1000 {
            for i in generate_scene(seed, &cfg, &vocab).unwrap().instances {
                cat[i.category.id()] += 1;
                col[i.color.id()] += 1;
                n += 1;
            }
        }
        for c in cat {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.05, "{cat:?}");
        }
        for c in col {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.05, "{col:?}");
        }
        // chi-square against uniform, 3 dof for colors: 99.9% critical value 16.27
        let e = n as f64 / 4.0;
        let chi2: f64 = col.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 16.27, "chi2 {chi2}");
    }
}
