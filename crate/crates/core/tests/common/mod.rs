#![allow(dead_code)]

use egl_core::encoders::{EncoderConfig, NoiseSchedule, Variant, VisualInput, VisualStack};
use egl_core::lmm::{LmConfig, Lmm, PromptLayout};
use egl_core::numerics::{ParamStore, Sampler};
use egl_core::scene::{generate_scene, SceneConfig, SceneGroundTruth, Vocabulary};

pub mod metric_cases;
pub mod oracles;

pub fn scenes(n: usize, base: u64) -> Vec<SceneGroundTruth> {
    let vocab = Vocabulary::standard();
    (0..n as u64)
        .map(|i| generate_scene(base + i, &SceneConfig::default(), &vocab).unwrap())
        .collect()
}

pub fn tiny_lm() -> LmConfig {
    LmConfig {
        d_model: 32,
        n_layer: 2,
        n_head: 2,
        d_mlp: 64,
        ..LmConfig::default()
    }
}

/// Randomly initialized model; encoders are left untrained.
pub fn tiny_lmm(variant: Variant, seed: u64) -> (ParamStore, Lmm) {
    let vocab = Vocabulary::standard();
    let mut store = ParamStore::new();
    let mut rng = Sampler::new(seed);
    let cfg = EncoderConfig {
        variant,
        ..EncoderConfig::default()
    };
    let visual = VisualStack::new(&mut store, cfg, NoiseSchedule::default(), &mut rng).unwrap();
    let lmm = Lmm::new(&mut store, visual, tiny_lm(), PromptLayout::standard(&vocab), &mut rng).unwrap();
    (store, lmm)
}

pub fn prepare(store: &ParamStore, lmm: &Lmm, scenes: &[SceneGroundTruth]) -> Vec<VisualInput> {
    scenes.iter().map(|s| lmm.visual.prepare(store, &s.image).unwrap()).collect()
}

/// Random softmax-row trace: `steps` entries over a prompt of `pre + h*w + post` positions.
pub fn random_trace(seed: u64, layers: usize, heads: usize, h: usize, w: usize, steps: usize) -> egl_core::lmm::AttentionTrace {
    use egl_core::lmm::{AttentionTrace, TraceEntry};
    let mut rng = Sampler::new(seed);
    let (pre, post) = (1, 2);
    let prompt = pre + h * w + post;
    let entries = (0..steps)
        .map(|k| TraceEntry {
            token_index: k,
            layers: (0..layers)
                .map(|_| {
                    (0..heads)
                        .map(|_| {
                            let raw: Vec<f64> = (0..prompt + k).map(|_| (2.0 * rng.gaussian()).exp()).collect();
                            let z: f64 = raw.iter().sum();
                            raw.into_iter().map(|v| v / z).collect()
                        })
                        .collect()
                })
                .collect(),
        })
        .collect();
    AttentionTrace {
        visual: pre..pre + h * w,
        entries,
    }
}
