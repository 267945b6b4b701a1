//! Per-scene generation and grounding, and its conversion into scored predictions.

use crate::error::Result;
use crate::grounding::{ground_response, GroundedPhrase, GroundingOptions};
use crate::lmm::{Generation, Lmm};
use crate::metrics::{match_phrase_to_category, PredictedMask, Prediction, SynonymTable};
use crate::numerics::ParamStore;
use crate::parallel;
use crate::scene::{SceneGroundTruth, Vocabulary};

pub const DEFAULT_MAX_TOKENS: usize = 24;

#[derive(Clone, Debug)]
pub struct SceneResult {
    pub scene_id: u64,
    pub generation: Generation,
    pub phrases: Vec<GroundedPhrase>,
}

impl SceneResult {
    /// Phrases as predictions with unit scores (emission order ranks them);
    /// categories pass the in-image filter of `scene`.
    pub fn prediction(&self, scene: &SceneGroundTruth, table: &SynonymTable) -> Prediction {
        let cats = scene.categories();
        Prediction {
            scene_id: self.scene_id,
            items: self
                .phrases
                .iter()
                .map(|p| PredictedMask {
                    phrase: p.phrase.text.clone(),
                    category: match_phrase_to_category(&p.phrase.text, &cats, table),
                    mask: p.mask.clone(),
                    point: p.point,
                    score: 1.0,
                })
                .collect(),
        }
    }
}

/// Generates a response for `scene` and grounds its noun phrases.
pub fn ground_scene(
    store: &ParamStore,
    lmm: &Lmm,
    scene: &SceneGroundTruth,
    vocab: &Vocabulary,
    options: &GroundingOptions,
    table: &SynonymTable,
    max_tokens: usize,
) -> Result<SceneResult> {
    let input = lmm.visual.prepare(store, &scene.image)?;
    let seq = lmm.input_sequence(store, &input)?;
    let generation = lmm.lm.generate(store, &seq, vocab.eos(), max_tokens)?;
    let phrases = regrounded(scene, &generation, lmm, vocab, options, table)?;
    Ok(SceneResult {
        scene_id: scene.id,
        generation,
        phrases,
    })
}

/// Grounds an existing generation under different options.
pub fn regrounded(
    scene: &SceneGroundTruth,
    generation: &Generation,
    lmm: &Lmm,
    vocab: &Vocabulary,
    options: &GroundingOptions,
    table: &SynonymTable,
) -> Result<Vec<GroundedPhrase>> {
    let g = lmm.visual.config.grid();
    ground_response(&scene.image, &generation.tokens, &generation.trace, vocab, (g, g), options, table)
}

/// [`ground_scene`] over many scenes, fanned out with the crate's parallel map.
pub fn ground_scenes(
    store: &ParamStore,
    lmm: &Lmm,
    scenes: &[SceneGroundTruth],
    vocab: &Vocabulary,
    options: &GroundingOptions,
    table: &SynonymTable,
    max_tokens: usize,
) -> Result<Vec<SceneResult>> {
    parallel::map(scenes, |s| ground_scene(store, lmm, s, vocab, options, table, max_tokens))
        .into_iter()
        .collect()
}
