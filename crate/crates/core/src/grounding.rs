//! From attention traces to grounded noun phrases.
//!
//! Each generated token's attention onto the visual block is averaged over all
//! layers and heads, optionally centered by the mean map of the response, and
//! the maps of a phrase's head noun are averaged. The argmax of the bilinearly
//! upsampled phrase map prompts the segmenter.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::lmm::AttentionTrace;
use crate::metrics::SynonymTable;
use crate::scene::{Category, PosTag, Vocabulary};
use crate::segmenter::{segment_point, segment_region};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    pub source_tokens: Vec<usize>,
}

impl AttentionMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
            source_tokens: Vec::new(),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

fn entry_rows(trace: &AttentionTrace, k: usize) -> Result<&[Vec<Vec<f64>>]> {
    trace
        .entries
        .get(k)
        .map(|e| e.layers.as_slice())
        .ok_or_else(|| Error::Argument(format!("token {k} outside a trace of {}", trace.entries.len())))
}

fn check_grid(trace: &AttentionTrace, grid: (usize, usize)) -> Result<()> {
    if grid.0 * grid.1 != trace.visual.len() {
        return Err(Error::Argument(format!(
            "grid {}x{} does not cover {} visual tokens",
            grid.0,
            grid.1,
            trace.visual.len()
        )));
    }
    Ok(())
}

fn visual_slice<'a>(row: &'a [f64], visual: &Range<usize>) -> Result<&'a [f64]> {
    row.get(visual.clone())
        .ok_or_else(|| Error::Argument("attention row shorter than the visual block".into()))
}

/// Mean over layers and heads of token `k`'s attention onto the visual tokens.
pub fn reduce_attention(trace: &AttentionTrace, k: usize, grid: (usize, usize)) -> Result<AttentionMap> {
    check_grid(trace, grid)?;
    let layers = entry_rows(trace, k)?;
    let mut map = AttentionMap::zeros(grid.0, grid.1);
    let mut n = 0usize;
    for heads in layers {
        for row in heads {
            for (m, a) in map.data.iter_mut().zip(visual_slice(row, &trace.visual)?) {
                *m += a;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("trace entry without heads".into()));
    }
    map.data.iter_mut().for_each(|m| *m /= n as f64);
    map.source_tokens = vec![k];
    Ok(map)
}

/// Visual-block attention of a single layer and head.
pub fn per_head_map(trace: &AttentionTrace, k: usize, layer: usize, head: usize, grid: (usize, usize)) -> Result<AttentionMap> {
    check_grid(trace, grid)?;
    let row = entry_rows(trace, k)?
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or_else(|| Error::Argument(format!("layer {layer} head {head} out of range")))?;
    Ok(AttentionMap {
        h: grid.0,
        w: grid.1,
        data: visual_slice(row, &trace.visual)?.to_vec(),
        source_tokens: vec![k],
    })
}

/// Subtracts the elementwise mean map of the sequence from every map.
pub fn normalize_sequence(maps: &[AttentionMap]) -> Result<Vec<AttentionMap>> {
    let first = maps.first().ok_or_else(|| Error::Argument("no maps to normalize".into()))?;
    if maps.iter().any(|m| m.h != first.h || m.w != first.w) {
        return Err(Error::Argument("maps differ in grid size".into()));
    }
    let r = maps.len() as f64;
    let mut mean = vec![0.0; first.data.len()];
    for m in maps {
        mean.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= r);
    Ok(maps
        .iter()
        .map(|m| AttentionMap {
            data: m.data.iter().zip(&mean).map(|(a, b)| a - b).collect(),
            ..m.clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPhrase {
    pub text: String,
    pub span: Range<usize>,
    /// Indices of the final noun run.
    pub central: Vec<usize>,
}

/// Maximal `DET? ADJ* NOUN+` spans, scanned left to right.
pub fn chunk_noun_phrases(tokens: &[usize], vocab: &Vocabulary) -> Vec<NounPhrase> {
    let tag = |i: usize| vocab.tag(tokens[i]);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut j = i;
        if tag(j) == PosTag::Det {
            j += 1;
        }
        while j < tokens.len() && tag(j) == PosTag::Adj {
            j += 1;
        }
        let noun_start = j;
        while j < tokens.len() && tag(j) == PosTag::Noun {
            j += 1;
        }
        if j > noun_start {
            out.push(NounPhrase {
                text: vocab.detokenize(&tokens[i..j]),
                span: i..j,
                central: (noun_start..j).collect(),
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Mean of the maps of the phrase's central noun tokens; `maps[k]` belongs to token `k`.
pub fn phrase_map(phrase: &NounPhrase, maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = phrase
        .central
        .first()
        .and_then(|&k| maps.get(k))
        .ok_or_else(|| Error::Argument("phrase has no mapped central noun".into()))?;
    let mut out = AttentionMap::zeros(first.h, first.w);
    for &k in &phrase.central {
        let m = maps.get(k).ok_or_else(|| Error::Argument(format!("no map for token {k}")))?;
        out.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
    }
    let n = phrase.central.len() as f64;
    out.data.iter_mut().for_each(|a| *a /= n);
    out.source_tokens = phrase.central.clone();
    Ok(out)
}

/// Bilinear resampling with pixel centers aligned and edges clamped; row-major `[height * width]`.
pub fn upsample_bilinear(map: &AttentionMap, height: usize, width: usize) -> Vec<f64> {
    let axis = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, height, map.h);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, width, map.w);
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn argmax_row_major(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax pixel `(y, x)` of the upsampled map; the first maximum in row-major order wins.
pub fn select_prompt_point(map: &AttentionMap, height: usize, width: usize) -> (usize, usize) {
    let up = upsample_bilinear(map, height, width);
    let i = argmax_row_major(&up);
    (i / width, i % width)
}

/// Largest 4-connected component of the upsampled map at or above its `quantile`.
pub fn mask_prompt(map: &AttentionMap, height: usize, width: usize, quantile: f64) -> Mask {
    let up = upsample_bilinear(map, height, width);
    let mut sorted = up.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let thr = sorted[rank];
    let above: Vec<bool> = up.iter().map(|&v| v >= thr).collect();
    let mut label = vec![usize::MAX; up.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..up.len() {
        if !above[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = vec![start];
        label[start] = start;
        let mut head = 0;
        while head < comp.len() {
            let p = comp[head];
            head += 1;
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if above[q] && label[q] == usize::MAX {
                    label[q] = start;
                    comp.push(q);
                }
            };
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut mask = Mask::empty(height, width);
    for p in best {
        mask.set(p / width, p % width, true);
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Point,
    Mask,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Self::Point),
            "mask" => Ok(Self::Mask),
            _ => Err(Error::Config(format!("unknown prompt mode {s:?}"))),
        }
    }
}

/// Which maps feed the phrase stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSelection {
    Mean,
    Single { layer: usize, head: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingOptions {
    pub prompt_mode: PromptMode,
    pub normalize: bool,
    pub color_tol: f64,
    pub mask_quantile: f64,
    pub heads: HeadSelection,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            prompt_mode: PromptMode::Point,
            normalize: true,
            color_tol: crate::segmenter::DEFAULT_COLOR_TOL,
            mask_quantile: 0.9,
            heads: HeadSelection::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedPhrase {
    pub phrase: NounPhrase,
    pub map: AttentionMap,
    pub point: (usize, usize),
    /// Upsampled phrase-map value at `point`.
    pub score: f64,
    #[serde(skip)]
    pub mask: Option<Mask>,
    pub failed: bool,
    pub matched_category: Option<Category>,
}

/// Runs the full pipeline over one response. `<eos>` neither forms phrases nor enters the mean map.
pub fn ground_response(
    image: &Image,
    tokens: &[usize],
    trace: &AttentionTrace,
    vocab: &Vocabulary,
    grid: (usize, usize),
    options: &GroundingOptions,
    synonyms: &SynonymTable,
) -> Result<Vec<GroundedPhrase>> {
    if trace.entries.len() != tokens.len() {
        return Err(Error::Argument("trace and tokens differ in length".into()));
    }
    let r = if tokens.last() == Some(&vocab.eos()) {
        tokens.len() - 1
    } else {
        tokens.len()
    };
    let text = &tokens[..r];
    let phrases = chunk_noun_phrases(text, vocab);
    if phrases.is_empty() {
        return Ok(Vec::new());
    }
    let raw = (0..r)
        .map(|k| match options.heads {
            HeadSelection::Mean => reduce_attention(trace, k, grid),
            HeadSelection::Single { layer, head } => per_head_map(trace, k, layer, head, grid),
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = if options.normalize { normalize_sequence(&raw)? } else { raw };
    let (height, width) = (image.height(), image.width());
    phrases
        .into_iter()
        .map(|phrase| {
            let map = phrase_map(&phrase, &maps)?;
            let up = upsample_bilinear(&map, height, width);
            let i = argmax_row_major(&up);
            let point = (i / width, i % width);
            let mask = match options.prompt_mode {
                PromptMode::Point => segment_point(image, point, options.color_tol),
                PromptMode::Mask => segment_region(image, &mask_prompt(&map, height, width, options.mask_quantile), options.color_tol),
            };
            let matched_category = phrase.central.last().and_then(|&k| synonyms.resolve(vocab.word(text[k])));
            let (mask, failed) = match mask {
                Ok(m) => (Some(m), false),
                Err(e) => {
                    log::warn!("segmentation failed for {:?}: {e}", phrase.text);
                    (None, true)
                }
            };
            Ok(GroundedPhrase {
                phrase,
                map,
                point,
                score: up[i],
                mask,
                failed,
                matched_category,
            })
        })
        .collect()
}
