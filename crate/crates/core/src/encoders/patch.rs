//! Patch-token image encoder, trained either contrastively against captions or
//! by augmentation invariance alone.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::nn::{LayerNorm, Linear, Mlp};
use crate::numerics::{Adam, Graph, ParamId, ParamStore, Sampler, Tensor, Var};
use crate::scene::{PosTag, SceneGroundTruth, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainMode {
    Contrastive,
    VisionOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    pub patch: usize,
    pub image_size: usize,
    pub dim: usize,
    pub proj_dim: usize,
    pub vocab: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            image_size: 64,
            dim: 32,
            proj_dim: 32,
            vocab: 36,
        }
    }
}

impl PatchConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub config: PatchConfig,
    pub prefix: String,
    embed: Linear,
    pos: ParamId,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    ln_out: LayerNorm,
    head: Linear,
    text: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct PretrainBudget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for PretrainBudget {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 2e-3,
            temperature: 0.1,
        }
    }
}

/// Row-major 8x8x3 patches flattened to `[tokens, patch_len]`, values in `[-1, 1]`.
pub fn image_patches(image: &Image, patch: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(h * w * 3);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    let p = image.pixel(py * patch + y, px * patch + x);
                    out.extend(p.iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
    }
    out
}

impl PatchEncoder {
    /// Registers parameters under `prefix` (for example `"clip."`). The caption
    /// table exists only for the contrastive mode.
    pub fn new(store: &mut ParamStore, prefix: &str, config: PatchConfig, with_text: bool, rng: &mut Sampler) -> Self {
        let p = |s: &str| format!("{prefix}{s}");
        let d = config.dim;
        Self {
            embed: Linear::new(store, &p("embed"), config.patch_len(), d, true, rng),
            pos: store.add(p("pos"), rng.gaussian_tensor(&[config.tokens(), d], 0.5)),
            ln1: LayerNorm::new(store, &p("ln1"), d),
            q: Linear::new(store, &p("q"), d, d, false, rng),
            k: Linear::new(store, &p("k"), d, d, false, rng),
            v: Linear::new(store, &p("v"), d, d, false, rng),
            o: Linear::new(store, &p("o"), d, d, true, rng),
            ln2: LayerNorm::new(store, &p("ln2"), d),
            mlp: Mlp::new(store, &p("mlp"), d, 2 * d, d, rng),
            ln_out: LayerNorm::new(store, &p("ln_out"), d),
            head: Linear::new(store, &p("head"), d, config.proj_dim, false, rng),
            text: with_text.then(|| store.add(p("text"), rng.gaussian_tensor(&[config.vocab, config.proj_dim], 1.0))),
            prefix: prefix.to_string(),
            config,
        }
    }

    /// Per-patch features `[batch * tokens, dim]` from patches `[batch * tokens, patch_len]`.
    pub fn forward(&self, g: &mut Graph<'_>, patches: Var, batch: usize) -> Result<Var> {
        let n = self.config.tokens();
        let x = self.embed.forward(g, patches)?;
        let pos = g.param(self.pos);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.gather_rows(pos, &idx)?;
        let x = g.add(x, pos)?;
        let h = self.ln1.forward(g, x)?;
        let (q, k, v) = (self.q.forward(g, h)?, self.k.forward(g, h)?, self.v.forward(g, h)?);
        let a = g.attention(q, k, v, 1, batch, false)?;
        let a = self.o.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let x = g.add(x, m)?;
        self.ln_out.forward(g, x)
    }

    /// Unit-norm pooled embedding `[batch, proj_dim]`.
    pub fn pooled(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let pooled = g.mean_groups(features, self.config.tokens())?;
        let z = self.head.forward(g, pooled)?;
        g.l2_normalize_rows(z)
    }

    /// Unit-norm caption embedding: mean of the adjective and noun token vectors.
    pub fn caption_embedding(&self, g: &mut Graph<'_>, captions: &[&[usize]], vocab: &Vocabulary) -> Result<Var> {
        let table = self
            .text
            .ok_or_else(|| Error::State(format!("{}: encoder has no caption table", self.prefix)))?;
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(captions.len());
        for c in captions {
            let start = ids.len();
            ids.extend(c.iter().copied().filter(|&t| matches!(vocab.tag(t), PosTag::Adj | PosTag::Noun)));
            if ids.len() == start {
                return Err(Error::Argument("caption carries no content words".into()));
            }
            spans.push((start, ids.len()));
        }
        let mut avg = vec![0.0; captions.len() * ids.len()];
        for (b, (s, e)) in spans.iter().enumerate() {
            for j in *s..*e {
                avg[b * ids.len() + j] = 1.0 / (e - s) as f64;
            }
        }
        let table = g.param(table);
        let emb = g.embedding(table, &ids)?;
        let a = g.constant(Tensor::new(vec![captions.len(), ids.len()], avg)?);
        let z = g.matmul(a, emb)?;
        g.l2_normalize_rows(z)
    }

    /// Per-patch features for one image as plain values `[tokens * dim]`.
    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::inference(store);
        let x = g.constant(Tensor::new(
            vec![self.config.tokens(), self.config.patch_len()],
            image_patches(image, self.config.patch),
        )?);
        let f = self.forward(&mut g, x, 1)?;
        Ok(g.value(f).data().to_vec())
    }
}

/// Symmetric InfoNCE between row-aligned unit embeddings `a` and `b` (`[batch, d]`).
pub fn info_nce(g: &mut Graph<'_>, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let batch = g.value(a).rows();
    let logits = g.matmul_ext(a, b, false, true)?;
    let logits = g.scale(logits, 1.0 / temperature)?;
    let targets: Vec<Option<usize>> = (0..batch).map(Some).collect();
    let l1 = g.cross_entropy(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let l2 = g.cross_entropy(lt, &targets)?;
    let s = g.add(l1, l2)?;
    g.scale(s, 0.5)
}

fn batch_patches(scenes: &[&SceneGroundTruth], patch: usize) -> Vec<f64> {
    scenes.iter().flat_map(|s| image_patches(&s.image, patch)).collect()
}

/// Shifted copy of an image by `(dy, dx)` with black fill, plus pixel noise.
fn augment(image: &Image, rng: &mut Sampler) -> Image {
    let (h, w) = (image.height(), image.width());
    let dy = rng.below(7) as isize - 3;
    let dx = rng.below(7) as isize - 3;
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sy, sx) = (y - dy, x - dx);
            let mut p = if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                image.pixel(sy as usize, sx as usize)
            } else {
                [0.0; 3]
            };
            for v in &mut p {
                *v = (*v + 0.05 * rng.gaussian()).clamp(0.0, 1.0);
            }
            out.set_pixel(y as usize, x as usize, p);
        }
    }
    out
}

/// Trains the encoder in place and freezes it. Returns the per-step losses.
pub fn pretrain_patch_encoder(
    store: &mut ParamStore,
    encoder: &PatchEncoder,
    scenes: &[SceneGroundTruth],
    mode: PretrainMode,
    budget: &PretrainBudget,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<f64>> {
    if scenes.len() < 2 {
        return Err(Error::Argument("patch-encoder pretraining needs at least two scenes".into()));
    }
    let batch = budget.batch.min(scenes.len());
    let mut rng = Sampler::new(seed);
    let mut adam = Adam::new(budget.lr);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(budget.steps);
    let n = encoder.config.tokens();
    let pl = encoder.config.patch_len();
    for step in 0..budget.steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let picked: Vec<&SceneGroundTruth> = order[cursor..cursor + batch].iter().map(|&i| &scenes[i]).collect();
        cursor += batch;
        let (loss_value, grads) = {
            let mut g = Graph::new(store);
            let loss = match mode {
                PretrainMode::Contrastive => {
                    let x = g.constant(Tensor::new(vec![batch * n, pl], batch_patches(&picked, encoder.config.patch))?);
                    let f = encoder.forward(&mut g, x, batch)?;
                    let zi = encoder.pooled(&mut g, f)?;
                    let caps: Vec<&[usize]> = picked.iter().map(|s| s.caption.as_slice()).collect();
                    let zt = encoder.caption_embedding(&mut g, &caps, vocab)?;
                    info_nce(&mut g, zi, zt, budget.temperature)?
                }
                PretrainMode::VisionOnly => {
                    let mut views = [Vec::new(), Vec::new()];
                    for s in &picked {
                        for v in views.iter_mut() {
                            v.extend(image_patches(&augment(&s.image, &mut rng), encoder.config.patch));
                        }
                    }
                    let [va, vb] = views;
                    let xa = g.constant(Tensor::new(vec![batch * n, pl], va)?);
                    let xb = g.constant(Tensor::new(vec![batch * n, pl], vb)?);
                    let fa = encoder.forward(&mut g, xa, batch)?;
                    let fb = encoder.forward(&mut g, xb, batch)?;
                    let za = encoder.pooled(&mut g, fa)?;
                    let zb = encoder.pooled(&mut g, fb)?;
                    info_nce(&mut g, za, zb, budget.temperature)?
                }
            };
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Training(format!("{}: non-finite loss at step {step}", encoder.prefix)));
            }
            (v, g.backward(loss)?)
        };
        adam.step(store, &grads);
        losses.push(loss_value);
    }
    store.set_frozen_prefix(&encoder.prefix, true);
    log::info!(
        "{} pretraining: loss {:.4} -> {:.4}",
        encoder.prefix,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(losses)
}

/// Fraction of images whose most similar caption in the batch is their own.
pub fn retrieval_accuracy(
    store: &ParamStore,
    encoder: &PatchEncoder,
    scenes: &[SceneGroundTruth],
    vocab: &Vocabulary,
) -> Result<f64> {
    let refs: Vec<&SceneGroundTruth> = scenes.iter().collect();
    let batch = refs.len();
    let n = encoder.config.tokens();
    let mut g = Graph::inference(store);
    let x = g.constant(Tensor::new(vec![batch * n, encoder.config.patch_len()], batch_patches(&refs, encoder.config.patch))?);
    let f = encoder.forward(&mut g, x, batch)?;
    let zi = encoder.pooled(&mut g, f)?;
    let caps: Vec<&[usize]> = refs.iter().map(|s| s.caption.as_slice()).collect();
    let zt = encoder.caption_embedding(&mut g, &caps, vocab)?;
    let sim = g.matmul_ext(zi, zt, false, true)?;
    let s = g.value(sim);
    let mut hits = 0;
    for i in 0..batch {
        let row = &s.data()[i * batch..(i + 1) * batch];
        // identical captions are interchangeable, so compare the caption text of the winner
        let best = (0..batch).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        if scenes[best].caption == scenes[i].caption {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_nce_closed_forms() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let b = 4;
        let eye: Vec<f64> = (0..b * b).map(|i| if i % (b + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let a = g.constant(Tensor::new(vec![b, b], eye.clone()).unwrap());
        let c = g.constant(Tensor::new(vec![b, b], eye).unwrap());
        let l = info_nce(&mut g, a, c, 0.01).unwrap();
        assert!(g.scalar(l) < 1e-12);
        let u = g.constant(Tensor::filled(vec![b, 3], 0.5));
        let l = info_nce(&mut g, u, u, 0.1).unwrap();
        assert!((g.scalar(l) - (b as f64).ln()).abs() < 1e-12);
    }
}
