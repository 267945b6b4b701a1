//! Caption next-token training of the projector, visual adapters and decoder.

use serde::{Deserialize, Serialize};

use super::Lmm;
use crate::encoders::{EncoderSet, NoiseDraw, VisualInput};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, ParamStore, Sampler};
use crate::scene::SceneGroundTruth;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 16,
            lr: 1e-3,
            clip: 1.0,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over the last `frac` of the logged steps (at least one step).
    pub fn final_loss(&self, frac: f64) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let n = ((self.losses.len() as f64 * frac).ceil() as usize).clamp(1, self.losses.len());
        let tail = &self.losses[self.losses.len() - n..];
        Some(tail.iter().sum::<f64>() / n as f64)
    }
}

/// Builds the batch suffixes (captions padded with `<eos>`) and per-row targets.
fn batch_targets(captions: &[&[usize]], eos: usize) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let s = captions.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut suffixes = Vec::with_capacity(captions.len());
    let mut targets = Vec::with_capacity(captions.len() * (s + 1));
    for c in captions {
        let mut row = c.to_vec();
        row.resize(s, eos);
        suffixes.push(row);
        for k in 0..=s {
            targets.push(match k.cmp(&c.len()) {
                std::cmp::Ordering::Less => Some(c[k]),
                std::cmp::Ordering::Equal => Some(eos),
                std::cmp::Ordering::Greater => None,
            });
        }
    }
    (suffixes, targets)
}

impl Lmm {
    /// Mean caption cross-entropy for one batch, on graph `g`.
    pub fn caption_loss(
        &self,
        g: &mut Graph<'_>,
        inputs: &[&VisualInput],
        captions: &[&[usize]],
        noise: &NoiseDraw,
        eos: usize,
    ) -> Result<crate::numerics::Var> {
        let (suffixes, targets) = batch_targets(captions, eos);
        let s = suffixes.first().map_or(0, |x| x.len());
        let visual = self.visual_tokens(g, inputs, noise)?;
        let out = self.sequence_forward(g, visual, &suffixes)?;
        let n = self.prompt_len();
        let rows: Vec<usize> = (0..captions.len())
            .flat_map(|b| (0..=s).map(move |k| b * out.len + n - 1 + k))
            .collect();
        let h = g.gather_rows(out.hidden, &rows)?;
        let logits = self.lm.logits(g, h)?;
        g.cross_entropy(logits, &targets)
    }

    /// Draws training noise for a batch when the diffusion branch is active.
    fn training_noise(&self, batch: usize, rng: &mut Sampler) -> NoiseDraw {
        if !self.visual.config.variant.uses_sd() {
            return NoiseDraw::Explicit(Vec::new());
        }
        let r = self.visual.config.unet.resolution;
        NoiseDraw::Explicit((0..batch).map(|_| rng.gaussian_vec(r * r * 3, 1.0)).collect())
    }
}

/// Trains every non-encoder parameter on caption prediction. Encoders are frozen first.
///
/// Only images and caption token ids are read from `scenes`; masks never enter the loss.
pub fn train_lmm(
    store: &mut ParamStore,
    lmm: &Lmm,
    scenes: &[SceneGroundTruth],
    inputs: &[VisualInput],
    eos: usize,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if scenes.len() != inputs.len() || scenes.is_empty() {
        return Err(Error::Argument("need one prepared input per scene".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    EncoderSet::freeze(store);
    let mut adam = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut noise_rng = Sampler::derived(cfg.seed, 0x4e01);
    'epochs: for epoch in 0..cfg.epochs {
        Sampler::derived(cfg.seed, epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| log.losses.len() >= m) {
                break 'epochs;
            }
            let batch_inputs: Vec<&VisualInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let captions: Vec<&[usize]> = chunk.iter().map(|&i| scenes[i].caption.as_slice()).collect();
            let noise = lmm.training_noise(chunk.len(), &mut noise_rng);
            let (loss, mut grads) = {
                let mut g = Graph::new(store);
                let loss = lmm.caption_loss(&mut g, &batch_inputs, &captions, &noise, eos)?;
                let value = g.scalar(loss);
                (value, g.backward(loss)?)
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Training(format!("non-finite loss at step {}", log.losses.len())));
            }
            let norm = grads.clip_global_norm(cfg.clip);
            adam.step(store, &grads);
            log.losses.push(loss);
            log.grad_norms.push(norm);
            log::debug!("step {} loss {loss:.4} grad-norm {norm:.3}", log.losses.len());
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub losses: Vec<f64>,
}

/// Mean and sample standard deviation of the final-window loss per variant.
pub fn pretrain_loss_report(runs: &[(String, Vec<TrainLog>)], window: f64) -> Vec<LossSummary> {
    runs.iter()
        .map(|(name, logs)| {
            let losses: Vec<f64> = logs.iter().filter_map(|l| l.final_loss(window)).collect();
            let n = losses.len() as f64;
            let mean = losses.iter().sum::<f64>() / n.max(1.0);
            let std = if losses.len() > 1 {
                (losses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            LossSummary {
                variant: name.clone(),
                mean,
                std,
                losses,
            }
        })
        .collect()
}
