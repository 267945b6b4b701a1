//! Visual encoders producing the 8x8 token-grid feature map consumed by the LMM.
//!
//! Three families share the grid: a caption-contrastive patch encoder, a
//! vision-only patch encoder, and one-step denoising features of a small U-Net
//! whose cross-attention can be fed by an implicit captioner over the
//! contrastive patch features.

mod patch;
mod schedule;
mod unet;

use std::fmt;
use std::str::FromStr;

pub use patch::{
    image_patches, info_nce, pretrain_patch_encoder, retrieval_accuracy, PatchConfig, PatchEncoder, PretrainBudget,
    PretrainMode,
};
pub use schedule::NoiseSchedule;
pub use unet::{unet_planes, UNetConfig, UNetOutput, UNetToy};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::nn::Mlp;
use crate::numerics::{Adam, Graph, ParamId, ParamStore, Sampler, Tensor, Var};
use crate::scene::{SceneGroundTruth, Vocabulary};

/// Which features feed the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SdOnly,
    ClipOnly,
    VisionOnly,
    SdPe,
    SdPeIc,
    SdClipPeIc,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SdOnly,
        Variant::ClipOnly,
        Variant::VisionOnly,
        Variant::SdPe,
        Variant::SdPeIc,
        Variant::SdClipPeIc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SdOnly => "sd_only",
            Variant::ClipOnly => "clip_only",
            Variant::VisionOnly => "vision_only",
            Variant::SdPe => "sd+pe",
            Variant::SdPeIc => "sd+pe+ic",
            Variant::SdClipPeIc => "sd+clip+pe+ic",
        }
    }

    pub fn uses_sd(self) -> bool {
        matches!(self, Variant::SdOnly | Variant::SdPe | Variant::SdPeIc | Variant::SdClipPeIc)
    }

    /// Contrastive features concatenated into the visual tokens.
    pub fn concat_clip(self) -> bool {
        matches!(self, Variant::ClipOnly | Variant::SdClipPeIc)
    }

    /// Contrastive encoder needed at all (directly or through the captioner).
    pub fn needs_clip(self) -> bool {
        self.concat_clip() || self.uses_ic()
    }

    pub fn uses_vision_only(self) -> bool {
        self == Variant::VisionOnly
    }

    pub fn uses_pe(self) -> bool {
        matches!(self, Variant::SdPe | Variant::SdPeIc | Variant::SdClipPeIc)
    }

    pub fn uses_ic(self) -> bool {
        matches!(self, Variant::SdPeIc | Variant::SdClipPeIc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('+', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder variant {s:?}")))
    }
}

/// How the implicit captioner turns patch features into conditioning tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcPooling {
    PerPatch,
    Pooled,
}

impl FromStr for IcPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_patch" => Ok(IcPooling::PerPatch),
            "pooled" => Ok(IcPooling::Pooled),
            other => Err(Error::Config(format!("unknown captioner pooling {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub noise_step: usize,
    pub tap_block: usize,
    pub ic_pooling: IcPooling,
    pub ic_hidden: usize,
    pub eval_eps_seed: u64,
    pub unet: UNetConfig,
    pub patch: PatchConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SdClipPeIc,
            noise_step: 100,
            tap_block: 2,
            ic_pooling: IcPooling::PerPatch,
            ic_hidden: 64,
            eval_eps_seed: 7,
            unet: UNetConfig::default(),
            patch: PatchConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.patch.grid()
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.unet.grid() != self.patch.grid() {
            return Err(Error::Config(format!(
                "U-Net grid {} differs from patch grid {}",
                self.unet.grid(),
                self.patch.grid()
            )));
        }
        self.unet.tap_channels(self.tap_block)?;
        if self.noise_step > schedule.steps() {
            return Err(Error::Config(format!(
                "encoder.noise_step={} exceeds T={}",
                self.noise_step,
                schedule.steps()
            )));
        }
        Ok(())
    }

    /// Channel count `c_V` of the composed feature map.
    pub fn feature_channels(&self) -> Result<usize> {
        let v = self.variant;
        let mut c = 0;
        if v.uses_sd() {
            c += self.unet.tap_channels(self.tap_block)?;
        }
        if v.concat_clip() {
            c += self.patch.dim;
        }
        if v.uses_vision_only() {
            c += self.patch.dim;
        }
        Ok(c)
    }
}

/// Dense `h x w x c` feature grid; row `y * w + x` of `values` holds cell `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.rows() != h * w {
            return Err(Error::Dimension {
                op: "feature_map",
                left: vec![h, w],
                right: values.shape().to_vec(),
            });
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self {
            h,
            w,
            channels: values.cols(),
            values,
        })
    }
}

/// `concat(v_sd, v_clip) + pe` over matching grids; either input may be absent.
pub fn compose_visual_features(
    v_sd: Option<&FeatureMap>,
    v_clip: Option<&FeatureMap>,
    pe: Option<&Tensor>,
) -> Result<FeatureMap> {
    let parts: Vec<&FeatureMap> = [v_sd, v_clip].into_iter().flatten().collect();
    let first = parts.first().ok_or_else(|| Error::Argument("no features to compose".into()))?;
    let (h, w) = (first.h, first.w);
    for p in &parts {
        if (p.h, p.w) != (h, w) {
            return Err(Error::Dimension {
                op: "compose_visual_features",
                left: vec![h, w],
                right: vec![p.h, p.w],
            });
        }
    }
    let c: usize = parts.iter().map(|p| p.channels).sum();
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h * w {
        for p in &parts {
            data.extend_from_slice(&p.values.data()[r * p.channels..(r + 1) * p.channels]);
        }
    }
    if let Some(pe) = pe {
        if pe.shape() != [h * w, c] {
            return Err(Error::Dimension {
                op: "compose_visual_features",
                left: vec![h * w, c],
                right: pe.shape().to_vec(),
            });
        }
        data.iter_mut().zip(pe.data()).for_each(|(a, b)| *a += b);
    }
    FeatureMap::new(h, w, Tensor::new(vec![h * w, c], data)?)
}

/// Noise for feature extraction: a fixed draw from `seed`, shared by every image.
pub fn evaluation_eps(seed: u64, len: usize) -> Vec<f64> {
    Sampler::derived(seed, 0x0065_7073).gaussian_vec(len, 1.0)
}

/// Conditioning source for one-step feature extraction.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    /// The null token alone.
    Null,
    /// Caption tokens.
    Caption(&'a [usize]),
}

/// One forward pass of the frozen U-Net on the image noised to step `t` with the
/// pinned noise draw, returning the requested tap on the token grid.
pub fn extract_diffusion_features(
    store: &ParamStore,
    unet: Option<&UNetToy>,
    schedule: &NoiseSchedule,
    image: &Image,
    t: usize,
    tap_block: usize,
    conditioning: Conditioning<'_>,
    eps_seed: u64,
) -> Result<FeatureMap> {
    let unet = unet.ok_or_else(|| Error::State("diffusion features requested without pretrained U-Net weights".into()))?;
    let cfg = &unet.config;
    cfg.tap_channels(tap_block)?;
    let x0 = unet_planes(image, cfg.resolution)?;
    let eps = evaluation_eps(eps_seed, x0.len());
    let xt = schedule.noisy_latent(&x0, t, &eps)?;
    let mut g = Graph::inference(store);
    let x = g.constant(Tensor::new(vec![cfg.resolution * cfg.resolution, 3], xt)?);
    let ids = match conditioning {
        Conditioning::Null => vec![unet.null_token()],
        Conditioning::Caption(c) if !c.is_empty() => c.to_vec(),
        Conditioning::Caption(_) => vec![unet.null_token()],
    };
    let cond = unet.embed_condition(&mut g, &ids)?;
    let out = unet.forward(&mut g, x, &[t], cond, Some(tap_block))?;
    let tap = *out.taps.last().expect("tap reached");
    FeatureMap::new(cfg.grid(), cfg.grid(), g.value(tap).clone())
}

#[derive(Clone, Debug)]
pub struct UNetBudget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the caption with the null token.
    pub null_prob: f64,
}

impl Default for UNetBudget {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 2e-3,
            null_prob: 0.2,
        }
    }
}

fn padded_condition(captions: &[&[usize]], null: usize, drop: &[bool]) -> (Vec<usize>, usize) {
    let len = captions.iter().map(|c| c.len()).max().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(captions.len() * len);
    for (c, &d) in captions.iter().zip(drop) {
        for i in 0..len {
            ids.push(if d { null } else { c.get(i).copied().unwrap_or(null) });
        }
    }
    (ids, len)
}

/// Noise-prediction loss of the U-Net on explicitly given draws.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss(
    g: &mut Graph<'_>,
    unet: &UNetToy,
    schedule: &NoiseSchedule,
    planes: &[Vec<f64>],
    timesteps: &[usize],
    eps: &[Vec<f64>],
    cond_ids: &[usize],
) -> Result<Var> {
    let r = unet.config.resolution;
    let batch = planes.len();
    let mut xt = Vec::with_capacity(batch * r * r * 3);
    for b in 0..batch {
        xt.extend(schedule.noisy_latent(&planes[b], timesteps[b], &eps[b])?);
    }
    let x = g.constant(Tensor::new(vec![batch * r * r, 3], xt)?);
    let target = g.constant(Tensor::new(vec![batch * r * r, 3], eps.concat())?);
    let cond = unet.embed_condition(g, cond_ids)?;
    let out = unet.forward(g, x, timesteps, cond, None)?;
    g.mse(out.eps.expect("full pass"), target)
}

/// Trains the U-Net by noise prediction at uniform timesteps, then freezes it.
pub fn pretrain_unet_denoiser(
    store: &mut ParamStore,
    unet: &UNetToy,
    schedule: &NoiseSchedule,
    scenes: &[SceneGroundTruth],
    budget: &UNetBudget,
    seed: u64,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::Argument("U-Net pretraining needs scenes".into()));
    }
    let r = unet.config.resolution;
    let planes: Vec<Vec<f64>> = scenes.iter().map(|s| unet_planes(&s.image, r)).collect::<Result<_>>()?;
    let mut rng = Sampler::new(seed);
    let mut adam = Adam::new(budget.lr);
    let mut losses = Vec::with_capacity(budget.steps);
    let batch = budget.batch.min(scenes.len());
    for step in 0..budget.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(scenes.len())).collect();
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| planes[i].clone()).collect();
        let ts: Vec<usize> = (0..batch).map(|_| schedule.sample_t(&mut rng)).collect();
        let eps: Vec<Vec<f64>> = (0..batch).map(|_| rng.gaussian_vec(r * r * 3, 1.0)).collect();
        let drop: Vec<bool> = (0..batch).map(|_| rng.uniform() < budget.null_prob).collect();
        let caps: Vec<&[usize]> = idx.iter().map(|&i| scenes[i].caption.as_slice()).collect();
        let (ids, _) = padded_condition(&caps, unet.null_token(), &drop);
        let (v, grads) = {
            let mut g = Graph::new(store);
            let loss = denoising_loss(&mut g, unet, schedule, &p, &ts, &eps, &ids)?;
            let v = g.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Training(format!("U-Net loss non-finite at step {step}")));
            }
            (v, g.backward(loss)?)
        };
        adam.step(store, &grads);
        losses.push(v);
    }
    store.set_frozen_prefix(UNetToy::PREFIX, true);
    log::info!(
        "unet pretraining: loss {:.4} -> {:.4}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(losses)
}

/// Denoising loss at a fixed step over `scenes`, against the zero predictor's loss.
pub fn denoising_loss_at(
    store: &ParamStore,
    unet: &UNetToy,
    schedule: &NoiseSchedule,
    scenes: &[SceneGroundTruth],
    t: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let r = unet.config.resolution;
    let mut rng = Sampler::new(seed);
    let planes: Vec<Vec<f64>> = scenes.iter().map(|s| unet_planes(&s.image, r)).collect::<Result<_>>()?;
    let eps: Vec<Vec<f64>> = planes.iter().map(|_| rng.gaussian_vec(r * r * 3, 1.0)).collect();
    let ts = vec![t; scenes.len()];
    let caps: Vec<&[usize]> = scenes.iter().map(|s| s.caption.as_slice()).collect();
    let (ids, _) = padded_condition(&caps, unet.null_token(), &vec![false; scenes.len()]);
    let mut g = Graph::inference(store);
    let loss = denoising_loss(&mut g, unet, schedule, &planes, &ts, &eps, &ids)?;
    let zero = eps.iter().flatten().map(|e| e * e).sum::<f64>() / (eps.len() * r * r * 3) as f64;
    Ok((g.scalar(loss), zero))
}

/// Frozen encoders shared by every language model trained on top of them.
#[derive(Clone, Debug)]
pub struct EncoderSet {
    pub unet: Option<UNetToy>,
    pub clip: Option<PatchEncoder>,
    pub vision: Option<PatchEncoder>,
}

impl EncoderSet {
    pub const CLIP_PREFIX: &'static str = "clip.";
    pub const VISION_PREFIX: &'static str = "vision.";

    /// Registers the encoders a variant needs (all of them with `all`).
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, all: bool, rng: &mut Sampler) -> Self {
        let v = cfg.variant;
        Self {
            unet: (all || v.uses_sd()).then(|| UNetToy::new(store, cfg.unet.clone(), rng)),
            clip: (all || v.needs_clip()).then(|| PatchEncoder::new(store, Self::CLIP_PREFIX, cfg.patch.clone(), true, rng)),
            vision: (all || v.uses_vision_only())
                .then(|| PatchEncoder::new(store, Self::VISION_PREFIX, cfg.patch.clone(), false, rng)),
        }
    }

    pub fn freeze(store: &mut ParamStore) {
        for p in [UNetToy::PREFIX, Self::CLIP_PREFIX, Self::VISION_PREFIX] {
            store.set_frozen_prefix(p, true);
        }
    }

    pub fn is_encoder_param(name: &str) -> bool {
        [UNetToy::PREFIX, Self::CLIP_PREFIX, Self::VISION_PREFIX]
            .iter()
            .any(|p| name.starts_with(p))
    }
}

#[derive(Clone, Debug)]
#[derive(Default)]
pub struct EncoderBudgets {
    pub unet: UNetBudget,
    pub clip: PretrainBudget,
    pub vision: PretrainBudget,
}


/// Loss curves from encoder pretraining.
#[derive(Clone, Debug, Default)]
pub struct EncoderLosses {
    pub unet: Vec<f64>,
    pub clip: Vec<f64>,
    pub vision: Vec<f64>,
}

/// Pretrains every registered encoder and freezes them.
pub fn pretrain_encoders(
    store: &mut ParamStore,
    set: &EncoderSet,
    schedule: &NoiseSchedule,
    scenes: &[SceneGroundTruth],
    budgets: &EncoderBudgets,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EncoderLosses> {
    let mut out = EncoderLosses::default();
    if let Some(u) = &set.unet {
        out.unet = pretrain_unet_denoiser(store, u, schedule, scenes, &budgets.unet, seed ^ 0x11)?;
    }
    if let Some(c) = &set.clip {
        out.clip = pretrain_patch_encoder(store, c, scenes, PretrainMode::Contrastive, &budgets.clip, vocab, seed ^ 0x22)?;
    }
    if let Some(v) = &set.vision {
        out.vision = pretrain_patch_encoder(store, v, scenes, PretrainMode::VisionOnly, &budgets.vision, vocab, seed ^ 0x33)?;
    }
    EncoderSet::freeze(store);
    Ok(out)
}

/// Per-scene inputs that do not depend on trainable parameters.
#[derive(Clone, Debug)]
pub struct VisualInput {
    pub planes: Vec<f64>,
    pub clip: Option<Vec<f64>>,
    pub vision: Option<Vec<f64>>,
}

/// Noise used for the diffusion branch of one batch.
#[derive(Clone, Debug)]
pub enum NoiseDraw {
    /// The pinned evaluation draw.
    Evaluation,
    /// Explicit per-example noise (training).
    Explicit(Vec<Vec<f64>>),
}

/// Encoders plus the trainable visual parameters (PE grid and implicit captioner).
#[derive(Clone, Debug)]
pub struct VisualStack {
    pub config: EncoderConfig,
    pub encoders: EncoderSet,
    pub schedule: NoiseSchedule,
    pub ic: Option<Mlp>,
    pub pe: Option<ParamId>,
}

impl VisualStack {
    pub const IC_PREFIX: &'static str = "ic.";
    pub const PE_NAME: &'static str = "pe";

    pub fn new(store: &mut ParamStore, config: EncoderConfig, schedule: NoiseSchedule, rng: &mut Sampler) -> Result<Self> {
        config.validate(&schedule)?;
        let encoders = EncoderSet::register(store, &config, false, rng);
        let v = config.variant;
        let ic = v
            .uses_ic()
            .then(|| Mlp::new(store, "ic", config.patch.dim, config.ic_hidden, config.unet.cond_dim, rng));
        let c = config.feature_channels()?;
        let hw = config.grid() * config.grid();
        let pe = v.uses_pe().then(|| store.add(Self::PE_NAME, Tensor::zeros(vec![hw, c])));
        Ok(Self {
            config,
            encoders,
            schedule,
            ic,
            pe,
        })
    }

    pub fn tokens(&self) -> usize {
        self.config.grid() * self.config.grid()
    }

    pub fn channels(&self) -> usize {
        self.config.feature_channels().expect("validated")
    }

    /// Parameter-free inputs for one image; frozen patch features are computed here.
    pub fn prepare(&self, store: &ParamStore, image: &Image) -> Result<VisualInput> {
        let v = self.config.variant;
        let planes = if v.uses_sd() {
            unet_planes(image, self.config.unet.resolution)?
        } else {
            Vec::new()
        };
        let clip = match (&self.encoders.clip, v.needs_clip()) {
            (Some(c), true) => Some(c.encode(store, image)?),
            _ => None,
        };
        let vision = match &self.encoders.vision {
            Some(e) if v.uses_vision_only() => Some(e.encode(store, image)?),
            _ => None,
        };
        Ok(VisualInput { planes, clip, vision })
    }

    /// Composed features `[batch * hw, c_V]` for a batch of prepared inputs.
    pub fn features(&self, g: &mut Graph<'_>, inputs: &[&VisualInput], noise: &NoiseDraw) -> Result<Var> {
        let v = self.config.variant;
        let batch = inputs.len();
        let hw = self.tokens();
        let dim = self.config.patch.dim;
        let clip = if v.needs_clip() {
            let mut d = Vec::with_capacity(batch * hw * dim);
            for i in inputs {
                d.extend_from_slice(i.clip.as_ref().ok_or_else(|| Error::State("missing patch features".into()))?);
            }
            Some(g.constant(Tensor::new(vec![batch * hw, dim], d)?))
        } else {
            None
        };
        let mut parts = Vec::new();
        if v.uses_sd() {
            let unet = self
                .encoders
                .unet
                .as_ref()
                .ok_or_else(|| Error::State("variant needs the U-Net but none is loaded".into()))?;
            let r = self.config.unet.resolution;
            let t = self.config.noise_step;
            let mut xt = Vec::with_capacity(batch * r * r * 3);
            let pinned = matches!(noise, NoiseDraw::Evaluation).then(|| evaluation_eps(self.config.eval_eps_seed, r * r * 3));
            for (b, inp) in inputs.iter().enumerate() {
                let eps = match (noise, &pinned) {
                    (_, Some(p)) => p.as_slice(),
                    (NoiseDraw::Explicit(e), None) => e[b].as_slice(),
                    (NoiseDraw::Evaluation, None) => unreachable!(),
                };
                xt.extend(self.schedule.noisy_latent(&inp.planes, t, eps)?);
            }
            let x = g.constant(Tensor::new(vec![batch * r * r, 3], xt)?);
            let cond = match (&self.ic, clip) {
                (Some(ic), Some(c)) => match self.config.ic_pooling {
                    IcPooling::PerPatch => ic.forward(g, c)?,
                    IcPooling::Pooled => {
                        let p = g.mean_groups(c, hw)?;
                        ic.forward(g, p)?
                    }
                },
                _ => unet.embed_condition(g, &vec![unet.null_token(); batch])?,
            };
            let out = unet.forward(g, x, &vec![t; batch], cond, Some(self.config.tap_block))?;
            parts.push(*out.taps.last().expect("tap reached"));
        }
        if v.concat_clip() {
            parts.push(clip.expect("clip present"));
        }
        if v.uses_vision_only() {
            let mut d = Vec::with_capacity(batch * hw * dim);
            for i in inputs {
                d.extend_from_slice(i.vision.as_ref().ok_or_else(|| Error::State("missing vision features".into()))?);
            }
            parts.push(g.constant(Tensor::new(vec![batch * hw, dim], d)?));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        if let Some(pe) = self.pe {
            let pe = g.param(pe);
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..hw).collect();
            let tiled = g.gather_rows(pe, &idx)?;
            x = g.add(x, tiled)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(h: usize, w: usize, c: usize, base: f64) -> FeatureMap {
        let data = (0..h * w * c).map(|i| base + i as f64).collect();
        FeatureMap::new(h, w, Tensor::new(vec![h * w, c], data).unwrap()).unwrap()
    }

    #[test]
    fn compose_identity_and_layout() {
        let sd = fm(8, 8, 16, 0.0);
        let out = compose_visual_features(Some(&sd), None, Some(&Tensor::zeros(vec![64, 16]))).unwrap();
        assert_eq!(out, sd);
        let clip = fm(8, 8, 16, 1000.0);
        let out = compose_visual_features(Some(&sd), Some(&clip), None).unwrap();
        assert_eq!(out.channels, 32);
        for r in 0..64 {
            assert_eq!(&out.values.data()[r * 32..r * 32 + 16], &sd.values.data()[r * 16..(r + 1) * 16]);
        }
        assert!(compose_visual_features(Some(&sd), Some(&fm(4, 4, 16, 0.0)), None).is_err());
    }

    #[test]
    fn compose_is_linear() {
        let (a, b) = (fm(2, 2, 3, 0.5), fm(2, 2, 3, -2.0));
        let sum = FeatureMap::new(
            2,
            2,
            Tensor::new(vec![4, 3], a.values.data().iter().zip(b.values.data()).map(|(x, y)| x + y).collect()).unwrap(),
        )
        .unwrap();
        let ca = compose_visual_features(Some(&a), None, None).unwrap();
        let cb = compose_visual_features(Some(&b), None, None).unwrap();
        let cs = compose_visual_features(Some(&sum), None, None).unwrap();
        for i in 0..12 {
            assert!((cs.values.data()[i] - ca.values.data()[i] - cb.values.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sd+dino".parse::<Variant>().is_err());
    }

    #[test]
    fn tap_bounds_and_missing_weights() {
        let cfg = UNetConfig::default();
        assert!(matches!(cfg.tap_channels(4), Err(Error::Config(_))));
        let store = ParamStore::new();
        let img = Image::filled(64, 64, [0.0; 3]);
        let r = extract_diffusion_features(&store, None, &NoiseSchedule::default(), &img, 100, 2, Conditioning::Null, 0);
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = Sampler::new(0);
        let unet = UNetToy::new(&mut store, UNetConfig::default(), &mut rng);
        let s = NoiseSchedule::default();
        let img = Image::filled(64, 64, [0.2, 0.4, 0.9]);
        let a = extract_diffusion_features(&store, Some(&unet), &s, &img, 100, 2, Conditioning::Null, 3).unwrap();
        let b = extract_diffusion_features(&store, Some(&unet), &s, &img, 100, 2, Conditioning::Null, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.h, a.w, a.channels), (8, 8, 32));
        assert!(extract_diffusion_features(&store, Some(&unet), &s, &img, 100, 4, Conditioning::Null, 3).is_err());
    }

    #[test]
    fn exact_noise_prediction_has_zero_loss_and_zero_predictor_unit_loss() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let mut rng = Sampler::new(5);
        let eps = rng.gaussian_vec(100_000, 1.0);
        let a = g.constant(Tensor::new(vec![eps.len(), 1], eps.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![eps.len(), 1], eps.clone()).unwrap());
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let z = g.constant(Tensor::zeros(vec![eps.len(), 1]));
        let l = g.mse(z, b).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 0.02);
    }
}
