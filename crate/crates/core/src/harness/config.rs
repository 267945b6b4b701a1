//! `key=value` experiment configuration with a closed key set.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::encoders::{EncoderBudgets, EncoderConfig, IcPooling, NoiseSchedule, PretrainBudget, UNetBudget, Variant};
use crate::error::{Error, Result};
use crate::grounding::{GroundingOptions, PromptMode};
use crate::lmm::{LmConfig, TrainConfig};
use crate::metrics::AreaBuckets;
use crate::scene::SceneConfig;

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("data.n_train", "2000"),
    ("data.n_val", "200"),
    ("data.n_test", "200"),
    ("data.seed", "0"),
    ("data.min_instances", "1"),
    ("data.max_instances", "4"),
    ("seeds", "0,1,2"),
    ("encoder.seed", "1"),
    ("encoder.variant", "sd_clip_pe_ic"),
    ("encoder.noise_step", "100"),
    ("encoder.tap_block", "2"),
    ("encoder.ic_pooling", "per_patch"),
    ("encoder.eval_eps_seed", "7"),
    ("encoder.unet_steps", "300"),
    ("encoder.clip_steps", "300"),
    ("encoder.vision_steps", "300"),
    ("lmm.d_model", "128"),
    ("lmm.n_layer", "4"),
    ("lmm.n_head", "4"),
    ("lmm.d_mlp", "512"),
    ("train.epochs", "6"),
    ("train.batch", "16"),
    ("train.lr", "0.001"),
    ("train.clip", "1.0"),
    ("pretrain.steps", "300"),
    ("pretrain.window", "0.1"),
    ("gen.max_tokens", "24"),
    ("gen.dump_traces", "false"),
    ("aas.normalize", "true"),
    ("aas.prompt_mode", "point"),
    ("aas.mask_quantile", "0.9"),
    ("aas.color_tol", "0.05"),
    ("metrics.iou_thresh", "0.5"),
    ("metrics.small_max", "10"),
    ("metrics.medium_max", "92"),
    ("baseline.seed", "11"),
    ("ablate.axis", "attn_norm"),
    ("ablate.variants", "sd_only,sd_pe,sd_pe_ic"),
    ("ablate.noise_steps", "50,100,200"),
    ("ablate.tap_blocks", "1,2,3"),
    ("overlay.scenes", ""),
    ("overlay.max_masks", "4"),
    ("overlay.scale", "4"),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Text of the config file as given (empty when only defaults are used).
    pub source: String,
    /// Effective value of every key.
    pub values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {x:?}"))))
        .collect()
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !values.contains_key(k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k:?} given twice", n + 1)));
            }
            values.insert(k.to_string(), v.to_string());
        }
        let cfg = Self {
            source: text.to_string(),
            values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Replaces one value, keeping the source text; the key must exist.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => *v = value.to_string(),
            None => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.validate()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(key, &self.get::<String>(key)?)
    }

    fn validate(&self) -> Result<()> {
        self.scene_config()?;
        self.encoder_config()?.validate(&NoiseSchedule::default())?;
        self.lm_config()?.validate()?;
        self.train_config(0)?;
        self.grounding_options()?;
        self.buckets()?;
        if self.seeds()?.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        for (k, v) in [("data.n_train", 1), ("data.n_val", 1), ("data.n_test", 1), ("gen.max_tokens", 1)] {
            if self.get::<usize>(k)? < v {
                return Err(Error::Config(format!("{k} must be at least {v}")));
            }
        }
        let q: f64 = self.get("aas.mask_quantile")?;
        let w: f64 = self.get("pretrain.window")?;
        if !(0.0..=1.0).contains(&q) || !(w > 0.0 && w <= 1.0) {
            return Err(Error::Config("aas.mask_quantile and pretrain.window must lie in (0, 1]".into()));
        }
        let t: f64 = self.get("metrics.iou_thresh")?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config("metrics.iou_thresh must lie in [0, 1]".into()));
        }
        parse_list::<Variant>("ablate.variants", &self.get::<String>("ablate.variants")?)?;
        parse_list::<usize>("ablate.noise_steps", &self.get::<String>("ablate.noise_steps")?)?;
        parse_list::<usize>("ablate.tap_blocks", &self.get::<String>("ablate.tap_blocks")?)?;
        parse_list::<u64>("overlay.scenes", &self.get::<String>("overlay.scenes")?)?;
        self.get::<super::AblationAxis>("ablate.axis")?;
        self.get::<bool>("gen.dump_traces")?;
        Ok(())
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.list("seeds")
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let cfg = SceneConfig {
            min_instances: self.get("data.min_instances")?,
            max_instances: self.get("data.max_instances")?,
            ..SceneConfig::default()
        };
        if cfg.min_instances == 0 || cfg.min_instances > cfg.max_instances {
            return Err(Error::Config("need 1 <= data.min_instances <= data.max_instances".into()));
        }
        Ok(cfg)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            variant: self.get("encoder.variant")?,
            noise_step: self.get("encoder.noise_step")?,
            tap_block: self.get("encoder.tap_block")?,
            ic_pooling: self.get::<IcPooling>("encoder.ic_pooling")?,
            eval_eps_seed: self.get("encoder.eval_eps_seed")?,
            ..EncoderConfig::default()
        })
    }

    pub fn encoder_budgets(&self) -> Result<EncoderBudgets> {
        Ok(EncoderBudgets {
            unet: UNetBudget {
                steps: self.get("encoder.unet_steps")?,
                ..UNetBudget::default()
            },
            clip: PretrainBudget {
                steps: self.get("encoder.clip_steps")?,
                ..PretrainBudget::default()
            },
            vision: PretrainBudget {
                steps: self.get("encoder.vision_steps")?,
                ..PretrainBudget::default()
            },
        })
    }

    pub fn lm_config(&self) -> Result<LmConfig> {
        Ok(LmConfig {
            d_model: self.get("lmm.d_model")?,
            n_layer: self.get("lmm.n_layer")?,
            n_head: self.get("lmm.n_head")?,
            d_mlp: self.get("lmm.d_mlp")?,
            ..LmConfig::default()
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            batch: self.get("train.batch")?,
            lr: self.get("train.lr")?,
            clip: self.get("train.clip")?,
            seed,
            max_steps: None,
        };
        if cfg.batch == 0 || !(cfg.lr > 0.0) || !(cfg.clip > 0.0) {
            return Err(Error::Config("train.batch, train.lr and train.clip must be positive".into()));
        }
        Ok(cfg)
    }

    /// Fixed-budget training used by the loss-comparison ablations.
    pub fn pretrain_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: usize::MAX,
            max_steps: Some(self.get("pretrain.steps")?),
            ..self.train_config(seed)?
        })
    }

    pub fn grounding_options(&self) -> Result<GroundingOptions> {
        Ok(GroundingOptions {
            prompt_mode: self.get::<PromptMode>("aas.prompt_mode")?,
            normalize: self.get("aas.normalize")?,
            color_tol: self.get("aas.color_tol")?,
            mask_quantile: self.get("aas.mask_quantile")?,
            ..GroundingOptions::default()
        })
    }

    pub fn buckets(&self) -> Result<AreaBuckets> {
        let b = AreaBuckets {
            small_max: self.get("metrics.small_max")?,
            medium_max: self.get("metrics.medium_max")?,
        };
        if b.small_max > b.medium_max {
            return Err(Error::Config("metrics.small_max exceeds metrics.medium_max".into()));
        }
        Ok(b)
    }

    /// Effective configuration as `key=value` lines.
    pub fn effective_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
